"""``alignps`` command: gen-data, train, eval, search.

Exit codes: 0 success, 1 usage or invalid input, 2 runtime failure.
Settings come from the shipped default config, then ``--config FILE``, then
flags (including ``--set key=value`` for any config key).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import yaml

from .config import Config, ConfigError, config_from_dict, dump_config, load_config, set_dotted, shipped_config
from .core import BoundingBox, SceneImage
from .data import (
    DatasetManifest,
    SyntheticSizingError,
    _spec_dict,
    generate_synthetic,
    load_image,
    load_scenes,
    spec_from_dict,
    write_split,
)
from .dconv import ConfigurationError
from .evaluation import DEFAULT_GALLERY_SIZE, Predictions, evaluate_detection, evaluate_search, gallery_sweep

log = logging.getLogger("alignps")

USAGE, RUNTIME = 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE, f"{self.prog}: error: {message}\n")


# flag dest -> config key
TRAIN_FLAGS = {
    "seed": "train.seed",
    "epochs": "train.total_epochs",
    "max_steps": "train.max_steps",
    "lr": "train.base_lr",
    "batch_size": "train.batch_size",
    "threads": "train.num_threads",
    "preset": "train.ablation_preset",
}


def _parse_list(text: str, kind=int) -> list:
    try:
        return [kind(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"malformed list {text!r}") from None


def parse_box(text: str) -> BoundingBox:
    parts = text.split(",")
    if len(parts) != 4:
        raise UsageError(f"box must be X1,Y1,X2,Y2, got {text!r}")
    try:
        vals = [float(v) for v in parts]
    except ValueError:
        raise UsageError(f"box must be four numbers, got {text!r}") from None
    try:
        return BoundingBox(*vals)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def resolve_config(path: Optional[str], overrides: dict, sets: Sequence[str] = ()) -> Config:
    cfg = load_config(path) if path else shipped_config("desk")
    d = cfg.to_dict()
    for item in sets:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        set_dotted(d, key, yaml.safe_load(value))
    for key, value in overrides.items():
        if value is not None:
            set_dotted(d, key, value)
    return config_from_dict(d)


def _ensure_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise RuntimeError(f"cannot write to {out}: {exc}") from exc
    return out


# ---------------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args.config, {})
    spec = cfg.data.synthetic
    if args.spec:
        with open(args.spec) as fh:
            raw = yaml.safe_load(fh) or {}
        spec = spec_from_dict({**_spec_dict(spec), **raw})
    if args.num_identities is not None:
        spec = spec_from_dict({**_spec_dict(spec), "num_identities": args.num_identities})
    spec.validate()
    out = _ensure_dir(args.out)
    n_train = cfg.data.n_train if args.n_train is None else args.n_train
    n_test = cfg.data.n_test if args.n_test is None else args.n_test
    gallery = cfg.eval.gallery_size if args.gallery_size is None else args.gallery_size
    paths = []
    if n_train:
        paths.append(write_split(generate_synthetic(spec, n_train, args.seed, "train"), out))
    if n_test:
        paths.append(write_split(generate_synthetic(spec, n_test, args.seed, "test", gallery), out))
    for p in paths:
        print(f"{p} {DatasetManifest.load(p).digest()}")
    return 0


def _training_data(cfg: Config, data_dir: Optional[str]):
    if data_dir is None:
        from .trainer import synthetic_data

        train, test = synthetic_data(cfg)
        return train.scenes(), train.manifest.labeled_identity_count, (train, test)
    root = Path(data_dir)
    manifest = DatasetManifest.load(root / "train.json")
    scenes = load_scenes(manifest, root)
    return [scenes[r.file] for r in manifest.images], manifest.labeled_identity_count, None


def cmd_train(args) -> int:
    from .trainer import ABLATION_PRESETS, Trainer, run_ablation

    overrides = {TRAIN_FLAGS[k]: getattr(args, k) for k in TRAIN_FLAGS}
    cfg = resolve_config(args.config, overrides, args.set or ())
    out = _ensure_dir(args.out)
    dump_config(cfg, out / "config.yaml")
    if args.preset:
        if args.preset not in ABLATION_PRESETS:
            raise UsageError(f"unknown preset {args.preset!r}; choose from {', '.join(ABLATION_PRESETS)}")
        seeds = _parse_list(args.seeds) if args.seeds else [cfg.train.seed]
        csv_path = out / f"{args.preset}.csv"
        run_ablation(args.preset, cfg, seeds, csv_path,
                     progress=lambda r: print(f"{r.name} seed={r.seed} recall={r.recall:.4f} ap={r.ap:.4f} "
                                              f"map={r.mAP:.4f} top1={r.top1:.4f}", flush=True))
        print(csv_path)
        return 0
    scenes, num_ids, _ = _training_data(cfg, args.data)
    if args.resume:
        trainer = Trainer.from_checkpoint(args.resume, scenes, cfg)
    else:
        trainer = Trainer(cfg, scenes, num_ids)
    ckpt = out / "checkpoint.npz"
    every = args.checkpoint_every
    log_path = out / "metrics.jsonl"
    while trainer.step < trainer.total_steps:
        target = trainer.total_steps if not every else min(trainer.total_steps, (trainer.step // every + 1) * every)
        trainer.fit(target, log_path=log_path)
        trainer.save(out / f"checkpoint_{trainer.step:06d}.npz" if every else ckpt)
    trainer.save(ckpt)
    print(ckpt)
    return 0


def _load_trainer(checkpoint: str, config: Optional[str]):
    from .trainer import Trainer

    cfg = load_config(config) if config else None
    return Trainer.from_checkpoint(checkpoint, (), cfg)


def cmd_eval(args) -> int:
    out = _ensure_dir(args.out)
    manifest_path = Path(args.manifest)
    manifest = DatasetManifest.load(manifest_path)
    if args.predictions:
        preds = Predictions.load(args.predictions)
        iou = 0.5
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint or --predictions")
        trainer = _load_trainer(args.checkpoint, args.config)
        preds = trainer.predict(manifest, load_scenes(manifest, manifest_path.parent))
        preds.save(out / "predictions.json")
        iou = trainer.cfg.eval.iou_thresh
    sizes = _parse_list(args.gallery_sizes) if args.gallery_sizes else [DEFAULT_GALLERY_SIZE]
    if any(s < 1 for s in sizes):
        raise UsageError("gallery sizes must be positive")
    recall, ap = evaluate_detection(manifest, preds, iou)
    mAP, top1, _ = evaluate_search(manifest, preds, None, args.seed, iou)
    metrics = {"recall": recall, "ap": ap, "map": mAP, "top1": top1}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
    gallery_sweep(manifest, preds, sizes, out / "gallery_sweep.csv", out / "gallery_sweep.png" if args.chart else None, args.seed)
    print(json.dumps(metrics))
    return 0


def cmd_search(args) -> int:
    box = parse_box(args.query_box)
    if args.topk < 1:
        raise UsageError("--topk must be >= 1")
    q_pixels = load_image(args.query)
    h, w = q_pixels.shape[:2]
    if box.x1 < 0 or box.y1 < 0 or box.x2 > w or box.y2 > h:
        raise UsageError(f"query box {box.as_list()} lies outside the {w}x{h} query image")
    trainer = _load_trainer(args.checkpoint, args.config)
    maps, sx, sy, _ = trainer.image_maps(SceneImage(q_pixels, str(args.query)))
    q = trainer.query_embedding(maps, box, sx, sy)
    gallery = Path(args.gallery)
    files = sorted(p for p in gallery.rglob("*") if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not files:
        raise RuntimeError(f"no images found under {gallery}")
    ranked = []
    for f in files:
        scene = SceneImage(load_image(f), str(f))
        m, gx, gy, t = trainer.image_maps(scene)
        for d in trainer.detect(m, t, gx, gy):
            ranked.append((float(d.embedding @ q), str(f.relative_to(gallery)), d.box))
    ranked.sort(key=lambda r: -r[0])
    rows = ranked[: args.topk]
    lines = [f"{img} {b.x1:.1f},{b.y1:.1f},{b.x2:.1f},{b.y2:.1f} {sim:.6f}" for sim, img, b in rows]
    print("\n".join(lines))
    if args.out:
        out = _ensure_dir(args.out)
        (out / "matches.json").write_text(json.dumps(
            [{"image": img, "bbox": b.as_list(), "similarity": sim} for sim, img, b in rows], indent=2))
    return 0


# ---------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="alignps", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic train/test split")
    g.add_argument("--spec", help="YAML file of synthetic-scene fields (overrides data.synthetic)")
    g.add_argument("--config", help="config file supplying data.synthetic, data.n_train, data.n_test")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=0, help="generator seed")
    g.add_argument("--num-identities", type=int, help="data.synthetic.num_identities")
    g.add_argument("--n-train", type=int, help="data.n_train")
    g.add_argument("--n-test", type=int, help="data.n_test")
    g.add_argument("--gallery-size", type=int, help="eval.gallery_size used for the manifest's query galleries")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model or run an ablation preset")
    t.add_argument("--config", help="config YAML (complete schema); default: shipped desk profile")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--preset", help="ablation preset: scale, region, task, loss, dcn, baseline (train.ablation_preset)")
    t.add_argument("--seeds", help="comma-separated seeds for --preset runs")
    t.add_argument("--data", help="directory holding train.json from gen-data; default: generate from config")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--checkpoint-every", type=int, default=0, help="also save a checkpoint every N steps")
    t.add_argument("--seed", type=int, help="train.seed")
    t.add_argument("--epochs", type=int, help="train.total_epochs")
    t.add_argument("--max-steps", type=int, help="train.max_steps")
    t.add_argument("--lr", type=float, help="train.base_lr")
    t.add_argument("--batch-size", type=int, help="train.batch_size")
    t.add_argument("--threads", type=int, help="train.num_threads")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key (repeatable)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="detection and person-search metrics")
    e.add_argument("--checkpoint", help="checkpoint from train")
    e.add_argument("--config", help="expected config; its hash must match the checkpoint's")
    e.add_argument("--predictions", help="evaluate an exported predictions.json instead of a checkpoint")
    e.add_argument("--manifest", required=True, help="test manifest (images resolved relative to it)")
    e.add_argument("--gallery-sizes", help="comma-separated gallery sizes for the sweep CSV (default 100); "
                   "headline metrics use the manifest's own query galleries")
    e.add_argument("--chart", action="store_true", help="also write gallery_sweep.png")
    e.add_argument("--seed", type=int, default=0, help="gallery sampling seed")
    e.add_argument("--out", required=True, help="output directory")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("search", help="rank gallery detections against one query box")
    s.add_argument("--checkpoint", required=True, help="checkpoint from train")
    s.add_argument("--config", help="expected config; its hash must match the checkpoint's")
    s.add_argument("--query", required=True, help="query image")
    s.add_argument("--query-box", required=True, help="X1,Y1,X2,Y2 in query-image pixels")
    s.add_argument("--gallery", required=True, help="directory of gallery images")
    s.add_argument("--topk", type=int, default=10, help="number of matches to print")
    s.add_argument("--out", help="optional directory for matches.json")
    s.set_defaults(func=cmd_search)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ConfigurationError, SyntheticSizingError) as exc:
        print(f"alignps: error: {exc}", file=sys.stderr)
        return USAGE
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        log.debug("failure", exc_info=True)
        print(f"alignps: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME


if __name__ == "__main__":
    sys.exit(main())
