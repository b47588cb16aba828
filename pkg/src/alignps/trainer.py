"""Joint training loop, checkpoints, prediction export and ablation presets."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .afa import assign_level
from .config import Config, config_from_dict, config_hash
from .core import BoundingBox, SceneImage
from .data import DatasetManifest, collate, generate_synthetic, test_transform, train_transform
from .evaluation import Predictions, evaluate_detection, evaluate_search, query_key, write_csv
from .head import assign_targets, decode_detections, detection_loss, grid_locations
from .model import PersonSearchNet
from .reid import ReidMemory, person_locations, toim_loss, update_memory

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    def __init__(self, terms: dict[str, float], step: int):
        super().__init__(f"non-finite loss at step {step}: {terms}")
        self.terms = terms
        self.step = step


class CheckpointMismatchError(RuntimeError):
    pass


def lr_at(step: int, cfg, steps_per_epoch: int) -> float:
    """Learning rate for optimizer step ``step`` (0-based): linear warmup, then step decay by epoch."""
    epoch = step // steps_per_epoch
    lr = cfg.base_lr * cfg.lr_gamma ** sum(epoch >= s for s in cfg.lr_steps)
    if step < cfg.warmup_steps:
        k = step / cfg.warmup_steps
        lr *= cfg.warmup_ratio + (1 - cfg.warmup_ratio) * k
    return lr


def _level_of(box: BoundingBox, cfg: Config) -> str:
    return assign_level(box, cfg.model.afa)


class Trainer:
    def __init__(self, cfg: Config, train_scenes: Sequence[SceneImage], num_identities: int):
        self.cfg = cfg
        torch.set_num_threads(cfg.train.num_threads)
        torch.manual_seed(cfg.train.seed)
        self.model = PersonSearchNet(cfg.model)
        self.model.train()
        d = cfg.model.afa.out_channels
        self.memory = ReidMemory(num_identities, d, cfg.reid.queue_size, cfg.reid.momentum, cfg.reid.temperature, seed=cfg.train.seed)
        self.optimizer = torch.optim.SGD(
            self.model.parameters(), lr=cfg.train.base_lr, momentum=cfg.train.momentum, weight_decay=cfg.train.weight_decay
        )
        self.scenes = list(train_scenes)
        self.step = 0
        self.steps_per_epoch = max(1, math.ceil(len(self.scenes) / cfg.train.batch_size))

    # ------------------------------------------------------------------ schedule / data

    @property
    def total_steps(self) -> int:
        total = self.cfg.train.total_epochs * self.steps_per_epoch
        if self.cfg.train.max_steps is not None:
            total = min(total, self.cfg.train.max_steps)
        return total

    def lr(self, step: Optional[int] = None) -> float:
        return lr_at(self.step if step is None else step, self.cfg.train, self.steps_per_epoch)

    def batch_for_step(self, step: int) -> list[SceneImage]:
        n = len(self.scenes)
        B = self.cfg.train.batch_size
        epoch, pos = divmod(step, self.steps_per_epoch)
        perm = np.random.default_rng([self.cfg.train.seed, epoch]).permutation(n)
        idx = perm[pos * B: pos * B + B]
        rng = np.random.default_rng([self.cfg.train.seed, step, 1])
        return [train_transform(self.scenes[i], rng, self.cfg.data.profile) for i in idx]

    # ------------------------------------------------------------------ step

    def compute_losses(self, batch: Sequence[SceneImage]):
        """Forward pass and loss terms; also returns the per-person features for the memory update."""
        cfg = self.cfg
        arr, padded = collate(batch)
        out = self.model(torch.from_numpy(arr))
        radius = cfg.model.head.center_radius
        person_levels = [[_level_of(a.box, cfg) for a in img.annotations] for img in padded]
        boxes = [np.array([a.box.as_list() for a in img.annotations], dtype=np.float64).reshape(-1, 4) for img in padded]

        cls_l, ctr_l, reg_l, lab, regt, ctrt, valid = [], [], [], [], [], [], []
        for name, lv in out.items():
            stride = lv["stride"]
            h, w = lv["cls_logits"].shape[-2:]
            locs = grid_locations(h, w, stride)
            for i, img in enumerate(padded):
                eligible = np.array([pl == name for pl in person_levels[i]], dtype=bool)
                tg = assign_targets(locs, boxes[i], stride, radius, eligible, img.valid_hw)
                cls_l.append(lv["cls_logits"][i].reshape(-1))
                ctr_l.append(lv["ctr_logits"][i].reshape(-1))
                reg_l.append(lv["bbox_reg"][i].reshape(4, -1).T)
                lab.append(torch.from_numpy(tg.labels))
                regt.append(torch.from_numpy(tg.reg))
                ctrt.append(torch.from_numpy(tg.centerness))
                valid.append(torch.from_numpy(tg.valid))
        dtype = cls_l[0].dtype
        det = detection_loss(
            torch.cat(cls_l), torch.cat(ctr_l), torch.cat(reg_l),
            torch.cat(lab), torch.cat(regt).to(dtype), torch.cat(ctrt).to(dtype), torch.cat(valid),
            cfg.model.head,
        )

        S = cfg.reid.samples_per_person
        labeled_feats, labeled_ids, mem_feats, mem_ids = [], [], [], []
        for i, img in enumerate(padded):
            for j, ann in enumerate(img.annotations):
                name = person_levels[i][j]
                lv = out[name]
                fm = lv["embed"][i]
                eligible = np.array([pl == name for pl in person_levels[i]], dtype=bool)
                locs = person_locations(fm.shape[-2:], lv["stride"], boxes[i], j, S, radius, eligible, img.valid_hw)
                r = torch.from_numpy(locs[:, 0])
                c = torch.from_numpy(locs[:, 1])
                feats = F.normalize(fm[:, r, c].T, dim=1)
                ident = -1 if ann.identity is None else int(ann.identity)
                if ident >= 0:
                    labeled_feats.append(feats)
                    labeled_ids += [ident] * len(feats)
                mem_feats.append(feats[0])
                mem_ids.append(ident)
        D = cfg.model.afa.out_channels
        if labeled_feats:
            lf = torch.cat(labeled_feats)
        else:
            lf = out[next(iter(out))]["embed"].new_zeros((0, D))
        li = torch.tensor(labeled_ids, dtype=torch.long)
        reid = toim_loss(lf, li, lf, li, self.memory, cfg.reid)
        if not labeled_feats:
            reid = {k: v + out[next(iter(out))]["embed"].sum() * 0.0 for k, v in reid.items()}
        det_total = det["loss_cls"] + det["loss_reg"] + det["loss_ctr"]
        total = cfg.train.w_det * det_total + cfg.train.w_reid * reid["total"]
        terms = {**det, "loss_oim": reid["oim"], "loss_tri": reid["tri"], "loss": total}
        mem = (torch.stack(mem_feats).detach() if mem_feats else torch.zeros((0, D)), mem_ids)
        return terms, mem

    def train_step(self, batch: Optional[Sequence[SceneImage]] = None) -> dict[str, float]:
        if batch is None:
            batch = self.batch_for_step(self.step)
        lr = self.lr()
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        terms, (mem_feats, mem_ids) = self.compute_losses(batch)
        values = {k: float(v.detach()) for k, v in terms.items()}
        if not all(math.isfinite(v) for v in values.values()):
            raise NonFiniteLossError(values, self.step)
        self.optimizer.zero_grad(set_to_none=True)
        terms["loss"].backward()
        if self.cfg.train.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.train.grad_clip)
        self.optimizer.step()
        if self.cfg.train.w_reid > 0 and len(mem_ids):
            update_memory(self.memory, mem_feats, mem_ids)
        self.step += 1
        values["lr"] = lr
        values["step"] = self.step
        return values

    def fit(self, steps: Optional[int] = None, log_path=None, checkpoint_path=None, callback: Optional[Callable] = None):
        """Train until ``steps`` (default: the configured total); appends JSON lines to ``log_path``."""
        end = self.total_steps if steps is None else steps
        fh = open(log_path, "a") if log_path else None
        history = []
        try:
            while self.step < end:
                rec = self.train_step()
                history.append(rec)
                if fh:
                    fh.write(json.dumps(rec) + "\n")
                if callback:
                    callback(rec)
        finally:
            if fh:
                fh.close()
        if checkpoint_path:
            self.save(checkpoint_path)
        return history

    # ------------------------------------------------------------------ checkpoints

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays: dict[str, np.ndarray] = {}
        for k, v in self.model.state_dict().items():
            arrays[f"model/{k}"] = v.detach().numpy().copy()
        names = {id(p): n for n, p in self.model.named_parameters()}
        for group in self.optimizer.param_groups:
            for p in group["params"]:
                buf = self.optimizer.state.get(p, {}).get("momentum_buffer")
                if buf is not None:
                    arrays[f"optim/{names[id(p)]}/momentum_buffer"] = buf.numpy().copy()
        for k, v in self.memory.state_dict().items():
            arrays[f"memory/{k}"] = np.asarray(v)
        cfg_dict = self.cfg.to_dict()
        arrays["meta/step"] = np.array(self.step, dtype=np.int64)
        arrays["meta/config"] = np.array(json.dumps(cfg_dict, sort_keys=True))
        arrays["meta/config_hash"] = np.array(config_hash(cfg_dict))
        arrays["meta/num_identities"] = np.array(self.memory.num_identities, dtype=np.int64)
        return arrays

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            np.savez(fh, **self.state_arrays())

    def load_arrays(self, arrays) -> None:
        stored = str(arrays["meta/config_hash"])
        if config_hash(json.loads(str(arrays["meta/config"]))) != stored:
            raise CheckpointMismatchError("checkpoint config does not match its stored hash")
        if stored != self.cfg.hash():
            raise CheckpointMismatchError(f"checkpoint config hash {stored} != run config hash {self.cfg.hash()}")
        state = {k[len("model/"):]: torch.from_numpy(np.array(arrays[k])) for k in arrays if k.startswith("model/")}
        self.model.load_state_dict(state)
        params = dict(self.model.named_parameters())
        self.optimizer.state.clear()
        for k in arrays:
            if k.startswith("optim/"):
                name = k[len("optim/"): -len("/momentum_buffer")]
                self.optimizer.state[params[name]]["momentum_buffer"] = torch.from_numpy(np.array(arrays[k]))
        self.memory.load_state_dict({k[len("memory/"):]: arrays[k] for k in arrays if k.startswith("memory/")})
        self.step = int(arrays["meta/step"])

    @classmethod
    def from_checkpoint(cls, path, train_scenes: Sequence[SceneImage] = (), cfg: Optional[Config] = None) -> "Trainer":
        with np.load(path) as z:
            arrays = {k: z[k] for k in z.files}
        stored_cfg = config_from_dict(json.loads(str(arrays["meta/config"])))
        trainer = cls(cfg or stored_cfg, train_scenes, int(arrays["meta/num_identities"]))
        trainer.load_arrays(arrays)
        return trainer

    # ------------------------------------------------------------------ inference

    @torch.no_grad()
    def image_maps(self, scene: SceneImage):
        """Test-transform one scene and return ``(maps, scale_x, scale_y, transformed)``."""
        t = test_transform(scene, self.cfg.data.profile)
        arr, _ = collate([t])
        maps = self.model.predict_maps(torch.from_numpy(arr))
        sx = t.valid_hw[1] / scene.valid_hw[1]
        sy = t.valid_hw[0] / scene.valid_hw[0]
        return {k: {kk: (vv[0] if isinstance(vv, np.ndarray) else vv) for kk, vv in lv.items()} for k, lv in maps.items()}, sx, sy, t

    def detect(self, maps, t: SceneImage, sx: float, sy: float):
        dets = decode_detections(maps, t.valid_hw, self.cfg.model.head)
        for d in dets:
            d.box = d.box.scaled(1 / sx, 1 / sy)
        return dets

    def query_embedding(self, maps, box: BoundingBox, sx: float, sy: float) -> np.ndarray:
        """Embedding at the centre-most cell of a query box, on the box's assigned level."""
        b = box.scaled(sx, sy)
        name = _level_of(b, self.cfg)
        lv = maps[name]
        loc = person_locations(lv["embed"].shape[-2:], lv["stride"], np.array([b.as_list()]), 0, 1,
                               self.cfg.model.head.center_radius)[0]
        e = lv["embed"][:, loc[0], loc[1]].astype(np.float64)
        return e / max(np.linalg.norm(e), 1e-12)

    def predict(self, manifest: DatasetManifest, scenes: dict[str, SceneImage]) -> Predictions:
        """Gallery detections computed once per image, plus query embeddings from ground-truth boxes."""
        preds = Predictions()
        cache = {}
        for rec in manifest.images:
            maps, sx, sy, t = self.image_maps(scenes[rec.file])
            cache[rec.file] = (maps, sx, sy)
            preds.detections[rec.file] = self.detect(maps, t, sx, sy)
        for q in manifest.queries:
            maps, sx, sy = cache[q.image]
            preds.query_embeddings[query_key(q)] = self.query_embedding(maps, BoundingBox(*q.bbox), sx, sy)
        return preds


# ---------------------------------------------------------------------- experiments


@dataclass
class RunResult:
    name: str
    seed: int
    recall: float
    ap: float
    mAP: float
    top1: float
    config_hash: str
    seconds: float
    final_loss: float

    def row(self) -> dict:
        return {
            "method": self.name, "seed": self.seed, "recall": self.recall, "ap": self.ap,
            "map": self.mAP, "top1": self.top1, "config_hash": self.config_hash, "seconds": round(self.seconds, 1),
        }


def synthetic_data(cfg: Config):
    train = generate_synthetic(cfg.data.synthetic, cfg.data.n_train, cfg.data.seed, "train")
    test = generate_synthetic(cfg.data.synthetic, cfg.data.n_test, cfg.data.seed, "test", cfg.eval.gallery_size)
    return train, test


def train_and_evaluate(cfg: Config, name: str = "run", data=None, log_path=None) -> RunResult:
    t0 = time.time()
    train, test = data if data is not None else synthetic_data(cfg)
    trainer = Trainer(cfg, train.scenes(), train.manifest.labeled_identity_count)
    hist = trainer.fit(log_path=log_path)
    preds = trainer.predict(test.manifest, test.images)
    recall, ap = evaluate_detection(test.manifest, preds, cfg.eval.iou_thresh)
    mAP, top1, _ = evaluate_search(test.manifest, preds, iou_thresh=cfg.eval.iou_thresh)
    return RunResult(name, cfg.train.seed, recall, ap, mAP, top1, cfg.hash(), time.time() - t0,
                     hist[-1]["loss"] if hist else float("nan"))


_REGION_ROWS = [(0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 0), (1, 0, 1), (0, 1, 1), (1, 1, 1)]


def ablation_variants(preset: str) -> list[tuple[str, dict]]:
    """``(row name, dotted overrides)`` for each row of an ablation table."""
    if preset == "scale":
        return [
            ("P3", {"model.afa.output_levels": "P3_only"}),
            ("P4", {"model.afa.output_levels": "P4_only"}),
            ("P5", {"model.afa.output_levels": "P5_only"}),
            ("P3, P4", {"model.afa.output_levels": "P3P4"}),
            ("P3, P4, P5", {"model.afa.output_levels": "P3P4P5"}),
        ]
    if preset == "region":
        rows = []
        for lat, outp, cat in _REGION_ROWS:
            label = f"lateral={'dconv' if lat else '-'} output={'dconv' if outp else '-'} concat={'yes' if cat else '-'}"
            rows.append((label, {
                "model.afa.lateral_kind": "deform_3x3" if lat else "plain_1x1",
                "model.afa.output_kind": "deform_3x3" if outp else "plain_3x3",
                "model.afa.fusion": "concat" if cat else "sum",
            }))
        return rows
    if preset == "task":
        return [(n.upper() if n != "alignps" else "AlignPS", {"model.task": n}) for n in ("t1", "t2", "t3", "alignps")]
    if preset == "loss":
        return [
            ("OIM", {"reid.use_triplet": False}),
            ("TOIM w/o LUT", {"reid.use_triplet": True, "reid.use_lut_in_triplet": False}),
            ("TOIM w/ LUT", {"reid.use_triplet": True, "reid.use_lut_in_triplet": True}),
        ]
    if preset == "dcn":
        return [
            ("none", {"model.backbone.deformable_stages": []}),
            ("res3", {"model.backbone.deformable_stages": ["res3"]}),
            ("res3 & res4", {"model.backbone.deformable_stages": ["res3", "res4"]}),
            ("res3 & res4 & res5", {"model.backbone.deformable_stages": ["res3", "res4", "res5"]}),
        ]
    if preset == "baseline":
        return [
            ("baseline", {
                "model.afa.lateral_kind": "plain_1x1", "model.afa.fusion": "sum",
                "model.afa.output_kind": "plain_3x3", "model.task": "t1",
            }),
            ("AlignPS", {}),
        ]
    raise KeyError(f"unknown ablation preset {preset!r}; choose from {', '.join(ABLATION_PRESETS)}")


ABLATION_PRESETS = ("scale", "region", "task", "loss", "dcn", "baseline")
TABLE_COLUMNS = ["method", "seed", "recall", "ap", "map", "top1", "config_hash", "seconds"]


def variant_config(cfg: Config, overrides: dict) -> Config:
    d = cfg.to_dict()
    d["train"]["ablation_preset"] = None
    from .config import set_dotted

    for k, v in overrides.items():
        set_dotted(d, k, v)
    return config_from_dict(d)


def run_ablation(preset: str, cfg: Config, seeds: Sequence[int] = (0,), out_csv=None, data=None,
                 cache: Optional[dict] = None, progress: Optional[Callable[[RunResult], None]] = None) -> list[RunResult]:
    """Train and evaluate every row of ``preset`` for each seed on one synthetic split.

    ``cache`` (config hash -> RunResult) lets presets share identical runs.
    """
    variants = ablation_variants(preset)
    data = data if data is not None else synthetic_data(cfg)
    results = []
    for name, overrides in variants:
        for seed in seeds:
            vcfg = variant_config(cfg, {**overrides, "train.seed": seed})
            key = vcfg.hash()
            if cache is not None and key in cache:
                r = cache[key]
                r = RunResult(name, seed, r.recall, r.ap, r.mAP, r.top1, key, r.seconds, r.final_loss)
            else:
                r = train_and_evaluate(vcfg, name, data)
                if cache is not None:
                    cache[key] = r
            results.append(r)
            if progress:
                progress(r)
    if out_csv is not None:
        write_csv(out_csv, [r.row() for r in results], TABLE_COLUMNS)
    return results


def median_by_method(results: Sequence[RunResult]) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, list]] = {}
    for r in results:
        d = out.setdefault(r.name, {"recall": [], "ap": [], "map": [], "top1": []})
        d["recall"].append(r.recall)
        d["ap"].append(r.ap)
        d["map"].append(r.mAP)
        d["top1"].append(r.top1)
    return {k: {m: float(np.median(v)) for m, v in d.items()} for k, d in out.items()}
