"""Person-search and detection evaluation on serialized predictions."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .core import BoundingBox, Detection, iou_matrix
from .data import DatasetManifest, ManifestQuery, sample_gallery

log = logging.getLogger(__name__)

DEFAULT_GALLERY_SIZE = 100
IOU_THRESH = 0.5


@dataclass
class RankedEntry:
    image: str
    detection: Detection
    similarity: float
    correct: bool


@dataclass
class GalleryMatch:
    query_id: str
    entries: list[RankedEntry]
    num_gt: int


@dataclass
class Predictions:
    """Detections per image plus one embedding per query, as exchanged between model and evaluator."""

    detections: dict[str, list[Detection]] = field(default_factory=dict)
    query_embeddings: dict[str, np.ndarray] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "images": {
                f: [
                    {
                        "bbox": d.box.as_list(),
                        "cls_score": float(d.cls_score),
                        "centerness": float(d.centerness),
                        "final_score": float(d.final_score),
                        "embedding": [float(v) for v in d.embedding],
                    }
                    for d in dets
                ]
                for f, dets in self.detections.items()
            },
            "queries": {k: [float(v) for v in e] for k, e in self.query_embeddings.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Predictions":
        dets = {
            f: [
                Detection(BoundingBox(*x["bbox"]), x["cls_score"], x["centerness"], np.asarray(x["embedding"], dtype=np.float64), x["final_score"])
                for x in lst
            ]
            for f, lst in d["images"].items()
        }
        queries = {k: np.asarray(v, dtype=np.float64) for k, v in d.get("queries", {}).items()}
        return cls(dets, queries)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Predictions":
        return cls.from_dict(json.loads(Path(path).read_text()))


def query_key(q: ManifestQuery) -> str:
    return f"{q.image}|{','.join(repr(float(v)) for v in q.bbox)}"


def search(
    query_embedding: np.ndarray,
    gallery: Sequence[str],
    detections: Mapping[str, Sequence[Detection]],
    gt_boxes: Mapping[str, Sequence[BoundingBox]],
    query_id: str = "",
    iou_thresh: float = IOU_THRESH,
) -> GalleryMatch:
    """Rank every detection of the gallery images by cosine similarity to the query.

    ``gt_boxes[image]`` lists boxes of the query identity in that image. Per
    ground-truth box, only the highest-ranked detection overlapping it with
    IoU >= ``iou_thresh`` counts as correct.
    """
    q = np.asarray(query_embedding, dtype=np.float64)
    q = q / max(np.linalg.norm(q), 1e-12)
    entries: list[RankedEntry] = []
    num_gt = 0
    for image in gallery:
        dets = list(detections.get(image, []))
        gts = list(gt_boxes.get(image, []))
        num_gt += len(gts)
        if not dets:
            continue
        emb = np.stack([d.embedding for d in dets])
        sims = emb @ q
        correct = np.zeros(len(dets), dtype=bool)
        if gts:
            ious = iou_matrix(np.stack([d.box.as_array() for d in dets]), np.stack([g.as_array() for g in gts]))
            order = np.argsort(-sims, kind="stable")
            for g in range(len(gts)):
                for i in order:
                    if ious[i, g] >= iou_thresh and not correct[i]:
                        correct[i] = True
                        break
        entries.extend(RankedEntry(image, d, float(s), bool(c)) for d, s, c in zip(dets, sims, correct))
    entries.sort(key=lambda e: -e.similarity)
    return GalleryMatch(query_id, entries, num_gt)


def average_precision(match: GalleryMatch) -> float:
    """Mean of precision at each correct hit over all ground-truth instances (missed ones count zero)."""
    if match.num_gt == 0:
        return float("nan")
    hits = 0
    total = 0.0
    for rank, e in enumerate(match.entries, start=1):
        if e.correct:
            hits += 1
            total += hits / rank
    return total / match.num_gt


def person_search_map(matches: Iterable[GalleryMatch]) -> tuple[float, float]:
    aps, top1 = [], []
    for m in matches:
        if m.num_gt == 0:
            log.warning("query %s has no ground truth in its gallery; excluded", m.query_id)
            continue
        aps.append(average_precision(m))
        top1.append(bool(m.entries) and m.entries[0].correct)
    if not aps:
        return float("nan"), float("nan")
    return float(np.mean(aps)), float(np.mean(top1))


def detection_metrics(
    detections: Mapping[str, Sequence[tuple[BoundingBox, float]]],
    annotations: Mapping[str, Sequence[BoundingBox]],
    iou_thresh: float = IOU_THRESH,
) -> tuple[float, float]:
    """Recall and all-point AP for a single class.

    Detections across all images are processed by descending score; each
    takes the unmatched ground truth of its image with the highest IoU, if that
    IoU reaches ``iou_thresh``.
    """
    total_gt = sum(len(v) for v in annotations.values())
    flat = [(float(s), img, b) for img, dets in detections.items() for b, s in dets]
    flat.sort(key=lambda t: -t[0])
    matched = {img: np.zeros(len(g), dtype=bool) for img, g in annotations.items()}
    gt_arr = {img: np.stack([b.as_array() for b in g]) if len(g) else np.zeros((0, 4)) for img, g in annotations.items()}
    tp = np.zeros(len(flat))
    for k, (_, img, box) in enumerate(flat):
        gts = gt_arr.get(img)
        if gts is None or len(gts) == 0:
            continue
        ious = iou_matrix(box.as_array()[None], gts)[0]
        ious[matched[img]] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= iou_thresh:
            matched[img][j] = True
            tp[k] = 1
    if total_gt == 0:
        return float("nan"), float("nan")
    if not flat:
        return 0.0, 0.0
    ctp = np.cumsum(tp)
    recall = ctp / total_gt
    precision = ctp / np.arange(1, len(flat) + 1)
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    ap = float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))
    return float(recall[-1]), ap


def gt_boxes_for(manifest: DatasetManifest, identity: int) -> dict[str, list[BoundingBox]]:
    out: dict[str, list[BoundingBox]] = {}
    for rec in manifest.images:
        boxes = [BoundingBox(*p.bbox) for p in rec.persons if p.identity == identity]
        if boxes:
            out[rec.file] = boxes
    return out


def evaluate_search(
    manifest: DatasetManifest,
    preds: Predictions,
    gallery_size: Optional[int] = None,
    seed: int = 0,
    iou_thresh: float = IOU_THRESH,
) -> tuple[float, float, list[GalleryMatch]]:
    """mAP and top-1 over all manifest queries.

    With ``gallery_size`` None the manifest's own per-query galleries are used;
    otherwise galleries are resampled (nested in size) from the whole split.
    """
    pool = [rec.file for rec in manifest.images]
    matches = []
    gt_cache: dict[int, dict[str, list[BoundingBox]]] = {}
    for q in manifest.queries:
        gts = gt_cache.setdefault(q.identity, gt_boxes_for(manifest, q.identity))
        if gallery_size is None:
            gallery = list(q.gallery)
        else:
            gt_images = [f for f in gts if f != q.image]
            if gallery_size > len(pool) - 1:
                log.warning("gallery size %d exceeds pool of %d; capped", gallery_size, len(pool) - 1)
            gallery = sample_gallery(q.image, gt_images, pool, min(gallery_size, len(pool) - 1), seed)
        key = query_key(q)
        matches.append(search(preds.query_embeddings[key], gallery, preds.detections, {g: gts.get(g, []) for g in gallery}, key, iou_thresh))
    mAP, top1 = person_search_map(matches)
    return mAP, top1, matches


def evaluate_detection(manifest: DatasetManifest, preds: Predictions, iou_thresh: float = IOU_THRESH) -> tuple[float, float]:
    dets = {f: [(d.box, d.final_score) for d in preds.detections.get(f, [])] for f in (r.file for r in manifest.images)}
    gts = {rec.file: [BoundingBox(*p.bbox) for p in rec.persons] for rec in manifest.images}
    return detection_metrics(dets, gts, iou_thresh)


def gallery_sweep(
    manifest: DatasetManifest,
    preds: Predictions,
    sizes: Sequence[int],
    out_csv=None,
    chart=None,
    seed: int = 0,
) -> list[dict]:
    """mAP / top-1 for each gallery size; optionally writes ``gallery_size,map,top1`` CSV and a chart."""
    rows = []
    for size in sizes:
        mAP, top1, _ = evaluate_search(manifest, preds, int(size), seed)
        rows.append({"gallery_size": int(size), "map": mAP, "top1": top1})
    if out_csv is not None:
        write_csv(out_csv, rows, ["gallery_size", "map", "top1"])
    if chart is not None:
        plot_sweep(rows, chart)
    return rows


def write_csv(path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def plot_sweep(rows: Sequence[dict], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    sizes = [r["gallery_size"] for r in rows]
    ax.plot(sizes, [100 * r["map"] for r in rows], marker="o", label="mAP")
    ax.plot(sizes, [100 * r["top1"] for r in rows], marker="s", label="top-1")
    ax.set_xlabel("gallery size")
    ax.set_ylabel("%")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
