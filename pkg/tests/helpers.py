"""Shared reference implementations for the test suite."""
from __future__ import annotations

import itertools

import numpy as np
import torch

from alignps.core import BoundingBox, Detection, iou


def numerical_grad(fn, tensors, eps=1e-6):
    """Central finite differences of scalar ``fn()`` with respect to each tensor (float64, in place)."""
    grads = []
    for t in tensors:
        g = torch.zeros_like(t)
        flat = t.data.view(-1)
        gflat = g.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + eps
            fp = float(fn())
            flat[i] = old - eps
            fm = float(fn())
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def analytic_grad(fn, tensors):
    for t in tensors:
        t.grad = None
    out = fn()
    out.backward()
    return [t.grad.clone() if t.grad is not None else torch.zeros_like(t) for t in tensors]


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    num = float((a - b).norm())
    den = max(float(a.norm()), float(b.norm()), 1e-8)
    return num / den


def grad_rel_error(fn, tensors, eps=1e-6) -> float:
    """Largest relative error between autograd and finite-difference gradients over ``tensors``."""
    ga = analytic_grad(fn, tensors)
    with torch.no_grad():
        gn = numerical_grad(fn, tensors, eps)
    return max(relative_error(a, n) for a, n in zip(ga, gn))


def fractional_offsets(rng: np.random.Generator, shape, scale=1.5, margin=0.1) -> np.ndarray:
    """Offsets whose fractional parts stay ``margin`` away from integers (away from bilinear kinks)."""
    whole = rng.integers(-int(scale) - 1, int(scale) + 1, size=shape)
    frac = rng.uniform(margin, 1 - margin, size=shape)
    return whole + frac


def brute_force_nms(boxes: np.ndarray, scores: np.ndarray, thresh: float) -> list[int]:
    """Greedy NMS by repeated scan over all remaining candidates."""
    def iou(a, b):
        iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
        ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
        inter = iw * ih
        union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
        return inter / union if union > 0 else 0.0

    remaining = list(range(len(boxes)))
    keep = []
    while remaining:
        best = remaining[0]
        for i in remaining:
            if scores[i] > scores[best] or (scores[i] == scores[best] and i < best):
                best = i
        keep.append(best)
        remaining = [i for i in remaining if i != best and iou(boxes[i], boxes[best]) <= thresh]
    return keep


def random_boxes(rng: np.random.Generator, n: int, size: float = 50.0) -> np.ndarray:
    x1 = rng.uniform(0, size, n)
    y1 = rng.uniform(0, size, n)
    w = rng.uniform(2, size / 2, n)
    h = rng.uniform(2, size / 2, n)
    return np.stack([x1, y1, x1 + w, y1 + h], axis=1)


def unit_vector(rng: np.random.Generator, d: int = 4) -> np.ndarray:
    v = rng.normal(size=d)
    return v / np.linalg.norm(v)


def random_search_instance(rng: np.random.Generator, max_images: int = 4, max_dets: int = 3):
    """Query embedding, gallery names, detections and ground truth with near-duplicate boxes mixed in."""
    gallery = [f"g{i}" for i in range(int(rng.integers(1, max_images + 1)))]
    dets, gts = {}, {}
    for img in gallery:
        n = int(rng.integers(0, max_dets + 1))
        boxes = random_boxes(rng, n, 40)
        dets[img] = [Detection(BoundingBox(*b), 0.9, 0.9, unit_vector(rng)) for b in boxes]
        g = []
        for _ in range(int(rng.integers(0, 3))):
            if n and rng.uniform() < 0.7:
                b = boxes[int(rng.integers(n))] + rng.uniform(-2, 2, 4) * [1, 1, 0, 0]
                g.append(BoundingBox(b[0], b[1], max(b[2], b[0] + 1), max(b[3], b[1] + 1)))
            else:
                g.append(BoundingBox(*random_boxes(rng, 1, 40)[0]))
        gts[img] = g
    return unit_vector(rng), gallery, dets, gts


def search_oracle(q, gallery, dets, gts, thresh=0.5):
    """Rank everything, then resolve each ground-truth box to its best-ranked overlapping detection."""
    items = [(float(d.embedding @ q), img, k, d) for img in gallery for k, d in enumerate(dets.get(img, []))]
    items.sort(key=lambda t: -t[0])
    correct = set()
    for img in gallery:
        for g in gts.get(img, []):
            for sim, im, k, d in sorted([t for t in items if t[1] == img], key=lambda t: -t[0]):
                if iou(d.box, g) >= thresh and (im, k) not in correct:
                    correct.add((im, k))
                    break
    flags = [(t[1], t[2]) in correct for t in items]
    num_gt = sum(len(gts.get(img, [])) for img in gallery)
    hits, ap = 0, 0.0
    for r, f in enumerate(flags, 1):
        if f:
            hits += 1
            ap += hits / r
    return (ap / num_gt if num_gt else float("nan")), (flags[0] if flags else False)


def detection_oracle(dets, gts, thresh=0.5):
    flat = sorted(((s, img, b) for img, lst in dets.items() for b, s in lst), key=lambda t: -t[0])
    used = {img: [False] * len(g) for img, g in gts.items()}
    tp = []
    for s, img, b in flat:
        best, best_iou = -1, -1.0
        for j, g in enumerate(gts.get(img, [])):
            v = iou(b, g)
            if not used[img][j] and v > best_iou:
                best, best_iou = j, v
        if best >= 0 and best_iou >= thresh:
            used[img][best] = True
            tp.append(1)
        else:
            tp.append(0)
    total = sum(len(g) for g in gts.values())
    prec, rec = [], []
    hits = 0
    for k, t in enumerate(tp, 1):
        hits += t
        prec.append(hits / k)
        rec.append(hits / total)
    ap, prev_r = 0.0, 0.0
    for k in range(len(tp)):
        if rec[k] > prev_r:
            ap += (rec[k] - prev_r) * max(prec[k:])
            prev_r = rec[k]
    return (rec[-1] if rec else 0.0), ap


def triplet_oracle(features, labels, margin, lut=None):
    """Enumerate every (anchor, positive, negative) triple and take the batch-hard one per anchor."""
    pool = [f for f in features]
    pool_labels = list(labels)
    if lut is not None:
        for i in sorted(set(labels)):
            pool.append(lut[i])
            pool_labels.append(i)
    total = 0.0
    for a in range(len(pool)):
        pos = [np.linalg.norm(pool[a] - pool[p]) for p in range(len(pool)) if p != a and pool_labels[p] == pool_labels[a]]
        neg = [np.linalg.norm(pool[a] - pool[n]) for n in range(len(pool)) if pool_labels[n] != pool_labels[a]]
        if not pos or not neg:
            continue
        total += max(max(0.0, margin + dp - dn) for dp, dn in itertools.product(pos, neg))
    return total
