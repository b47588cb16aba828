"""FCOS-style detection head, centre-sampled target assignment, losses and decoding."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import BoundingBox, Detection, nms_indices

PRIOR_PROB = 0.01


@dataclass
class HeadConfig:
    num_convs: int = 4
    center_radius: float = 1.5
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    ctr_weighted_reg: bool = True
    score_thresh: float = 0.05
    nms_thresh: float = 0.5
    max_detections: int = 100
    pre_nms_topk: int = 1000


def _tower(d: int, n: int) -> nn.Sequential:
    layers = []
    for _ in range(n):
        layers += [nn.Conv2d(d, d, 3, padding=1), nn.GroupNorm(min(32, d), d), nn.ReLU(inplace=True)]
    return nn.Sequential(*layers)


class DetectionHead(nn.Module):
    """Two four-conv towers of width D.

    The regression tower feeds box regression (4 channels, mapped through
    ``stride * exp(scale * x)``) and centerness; the classification tower feeds
    the person/background logit.
    """

    def __init__(self, d: int, levels: Sequence[str], cfg: HeadConfig = HeadConfig(), prior_bias: bool = True):
        super().__init__()
        self.cfg = cfg
        self.reg_tower = _tower(d, cfg.num_convs)
        self.cls_tower = _tower(d, cfg.num_convs)
        self.bbox_pred = nn.Conv2d(d, 4, 3, padding=1)
        self.ctr_pred = nn.Conv2d(d, 1, 3, padding=1)
        self.cls_pred = nn.Conv2d(d, 1, 3, padding=1)
        self.scales = nn.ParameterDict({lv: nn.Parameter(torch.ones(1)) for lv in levels})
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, std=0.01)
                nn.init.zeros_(m.bias)
        if prior_bias:
            nn.init.constant_(self.cls_pred.bias, -math.log((1 - PRIOR_PROB) / PRIOR_PROB))

    def forward(self, x: torch.Tensor, level: str, stride: int) -> dict[str, torch.Tensor]:
        reg_feat = self.reg_tower(x)
        cls_feat = self.cls_tower(x)
        raw = (self.scales[level] * self.bbox_pred(reg_feat)).clamp(max=12.0)
        return {
            "cls_logits": self.cls_pred(cls_feat),
            "ctr_logits": self.ctr_pred(reg_feat),
            "bbox_reg": stride * torch.exp(raw),
            "reg_feat": reg_feat,
            "cls_feat": cls_feat,
        }


def head_forward(p3: torch.Tensor, head: DetectionHead, level: str = "P3", stride: int = 8):
    out = head(p3, level, stride)
    return out["cls_logits"], out["ctr_logits"], out["bbox_reg"]


def grid_locations(h: int, w: int, stride: int) -> np.ndarray:
    """Image-space centres ``(s/2 + j*s, s/2 + i*s)`` of an ``h x w`` grid, row-major ``(h*w, 2)`` as (x, y)."""
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([stride / 2 + xs.ravel() * stride, stride / 2 + ys.ravel() * stride], axis=1).astype(np.float64)


@dataclass
class LocationTargets:
    labels: np.ndarray        # (P,) 1 person / 0 background
    gt_index: np.ndarray      # (P,) assigned annotation index or -1
    reg: np.ndarray           # (P, 4) l, t, r, b; zero for background
    centerness: np.ndarray    # (P,) zero for background
    valid: np.ndarray         # (P,) False for locations in padding


def centerness_target(reg: np.ndarray) -> np.ndarray:
    reg = np.asarray(reg, dtype=np.float64)
    l, t, r, b = reg[..., 0], reg[..., 1], reg[..., 2], reg[..., 3]
    return np.sqrt((np.minimum(l, r) / np.maximum(l, r)) * (np.minimum(t, b) / np.maximum(t, b)))


def assign_targets(
    locations: np.ndarray,
    boxes: np.ndarray,
    stride: float,
    radius: float,
    eligible: Optional[np.ndarray] = None,
    valid_hw: Optional[tuple[int, int]] = None,
) -> LocationTargets:
    """Centre-sampled assignment of grid locations to ground-truth boxes.

    A location is positive for a box when it lies strictly inside the box and
    within ``radius * stride`` (Chebyshev) of the box centre. Overlaps go to
    the smaller box. ``eligible`` masks boxes handled by this level.
    """
    locations = np.asarray(locations, dtype=np.float64).reshape(-1, 2)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    P = len(locations)
    valid = np.ones(P, dtype=bool)
    if valid_hw is not None:
        valid = (locations[:, 0] < valid_hw[1]) & (locations[:, 1] < valid_hw[0])
    labels = np.zeros(P, dtype=np.int64)
    gt_index = np.full(P, -1, dtype=np.int64)
    reg = np.zeros((P, 4), dtype=np.float64)
    ctr = np.zeros(P, dtype=np.float64)
    if len(boxes) == 0:
        return LocationTargets(labels, gt_index, reg, ctr, valid)
    x = locations[:, 0:1]
    y = locations[:, 1:2]
    l = x - boxes[None, :, 0]
    t = y - boxes[None, :, 1]
    r = boxes[None, :, 2] - x
    b = boxes[None, :, 3] - y
    ltrb = np.stack([l, t, r, b], axis=-1)  # (P, G, 4)
    inside = ltrb.min(axis=-1) > 0
    cx = 0.5 * (boxes[:, 0] + boxes[:, 2])
    cy = 0.5 * (boxes[:, 1] + boxes[:, 3])
    cheb = np.maximum(np.abs(x - cx[None]), np.abs(y - cy[None]))
    near = cheb < radius * stride
    ok = inside & near & valid[:, None]
    if eligible is not None:
        ok &= np.asarray(eligible, dtype=bool)[None, :]
    area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    cost = np.where(ok, area[None, :], np.inf)
    best = np.argmin(cost, axis=1)
    pos = np.isfinite(cost[np.arange(P), best])
    labels[pos] = 1
    gt_index[pos] = best[pos]
    reg[pos] = ltrb[np.arange(P), best][pos]
    ctr[pos] = centerness_target(reg[pos])
    return LocationTargets(labels, gt_index, reg, ctr, valid)


def sigmoid_focal_loss(logits: torch.Tensor, targets: torch.Tensor, alpha: float, gamma: float) -> torch.Tensor:
    """Elementwise focal loss on logits."""
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    a_t = alpha * targets + (1 - alpha) * (1 - targets)
    return a_t * (1 - p_t) ** gamma * ce


def giou_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """``1 - GIoU`` between ``(N, 4)`` l,t,r,b distance boxes sharing an anchor point."""
    pl, pt, pr, pb = pred.unbind(-1)
    tl, tt, tr, tb = target.unbind(-1)
    pred_area = (pl + pr) * (pt + pb)
    tgt_area = (tl + tr) * (tt + tb)
    wi = torch.min(pl, tl) + torch.min(pr, tr)
    hi = torch.min(pt, tt) + torch.min(pb, tb)
    inter = wi.clamp(min=0) * hi.clamp(min=0)
    union = pred_area + tgt_area - inter
    wc = torch.max(pl, tl) + torch.max(pr, tr)
    hc = torch.max(pt, tt) + torch.max(pb, tb)
    enclose = wc * hc
    giou = inter / union - (enclose - union) / enclose
    return 1 - giou


def _binary_entropy(t: torch.Tensor) -> torch.Tensor:
    return -(torch.xlogy(t, t) + torch.xlogy(1 - t, 1 - t))


def detection_loss(
    cls_logits: torch.Tensor,
    ctr_logits: torch.Tensor,
    bbox_reg: torch.Tensor,
    labels: torch.Tensor,
    reg_targets: torch.Tensor,
    ctr_targets: torch.Tensor,
    valid: torch.Tensor,
    cfg: HeadConfig = HeadConfig(),
) -> dict[str, torch.Tensor]:
    """Losses over flattened locations.

    ``cls_logits``/``ctr_logits``/``labels``/``ctr_targets``/``valid`` are ``(M,)``,
    ``bbox_reg``/``reg_targets`` ``(M, 4)``. The centerness term is binary
    cross-entropy minus the target entropy, so it vanishes at the optimum while
    keeping the BCE gradient.
    """
    valid = valid.bool()
    labels_f = labels.to(cls_logits.dtype)
    pos = (labels > 0) & valid
    num_pos = max(int(pos.sum()), 1)
    cls = sigmoid_focal_loss(cls_logits[valid], labels_f[valid], cfg.focal_alpha, cfg.focal_gamma).sum() / num_pos
    if int(pos.sum()) == 0:
        zero = bbox_reg.sum() * 0.0 + ctr_logits.sum() * 0.0
        return {"loss_cls": cls, "loss_reg": zero, "loss_ctr": zero}
    ct = ctr_targets[pos]
    g = giou_loss(bbox_reg[pos], reg_targets[pos])
    if cfg.ctr_weighted_reg:
        reg = (g * ct).sum() / ct.sum().clamp(min=1e-6)
    else:
        reg = g.mean()
    bce = F.binary_cross_entropy_with_logits(ctr_logits[pos], ct, reduction="none")
    ctr = (bce - _binary_entropy(ct)).mean()
    return {"loss_cls": cls, "loss_reg": reg, "loss_ctr": ctr}


def decode_level(
    cls_prob: np.ndarray,
    ctr_prob: np.ndarray,
    reg: np.ndarray,
    stride: int,
    score_thresh: float,
):
    """Candidate boxes from one level's ``(H, W)`` scores and ``(4, H, W)`` distances.

    Returns ``(flat_indices, boxes, cls_scores, centerness)`` for locations whose
    classification score exceeds ``score_thresh``.
    """
    h, w = cls_prob.shape
    locs = grid_locations(h, w, stride)
    cls_flat = cls_prob.reshape(-1)
    keep = np.nonzero(cls_flat > score_thresh)[0]
    d = reg.reshape(4, -1)[:, keep].T.astype(np.float64)
    pts = locs[keep]
    boxes = np.stack([pts[:, 0] - d[:, 0], pts[:, 1] - d[:, 1], pts[:, 0] + d[:, 2], pts[:, 1] + d[:, 3]], axis=1)
    return keep, boxes, cls_flat[keep].astype(np.float64), ctr_prob.reshape(-1)[keep].astype(np.float64)


def decode_detections(
    levels: dict[str, dict[str, np.ndarray]],
    image_hw: tuple[int, int],
    cfg: HeadConfig = HeadConfig(),
) -> list[Detection]:
    """Decode one image.

    ``levels`` maps level name to a dict with ``stride``, ``cls_prob (H, W)``,
    ``ctr_prob (H, W)``, ``reg (4, H, W)`` and ``embed (D, H, W)`` (unit-norm
    along D). Boxes are clipped to ``image_hw``; NMS runs across levels.
    """
    H, W = image_hw
    all_boxes, all_cls, all_ctr, all_emb, all_lvl = [], [], [], [], []
    for li, (name, lv) in enumerate(levels.items()):
        keep, boxes, cls_s, ctr_s = decode_level(lv["cls_prob"], lv["ctr_prob"], lv["reg"], lv["stride"], cfg.score_thresh)
        if len(keep) == 0:
            continue
        emb = lv["embed"].reshape(lv["embed"].shape[0], -1)[:, keep].T
        all_boxes.append(boxes)
        all_cls.append(cls_s)
        all_ctr.append(ctr_s)
        all_emb.append(emb)
        all_lvl.append(np.full(len(keep), li))
    if not all_boxes:
        return []
    boxes = np.concatenate(all_boxes)
    cls_s = np.concatenate(all_cls)
    ctr_s = np.concatenate(all_ctr)
    emb = np.concatenate(all_emb)
    lvl = np.concatenate(all_lvl)
    boxes[:, [0, 2]] = boxes[:, [0, 2]].clip(0, W)
    boxes[:, [1, 3]] = boxes[:, [1, 3]].clip(0, H)
    ok = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    boxes, cls_s, ctr_s, emb, lvl = boxes[ok], cls_s[ok], ctr_s[ok], emb[ok], lvl[ok]
    scores = cls_s * ctr_s
    if len(scores) > cfg.pre_nms_topk:
        top = np.argsort(-scores, kind="stable")[: cfg.pre_nms_topk]
        boxes, cls_s, ctr_s, emb, lvl, scores = boxes[top], cls_s[top], ctr_s[top], emb[top], lvl[top], scores[top]
    kept = nms_indices(boxes, scores, cfg.nms_thresh)[: cfg.max_detections]
    dets = []
    for i in kept:
        e = emb[i].astype(np.float64)
        e = e / max(np.linalg.norm(e), 1e-12)
        dets.append(Detection(BoundingBox.from_array(boxes[i]), float(cls_s[i]), float(ctr_s[i]), e, float(scores[i]), int(lvl[i])))
    return dets
