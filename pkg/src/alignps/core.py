"""Geometry and annotation primitives."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box {vals}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def as_list(self) -> list[float]:
        return [float(self.x1), float(self.y1), float(self.x2), float(self.y2)]

    def scaled(self, sx: float, sy: Optional[float] = None) -> "BoundingBox":
        sy = sx if sy is None else sy
        return BoundingBox(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)

    def clipped(self, width: float, height: float) -> "BoundingBox":
        return BoundingBox(
            min(max(self.x1, 0.0), width),
            min(max(self.y1, 0.0), height),
            min(max(self.x2, 0.0), width),
            min(max(self.y2, 0.0), height),
        )

    @classmethod
    def from_array(cls, arr) -> "BoundingBox":
        x1, y1, x2, y2 = (float(v) for v in arr)
        return cls(x1, y1, x2, y2)


def xyxy_to_cxcywh(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    cx = 0.5 * (boxes[..., 0] + boxes[..., 2])
    cy = 0.5 * (boxes[..., 1] + boxes[..., 3])
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    return np.stack([cx, cy, w, h], axis=-1)


def cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    cx, cy, w, h = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


@dataclass(frozen=True)
class PersonAnnotation:
    """A ground-truth person. ``identity`` is a labeled index or ``None`` (unlabeled)."""

    box: BoundingBox
    identity: Optional[int] = None

    def __post_init__(self):
        if self.identity is not None and int(self.identity) < 0:
            raise ValueError(f"labeled identity must be >= 0, got {self.identity}")

    @property
    def labeled(self) -> bool:
        return self.identity is not None


@dataclass(frozen=True)
class SceneImage:
    """An RGB scene with its person annotations.

    ``valid_hw`` is the (height, width) of the region holding real pixels; the
    remainder of ``pixels`` (if any) is zero padding.
    """

    pixels: np.ndarray
    image_id: str
    annotations: tuple[PersonAnnotation, ...] = ()
    valid_hw: Optional[tuple[int, int]] = None

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"pixels must be HxWx3, got {self.pixels.shape}")
        if self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        object.__setattr__(self, "annotations", tuple(self.annotations))
        if self.valid_hw is None:
            object.__setattr__(self, "valid_hw", (self.height, self.width))

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])


@dataclass
class Detection:
    box: BoundingBox
    cls_score: float
    centerness: float
    embedding: np.ndarray
    final_score: float = field(default=float("nan"))
    level: int = 0

    def __post_init__(self):
        if math.isnan(self.final_score):
            self.final_score = float(self.cls_score) * float(self.centerness)
        norm = float(np.linalg.norm(self.embedding))
        if abs(norm - 1.0) > 1e-5:
            raise ValueError(f"embedding must be unit-norm, got norm {norm}")


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``(N, 4)`` and ``(M, 4)`` corner-format boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> np.ndarray:
    """Greedy NMS; returns kept indices ordered by descending score."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    keep = []
    suppressed = np.zeros(len(order), dtype=bool)
    ious = iou_matrix(boxes, boxes)
    for pos, i in enumerate(order):
        if suppressed[pos]:
            continue
        keep.append(i)
        rest = order[pos + 1:]
        suppressed[pos + 1:] |= ious[i, rest] > iou_thresh
    return np.asarray(keep, dtype=np.int64)


def nms(dets: Sequence[Detection], iou_thresh: float) -> list[Detection]:
    if not dets:
        return []
    boxes = np.stack([d.box.as_array() for d in dets])
    scores = np.array([d.final_score for d in dets])
    return [dets[i] for i in nms_indices(boxes, scores, iou_thresh)]


def resize_with_boxes(img: SceneImage, target_long_side: int) -> SceneImage:
    """Resize so the longer side equals ``target_long_side``, keeping aspect ratio."""
    if target_long_side < 1:
        raise ValueError("target_long_side must be >= 1")
    h, w = img.valid_hw
    long_side = max(h, w)
    if long_side == target_long_side and (h, w) == (img.height, img.width):
        return img
    scale = target_long_side / long_side
    new_h = max(1, int(round(h * scale)))
    new_w = max(1, int(round(w * scale)))
    return resize_to(img, new_h, new_w)


def resize_to(img: SceneImage, new_h: int, new_w: int) -> SceneImage:
    """Resize the valid region to exactly ``new_h x new_w``; boxes follow per-axis scale."""
    from PIL import Image

    h, w = img.valid_hw
    src = img.pixels[:h, :w]
    if (new_h, new_w) == (h, w):
        pixels = np.ascontiguousarray(src)
    else:
        channels = [
            np.asarray(Image.fromarray(src[:, :, c].astype(np.float32), mode="F").resize((new_w, new_h), Image.BILINEAR))
            for c in range(3)
        ]
        pixels = np.clip(np.stack(channels, axis=-1), 0.0, 1.0).astype(np.float32)
    sx, sy = new_w / w, new_h / h
    anns = tuple(
        PersonAnnotation(a.box.scaled(sx, sy).clipped(new_w, new_h), a.identity) for a in img.annotations
    )
    return SceneImage(pixels, img.image_id, anns, (new_h, new_w))


def fit_within(img: SceneImage, max_w: int, max_h: int) -> SceneImage:
    """Aspect-preserving resize to the largest size fitting within ``max_w x max_h``."""
    h, w = img.valid_hw
    scale = min(max_w / w, max_h / h)
    return resize_to(img, max(1, int(round(h * scale))), max(1, int(round(w * scale))))


def hflip(img: SceneImage) -> SceneImage:
    h, w = img.valid_hw
    pixels = img.pixels.copy()
    pixels[:h, :w] = img.pixels[:h, :w][:, ::-1]
    anns = tuple(
        PersonAnnotation(BoundingBox(w - a.box.x2, a.box.y1, w - a.box.x1, a.box.y2), a.identity)
        for a in img.annotations
    )
    return SceneImage(pixels, img.image_id, anns, img.valid_hw)


def pad_to(img: SceneImage, height: int, width: int) -> SceneImage:
    """Zero-pad bottom/right to ``height x width``; ``valid_hw`` records the real region."""
    if height < img.height or width < img.width:
        raise ValueError("pad target smaller than image")
    if (height, width) == (img.height, img.width):
        return img
    pixels = np.zeros((height, width, 3), dtype=img.pixels.dtype)
    pixels[: img.height, : img.width] = img.pixels
    return replace(img, pixels=pixels)
