"""Aligned feature aggregation: top-down fusion of C3..C5 into stride-8 re-id/detection maps."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import BoundingBox
from .dconv import ConfigurationError, DeformConv2d

LEVELS = ("P3", "P4", "P5")
LEVEL_STRIDES = {"P3": 8, "P4": 16, "P5": 32}
LEVEL_PRESETS = {
    "P3_only": ("P3",),
    "P4_only": ("P4",),
    "P5_only": ("P5",),
    "P3P4": ("P3", "P4"),
    "P3P4P5": ("P3", "P4", "P5"),
}
# Regression-extent ranges per level for multi-level assignment, in pixels of
# the paper's 1500x900 test scale.
PAPER_SIZE_BOUNDS = (128.0, 256.0)


@dataclass
class AfaConfig:
    lateral_kind: str = "deform_3x3"
    fusion: str = "concat"
    output_kind: str = "deform_3x3"
    out_channels: int = 256
    output_levels: str = "P3_only"
    size_bounds: tuple[float, float] = PAPER_SIZE_BOUNDS
    lateral_relu: bool = True

    def __post_init__(self):
        if self.lateral_kind not in ("plain_1x1", "deform_3x3", "plain_3x3"):
            raise ConfigurationError(f"unknown lateral_kind {self.lateral_kind!r}")
        if self.fusion not in ("sum", "concat"):
            raise ConfigurationError(f"unknown fusion {self.fusion!r}")
        if self.output_kind not in ("plain_3x3", "deform_3x3"):
            raise ConfigurationError(f"unknown output_kind {self.output_kind!r}")
        if self.output_levels not in LEVEL_PRESETS:
            raise ConfigurationError(f"unknown output_levels {self.output_levels!r}")
        if int(self.out_channels) <= 0:
            raise ConfigurationError("out_channels must be positive")
        self.out_channels = int(self.out_channels)
        self.size_bounds = tuple(float(b) for b in self.size_bounds)
        if len(self.size_bounds) != 2 or not self.size_bounds[0] < self.size_bounds[1]:
            raise ConfigurationError(f"size_bounds must be increasing pair, got {self.size_bounds}")

    @property
    def levels(self) -> tuple[str, ...]:
        return LEVEL_PRESETS[self.output_levels]


def level_ranges(cfg: AfaConfig) -> dict[str, tuple[float, float]]:
    """Regression-extent range handled by each active level."""
    levels = cfg.levels
    if len(levels) == 1:
        return {levels[0]: (0.0, math.inf)}
    b1, b2 = cfg.size_bounds
    if levels == ("P3", "P4"):
        return {"P3": (0.0, b1), "P4": (b1, math.inf)}
    return {"P3": (0.0, b1), "P4": (b1, b2), "P5": (b2, math.inf)}


def assign_level(box: BoundingBox, cfg: AfaConfig) -> str:
    """Level of a person, from the largest regression target at its centre, max(w, h) / 2."""
    extent = max(box.width, box.height) / 2.0
    return assign_level_by_extent(extent, cfg)


def assign_level_by_extent(extent: float, cfg: AfaConfig) -> str:
    ranges = level_ranges(cfg)
    for name in cfg.levels:
        lo, hi = ranges[name]
        if lo <= extent <= hi:
            return name
    return cfg.levels[-1]


def _upsample_to(x: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    h, w = like.shape[-2:]
    hc, wc = x.shape[-2:]
    if not (0 <= 2 * hc - h <= 1 and 0 <= 2 * wc - w <= 1):
        raise ConfigurationError(
            f"levels not in 2x relation: coarse {hc}x{wc} vs fine {h}x{w}"
        )
    up = F.interpolate(x, scale_factor=2, mode="nearest")
    return up[:, :, :h, :w]


def _lateral(kind: str, cin: int, d: int) -> nn.Module:
    if kind == "plain_1x1":
        return nn.Conv2d(cin, d, 1)
    if kind == "plain_3x3":
        return nn.Conv2d(cin, d, 3, padding=1)
    return DeformConv2d(cin, d)


def _output(kind: str, cin: int, d: int) -> nn.Module:
    return nn.Conv2d(cin, d, 3, padding=1) if kind == "plain_3x3" else DeformConv2d(cin, d)


class AFA(nn.Module):
    """Top-down fusion of ``(C3, C4, C5)``.

    Sum fusion is the classic FPN recurrence on lateral-width inner maps. With
    concat fusion the map carried down is the previous level's D-channel output,
    so every fused map is 2D channels wide before its output layer.
    """

    def __init__(self, in_channels: tuple[int, int, int], cfg: AfaConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.out_channels
        lowest = min(LEVELS.index(lv) for lv in cfg.levels)
        self.built = LEVELS[lowest:]
        self.laterals = nn.ModuleDict()
        self.outputs = nn.ModuleDict()
        for name, cin in zip(LEVELS, in_channels):
            if name not in self.built:
                continue
            self.laterals[name] = _lateral(cfg.lateral_kind, cin, d)
            needs_output = name in cfg.levels or cfg.fusion == "concat"
            if needs_output:
                wide = cfg.fusion == "concat" and name != "P5"
                self.outputs[name] = _output(cfg.output_kind, 2 * d if wide else d, d)

    def forward(self, feats) -> dict[str, torch.Tensor]:
        by_level = dict(zip(LEVELS, feats))
        lat = {}
        for name in self.built:
            x = self.laterals[name](by_level[name])
            lat[name] = F.relu(x) if self.cfg.lateral_relu else x
        out = {}
        carry = None
        for name in reversed(self.built):
            if carry is None:
                fused = lat[name]
            elif self.cfg.fusion == "sum":
                fused = _upsample_to(carry, lat[name]) + lat[name]
            else:
                fused = torch.cat([_upsample_to(carry, lat[name]), lat[name]], dim=1)
            if self.cfg.fusion == "sum":
                carry = fused
                if name in self.cfg.levels:
                    out[name] = self.outputs[name](fused)
            else:
                carry = self.outputs[name](fused)
                if name in self.cfg.levels:
                    out[name] = carry
        return {name: out[name] for name in self.cfg.levels}


def aggregate(feats, afa: AFA) -> dict[str, torch.Tensor]:
    return afa(feats)
