"""Bilinear sampling and 3x3 deformable convolution (v1, one offset group).

Offsets are laid out as ``(N, 2*K*K, H, W)`` with channel ``2*k`` holding the
x displacement and ``2*k + 1`` the y displacement of tap ``k``, taps enumerated
row-major over the kernel window. Sampling outside the feature map reads zero
on a per-neighbour basis, so the operator is piecewise-bilinear everywhere.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class ConfigurationError(ValueError):
    """Raised when layer or tensor shapes are inconsistent."""


def bilinear_sample(fm: torch.Tensor, x, y) -> torch.Tensor:
    """Sample a ``(C, H, W)`` map at continuous ``(x, y)``; returns a ``(C,)`` vector.

    ``x`` and ``y`` may be python floats or 0-d tensors (gradients flow to both
    the map and the coordinates).
    """
    C, H, W = fm.shape
    x = torch.as_tensor(x, dtype=fm.dtype)
    y = torch.as_tensor(y, dtype=fm.dtype)
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    fx = x - x0
    fy = y - y0
    out = fm.new_zeros(C)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            xi = int(x0.item()) + dx
            yi = int(y0.item()) + dy
            if 0 <= xi < W and 0 <= yi < H:
                out = out + wy * wx * fm[:, yi, xi]
    return out


def _sample_columns(inp: torch.Tensor, px: torch.Tensor, py: torch.Tensor) -> torch.Tensor:
    """Gather bilinear samples for every position in ``px``/``py`` of shape ``(N, P)``.

    Returns ``(N, C, P)``.
    """
    N, C, H, W = inp.shape
    flat = inp.reshape(N, C, H * W)
    x0 = torch.floor(px)
    y0 = torch.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.long()
    y0 = y0.long()
    out = None
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            idx = (yi.clamp(0, H - 1) * W + xi.clamp(0, W - 1))
            vals = torch.gather(flat, 2, idx.unsqueeze(1).expand(N, C, idx.shape[1]))
            w = (wy * wx * valid.to(inp.dtype)).unsqueeze(1)
            term = vals * w
            out = term if out is None else out + term
    return out


def deform_conv2d(
    inp: torch.Tensor,
    weight: torch.Tensor,
    offset: torch.Tensor,
    bias: torch.Tensor | None = None,
) -> torch.Tensor:
    """Stride-1, padding-1 deformable 3x3 convolution.

    ``inp`` is ``(N, C_in, H, W)``, ``weight`` ``(C_out, C_in, 3, 3)``, ``offset``
    ``(N, 18, H, W)``. Output has the same spatial size as the input.
    """
    if inp.dim() != 4 or weight.dim() != 4 or offset.dim() != 4:
        raise ConfigurationError("deform_conv2d expects 4-d input, weight and offset")
    N, C, H, W = inp.shape
    Co, Ci, kh, kw = weight.shape
    if (kh, kw) != (3, 3):
        raise ConfigurationError(f"kernel must be 3x3, got {kh}x{kw}")
    if Ci != C:
        raise ConfigurationError(f"weight expects {Ci} input channels, input has {C}")
    if offset.shape != (N, 2 * kh * kw, H, W):
        raise ConfigurationError(
            f"offset shape {tuple(offset.shape)} != {(N, 2 * kh * kw, H, W)}"
        )
    K = kh * kw
    ky, kx = torch.meshgrid(
        torch.arange(kh, dtype=inp.dtype) - 1, torch.arange(kw, dtype=inp.dtype) - 1, indexing="ij"
    )
    gy, gx = torch.meshgrid(
        torch.arange(H, dtype=inp.dtype), torch.arange(W, dtype=inp.dtype), indexing="ij"
    )
    off = offset.reshape(N, K, 2, H, W)
    px = gx + kx.reshape(K, 1, 1) + off[:, :, 0]
    py = gy + ky.reshape(K, 1, 1) + off[:, :, 1]
    cols = _sample_columns(inp, px.reshape(N, -1), py.reshape(N, -1))
    cols = cols.reshape(N, C * K, H * W)
    out = torch.matmul(weight.reshape(Co, C * K), cols).reshape(N, Co, H, W)
    if bias is not None:
        out = out + bias.reshape(1, Co, 1, 1)
    return out


def _torchvision_deform_conv2d(inp, weight, offset, bias=None):
    from torchvision.ops import deform_conv2d as tv_deform

    N, _, H, W = offset.shape
    # torchvision orders each tap as (dy, dx)
    swapped = offset.reshape(N, -1, 2, H, W).flip(2).reshape(N, -1, H, W)
    return tv_deform(inp, swapped, weight, bias, padding=1)


class DeformConv2d(nn.Module):
    """3x3 deformable conv whose offsets come from a zero-initialised plain 3x3 conv.

    At initialisation the layer therefore equals a standard 3x3 convolution.
    """

    def __init__(self, in_channels: int, out_channels: int, bias: bool = True, impl: str = "native"):
        super().__init__()
        if impl not in ("native", "torchvision"):
            raise ConfigurationError(f"unknown deformable conv impl {impl!r}")
        self.impl = impl
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, 3, 3))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        self.offset_conv = nn.Conv2d(in_channels, 18, 3, padding=1)
        nn.init.zeros_(self.offset_conv.weight)
        nn.init.zeros_(self.offset_conv.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        offset = self.offset_conv(x)
        fn = deform_conv2d if self.impl == "native" else _torchvision_deform_conv2d
        return fn(x, self.weight, offset, self.bias)

    def as_plain_conv(self) -> nn.Conv2d:
        """A standard conv sharing this layer's weights (zero-offset equivalent)."""
        conv = nn.Conv2d(self.weight.shape[1], self.weight.shape[0], 3, padding=1, bias=self.bias is not None)
        with torch.no_grad():
            conv.weight.copy_(self.weight)
            if self.bias is not None:
                conv.bias.copy_(self.bias)
        return conv


def conv3x3(in_channels: int, out_channels: int, deformable: bool = False, bias: bool = True) -> nn.Module:
    if deformable:
        return DeformConv2d(in_channels, out_channels, bias=bias)
    return nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=bias)


def plain_conv_reference(inp, weight, bias=None):
    return F.conv2d(inp, weight, bias, padding=1)
