"""Multi-scale feature extraction: C3, C4, C5 at strides 8, 16, 32."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .dconv import ConfigurationError, DeformConv2d

STAGES = ("res3", "res4", "res5")
STRIDES = {"C3": 8, "C4": 16, "C5": 32}


@dataclass
class BackboneConfig:
    variant: str = "tiny"
    channels: tuple[int, int, int] = (32, 64, 128)
    deformable_stages: tuple[str, ...] = ()
    frozen_stages: tuple[str, ...] = ()

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.deformable_stages = tuple(self.deformable_stages)
        self.frozen_stages = tuple(self.frozen_stages)
        if self.variant not in ("tiny", "resnet50"):
            raise ConfigurationError(f"unknown backbone variant {self.variant!r}")
        if len(self.channels) != 3 or min(self.channels) < 1:
            raise ConfigurationError(f"channels must be three positive ints, got {self.channels}")
        for s in self.deformable_stages + self.frozen_stages:
            if s not in STAGES and s != "stem":
                raise ConfigurationError(f"unknown stage {s!r}")
        if self.variant == "resnet50" and self.channels != (512, 1024, 2048):
            raise ConfigurationError("resnet50 channels are fixed at (512, 1024, 2048)")


def _gn(c: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, c), c)


class _Stage(nn.Module):
    """Stride-2 downsampling conv followed by one residual 3x3 block."""

    def __init__(self, cin: int, cout: int, deformable: bool):
        super().__init__()
        self.down = nn.Sequential(nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False), _gn(cout), nn.ReLU(inplace=True))
        self.conv = DeformConv2d(cout, cout, bias=False) if deformable else nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.norm = _gn(cout)

    def forward(self, x):
        x = self.down(x)
        return F.relu(x + self.norm(self.conv(x)))


class TinyBackbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        c3, c4, c5 = cfg.channels
        c2 = max(8, c3 // 2)
        self.stem = nn.Sequential(nn.Conv2d(3, c2, 3, stride=2, padding=1, bias=False), _gn(c2), nn.ReLU(inplace=True))
        self.res2 = _Stage(c2, c2, False)
        self.res3 = _Stage(c2, c3, "res3" in cfg.deformable_stages)
        self.res4 = _Stage(c3, c4, "res4" in cfg.deformable_stages)
        self.res5 = _Stage(c4, c5, "res5" in cfg.deformable_stages)

    def forward(self, x):
        x = self.res2(self.stem(x))
        c3 = self.res3(x)
        c4 = self.res4(c3)
        c5 = self.res5(c4)
        return c3, c4, c5


class ResNet50Backbone(nn.Module):
    """Torchvision ResNet-50 trunk (randomly initialised unless weights are loaded).

    Deformable stages swap the stride-1 3x3 convs of the named stage.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool, net.layer1)
        self.res3, self.res4, self.res5 = net.layer2, net.layer3, net.layer4
        for name in cfg.deformable_stages:
            for block in getattr(self, name):
                if block.conv2.stride == (1, 1):
                    c = block.conv2.in_channels
                    block.conv2 = DeformConv2d(c, block.conv2.out_channels, bias=False)

    def forward(self, x):
        x = self.stem(x)
        c3 = self.res3(x)
        c4 = self.res4(c3)
        return c3, c4, self.res5(c4)


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.body = TinyBackbone(cfg) if cfg.variant == "tiny" else ResNet50Backbone(cfg)
        for name in cfg.frozen_stages:
            for p in getattr(self.body, name).parameters():
                p.requires_grad_(False)

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """``images`` is ``(N, 3, H, W)`` in [0, 1].

        Input is zero-padded to a multiple of 32 internally; outputs are cropped
        to ``ceil(H / stride) x ceil(W / stride)``.
        """
        N, _, H, W = images.shape
        x = (images - 0.5) / 0.25
        ph, pw = (-H) % 32, (-W) % 32
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph))
        feats = self.body(x)
        out = []
        for f, s in zip(feats, (8, 16, 32)):
            out.append(f[:, :, : -(-H // s), : -(-W // s)])
        return tuple(out)


def extract_features(images: torch.Tensor, backbone: Backbone):
    return backbone(images)
