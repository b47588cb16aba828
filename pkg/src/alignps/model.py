"""Full network: backbone -> AFA -> {re-id embedding map, detection head}.

``task`` selects where the re-id embedding map is taken from:

* ``alignps`` - the AFA output itself, which is also the head input;
* ``t1`` - the regression-tower output of the detection head;
* ``t2`` - the classification-tower output;
* ``t3`` - an independent four-conv re-id tower on the AFA output.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .afa import AFA, LEVEL_STRIDES, AfaConfig
from .backbone import Backbone, BackboneConfig
from .dconv import ConfigurationError
from .head import DetectionHead, HeadConfig

TASKS = ("alignps", "t1", "t2", "t3")


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    afa: AfaConfig = field(default_factory=AfaConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    task: str = "alignps"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigurationError(f"unknown task structure {self.task!r}")


class ReidTower(nn.Module):
    def __init__(self, d: int, n: int = 4):
        super().__init__()
        layers = []
        for i in range(n):
            layers.append(nn.Conv2d(d, d, 3, padding=1))
            if i < n - 1:
                layers += [nn.GroupNorm(min(32, d), d), nn.ReLU(inplace=True)]
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class PersonSearchNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg.backbone)
        self.afa = AFA(cfg.backbone.channels, cfg.afa)
        d = cfg.afa.out_channels
        self.head = DetectionHead(d, cfg.afa.levels, cfg.head)
        self.reid_tower = ReidTower(d) if cfg.task == "t3" else None

    @property
    def levels(self) -> tuple[str, ...]:
        return self.cfg.afa.levels

    def wiring(self) -> dict[str, str]:
        """Which tensor feeds the re-id embedding and which feeds the detection head."""
        src = {"alignps": "afa", "t1": "head.reg_tower", "t2": "head.cls_tower", "t3": "reid_tower"}
        return {"reid": src[self.cfg.task], "detection": "afa"}

    def forward(self, images: torch.Tensor) -> dict[str, dict[str, torch.Tensor]]:
        feats = self.backbone(images)
        pyramid = self.afa(feats)
        out = {}
        for name, p in pyramid.items():
            stride = LEVEL_STRIDES[name]
            h = self.head(p, name, stride)
            if self.cfg.task == "alignps":
                embed = p
            elif self.cfg.task == "t1":
                embed = h["reg_feat"]
            elif self.cfg.task == "t2":
                embed = h["cls_feat"]
            else:
                embed = self.reid_tower(p)
            out[name] = {
                "cls_logits": h["cls_logits"][:, 0],
                "ctr_logits": h["ctr_logits"][:, 0],
                "bbox_reg": h["bbox_reg"],
                "embed": embed,
                "stride": stride,
            }
        return out

    @torch.no_grad()
    def predict_maps(self, images: torch.Tensor) -> dict[str, dict]:
        """Numpy maps per level for decoding: probabilities, distances, unit-norm embeddings."""
        was_training = self.training
        self.eval()
        raw = self(images)
        self.train(was_training)
        res = {}
        for name, lv in raw.items():
            res[name] = {
                "stride": lv["stride"],
                "cls_prob": torch.sigmoid(lv["cls_logits"]).numpy(),
                "ctr_prob": torch.sigmoid(lv["ctr_logits"]).numpy(),
                "reg": lv["bbox_reg"].numpy(),
                "embed": F.normalize(lv["embed"], dim=1).numpy(),
            }
        return res
