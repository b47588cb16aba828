import pytest
import torch

from alignps.afa import AfaConfig
from alignps.backbone import BackboneConfig
from alignps.dconv import ConfigurationError
from alignps.model import ModelConfig, PersonSearchNet


def _cfg(task="alignps", levels="P3_only"):
    return ModelConfig(BackboneConfig(channels=(8, 16, 16)), AfaConfig(out_channels=8, output_levels=levels), task=task)


@pytest.mark.parametrize("task, source", [("alignps", "afa"), ("t1", "head.reg_tower"), ("t2", "head.cls_tower"), ("t3", "reid_tower")])
def test_wiring(task, source):
    net = PersonSearchNet(_cfg(task))
    assert net.wiring() == {"reid": source, "detection": "afa"}
    assert (net.reid_tower is not None) == (task == "t3")


def test_embedding_sources_are_the_named_tensors():
    torch.manual_seed(0)
    x = torch.rand(1, 3, 64, 96)
    for task in ("alignps", "t1", "t2"):
        net = PersonSearchNet(_cfg(task)).eval()
        with torch.no_grad():
            p3 = net.afa(net.backbone(x))["P3"]
            out = net(x)["P3"]
            ref = {"alignps": p3, "t1": net.head.reg_tower(p3), "t2": net.head.cls_tower(p3)}[task]
        assert torch.equal(out["embed"], ref)


def test_forward_shapes_multilevel():
    net = PersonSearchNet(_cfg(levels="P3P4P5"))
    out = net(torch.rand(2, 3, 64, 96))
    assert list(out) == ["P3", "P4", "P5"]
    for name, s in (("P3", 8), ("P4", 16), ("P5", 32)):
        lv = out[name]
        h, w = 64 // s, 96 // s
        assert lv["stride"] == s
        assert lv["cls_logits"].shape == (2, h, w) and lv["bbox_reg"].shape == (2, 4, h, w)
        assert lv["embed"].shape == (2, 8, h, w)


def test_predict_maps_normalised():
    net = PersonSearchNet(_cfg())
    maps = net.predict_maps(torch.rand(1, 3, 64, 64))
    e = maps["P3"]["embed"]
    assert abs(float((e ** 2).sum(1).mean()) - 1.0) < 1e-5
    assert net.training


def test_unknown_task():
    with pytest.raises(ConfigurationError):
        ModelConfig(task="t4")
