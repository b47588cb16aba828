import itertools
import math

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from alignps.afa import AFA, LEVEL_PRESETS, AfaConfig, _upsample_to, aggregate, assign_level, assign_level_by_extent, level_ranges
from alignps.core import BoundingBox
from alignps.dconv import ConfigurationError, DeformConv2d

CH = (8, 12, 16)


def _feats(h=12, w=20, n=1):
    return (
        torch.randn(n, CH[0], h, w),
        torch.randn(n, CH[1], math.ceil(h / 2), math.ceil(w / 2)),
        torch.randn(n, CH[2], math.ceil(h / 4), math.ceil(w / 4)),
    )


@pytest.mark.parametrize("lat, fusion, outp", list(itertools.product(
    ["plain_1x1", "deform_3x3", "plain_3x3"], ["sum", "concat"], ["plain_3x3", "deform_3x3"])))
def test_every_toggle_gives_p3(lat, fusion, outp):
    afa = AFA(CH, AfaConfig(lat, fusion, outp, out_channels=6))
    out = aggregate(_feats(), afa)
    assert list(out) == ["P3"] and out["P3"].shape == (1, 6, 12, 20)


@pytest.mark.parametrize("preset", list(LEVEL_PRESETS))
def test_presets_emit_their_levels(preset):
    afa = AFA(CH, AfaConfig(out_channels=4, output_levels=preset))
    out = afa(_feats(13, 21))
    assert tuple(out) == LEVEL_PRESETS[preset]
    sizes = {"P3": (13, 21), "P4": (7, 11), "P5": (4, 6)}
    for name, t in out.items():
        assert t.shape[-2:] == sizes[name] and t.shape[1] == 4


def test_module_kinds_follow_config():
    afa = AFA(CH, AfaConfig("deform_3x3", "concat", "deform_3x3", out_channels=4))
    assert all(isinstance(m, DeformConv2d) for m in afa.laterals.values())
    assert isinstance(afa.outputs["P3"], DeformConv2d)
    # concat widens every non-top output layer to 2D inputs
    assert afa.outputs["P3"].weight.shape[1] == 8 and afa.outputs["P5"].weight.shape[1] == 4
    plain = AFA(CH, AfaConfig("plain_1x1", "sum", "plain_3x3", out_channels=4))
    assert plain.laterals["P3"].kernel_size == (1, 1)
    assert plain.outputs["P3"].in_channels == 4 and "P4" not in plain.outputs


def test_sum_fusion_matches_manual_fpn():
    torch.manual_seed(0)
    cfg = AfaConfig("plain_1x1", "sum", "plain_3x3", out_channels=5, lateral_relu=False)
    afa = AFA(CH, cfg)
    c3, c4, c5 = _feats(8, 8)
    l5, l4, l3 = afa.laterals["P5"](c5), afa.laterals["P4"](c4), afa.laterals["P3"](c3)
    up = lambda t: t.repeat_interleave(2, -1).repeat_interleave(2, -2)
    m4 = l4 + up(l5)
    m3 = l3 + up(m4)
    assert torch.allclose(afa((c3, c4, c5))["P3"], afa.outputs["P3"](m3), atol=1e-6)


def test_concat_fusion_matches_manual():
    torch.manual_seed(1)
    cfg = AfaConfig("plain_1x1", "concat", "plain_3x3", out_channels=3)
    afa = AFA(CH, cfg)
    c3, c4, c5 = _feats(8, 8)
    up = lambda t: t.repeat_interleave(2, -1).repeat_interleave(2, -2)
    l = {k: torch.relu(afa.laterals[k](c)) for k, c in zip(("P3", "P4", "P5"), (c3, c4, c5))}
    o5 = afa.outputs["P5"](l["P5"])
    o4 = afa.outputs["P4"](torch.cat([up(o5), l["P4"]], 1))
    o3 = afa.outputs["P3"](torch.cat([up(o4), l["P3"]], 1))
    assert torch.allclose(afa((c3, c4, c5))["P3"], o3, atol=1e-6)


def test_deform_afa_starts_equal_to_plain_3x3():
    torch.manual_seed(2)
    d = AFA(CH, AfaConfig("deform_3x3", "concat", "deform_3x3", out_channels=4))
    p = AFA(CH, AfaConfig("plain_3x3", "concat", "plain_3x3", out_channels=4))
    with torch.no_grad():
        for k in d.laterals:
            p.laterals[k].weight.copy_(d.laterals[k].weight)
            p.laterals[k].bias.copy_(d.laterals[k].bias)
        for k in d.outputs:
            p.outputs[k].weight.copy_(d.outputs[k].weight)
            p.outputs[k].bias.copy_(d.outputs[k].bias)
    f = _feats(10, 10)
    assert torch.allclose(d(f)["P3"], p(f)["P3"], atol=1e-5)


def test_mismatched_ratio_raises():
    afa = AFA(CH, AfaConfig(out_channels=4))
    c3, c4, c5 = _feats(12, 20)
    with pytest.raises(ConfigurationError):
        afa((c3, c4[..., :3, :], c5))


def test_upsample_crops_odd_sizes():
    x = torch.arange(6.0).reshape(1, 1, 2, 3)
    y = _upsample_to(x, torch.zeros(1, 1, 3, 5))
    assert y.shape[-2:] == (3, 5) and float(y[0, 0, 2, 4]) == 5.0


@given(st.floats(1, 600), st.floats(1, 600))
def test_p3_only_takes_everything(w, h):
    assert assign_level(BoundingBox(0, 0, w, h), AfaConfig()) == "P3"


@given(st.floats(0, 1000))
def test_multilevel_ranges_partition(extent):
    cfg = AfaConfig(output_levels="P3P4P5")
    lv = assign_level_by_extent(extent, cfg)
    lo, hi = level_ranges(cfg)[lv]
    assert lo <= extent <= hi
    if extent < 128:
        assert lv == "P3"
    elif extent > 256:
        assert lv == "P5"


def test_assign_level_uses_half_longer_side():
    cfg = AfaConfig(output_levels="P3P4P5", size_bounds=(16, 32))
    assert assign_level(BoundingBox(0, 0, 10, 30), cfg) == "P3"
    assert assign_level(BoundingBox(0, 0, 10, 50), cfg) == "P4"
    assert assign_level(BoundingBox(0, 0, 10, 70), cfg) == "P5"


@pytest.mark.parametrize("kw", [dict(fusion="max"), dict(lateral_kind="deform_1x1"), dict(output_levels="P6"), dict(size_bounds=(5, 2))])
def test_bad_afa_config(kw):
    with pytest.raises(ConfigurationError):
        AfaConfig(**kw)
