import numpy as np
import pytest
import torch

from alignps.dconv import (
    ConfigurationError,
    DeformConv2d,
    _torchvision_deform_conv2d,
    bilinear_sample,
    deform_conv2d,
    plain_conv_reference,
)
from helpers import fractional_offsets, grad_rel_error


def per_tap_reference(inp, weight, offset, bias=None):
    """Direct loop over output pixels and kernel taps with explicit bilinear sampling."""
    N, C, H, W = inp.shape
    Co = weight.shape[0]
    out = torch.zeros(N, Co, H, W, dtype=inp.dtype)
    for n in range(N):
        for i in range(H):
            for j in range(W):
                acc = torch.zeros(Co, dtype=inp.dtype)
                for k in range(9):
                    ky, kx = divmod(k, 3)
                    x = j + kx - 1 + offset[n, 2 * k, i, j]
                    y = i + ky - 1 + offset[n, 2 * k + 1, i, j]
                    v = bilinear_sample(inp[n], x, y)
                    acc = acc + weight[:, :, ky, kx] @ v
                out[n, :, i, j] = acc + (bias if bias is not None else 0)
    return out


@pytest.mark.parametrize("seed", range(5))
def test_zero_offset_matches_conv(seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, 3, 7, 9, generator=g)
    w = torch.randn(4, 3, 3, 3, generator=g)
    b = torch.randn(4, generator=g)
    off = torch.zeros(2, 18, 7, 9)
    diff = (deform_conv2d(x, w, off, b) - plain_conv_reference(x, w, b)).abs().max()
    assert float(diff) <= 1e-5


@pytest.mark.parametrize("seed", range(4))
def test_matches_per_tap_loop(seed):
    rng = np.random.default_rng(seed)
    x = torch.tensor(rng.normal(size=(1, 2, 5, 6)))
    w = torch.tensor(rng.normal(size=(3, 2, 3, 3)))
    off = torch.tensor(rng.uniform(-2.5, 2.5, size=(1, 18, 5, 6)))
    ref = per_tap_reference(x, w, off)
    assert torch.allclose(deform_conv2d(x, w, off), ref, atol=1e-10)


def test_integer_offset_is_shifted_conv():
    g = torch.Generator().manual_seed(3)
    x = torch.randn(1, 2, 6, 6, generator=g, dtype=torch.float64)
    w = torch.randn(2, 2, 3, 3, generator=g, dtype=torch.float64)
    off = torch.zeros(1, 18, 6, 6, dtype=torch.float64)
    off[:, 0::2] = 1.0  # every tap one pixel to the right
    shifted = torch.zeros_like(x)
    shifted[..., :-1] = x[..., 1:]
    # column 0 differs: its left tap now reads real column 0 instead of padding
    assert torch.allclose(deform_conv2d(x, w, off)[..., 1:], plain_conv_reference(shifted, w)[..., 1:], atol=1e-12)


def test_out_of_bounds_reads_zero():
    x = torch.ones(1, 1, 4, 4, dtype=torch.float64)
    w = torch.ones(1, 1, 3, 3, dtype=torch.float64)
    off = torch.full((1, 18, 4, 4), 100.0, dtype=torch.float64)
    assert float(deform_conv2d(x, w, off).abs().max()) == 0.0


def test_bilinear_sample_partial_outside():
    fm = torch.ones(1, 2, 2, dtype=torch.float64)
    # half of the weight falls on column 2, which is outside
    assert float(bilinear_sample(fm, 1.5, 0.0)) == pytest.approx(0.5)


@pytest.mark.parametrize("seed", range(3))
def test_matches_torchvision(seed):
    rng = np.random.default_rng(seed)
    x = torch.tensor(rng.normal(size=(2, 3, 6, 5)), dtype=torch.float32)
    w = torch.tensor(rng.normal(size=(4, 3, 3, 3)), dtype=torch.float32)
    b = torch.tensor(rng.normal(size=4), dtype=torch.float32)
    off = torch.tensor(rng.uniform(-2, 2, size=(2, 18, 6, 5)), dtype=torch.float32)
    ours = deform_conv2d(x, w, off, b)
    theirs = _torchvision_deform_conv2d(x, w, off, b)
    assert float((ours - theirs).abs().max()) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_gradient_finite_difference(seed):
    rng = np.random.default_rng(100 + seed)
    x = torch.tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
    w = torch.tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)
    b = torch.tensor(rng.normal(size=2), requires_grad=True)
    off = torch.tensor(fractional_offsets(rng, (1, 18, 4, 4)), requires_grad=True)
    proj = torch.tensor(rng.normal(size=(1, 2, 4, 4)))
    err = grad_rel_error(lambda: (deform_conv2d(x, w, off, b) * proj).sum(), [x, w, b, off])
    assert err <= 1e-3


def test_layer_starts_as_plain_conv():
    torch.manual_seed(0)
    layer = DeformConv2d(3, 5)
    x = torch.randn(2, 3, 8, 8)
    with torch.no_grad():
        assert float((layer(x) - layer.as_plain_conv()(x)).abs().max()) <= 1e-5
    assert float(layer.offset_conv.weight.detach().abs().sum()) == 0.0


def test_offsets_receive_gradient():
    torch.manual_seed(0)
    layer = DeformConv2d(2, 2)
    x = torch.randn(1, 2, 6, 6)
    layer(x).pow(2).sum().backward()
    assert float(layer.offset_conv.weight.grad.abs().sum()) > 0


@pytest.mark.parametrize(
    "shape_w, shape_off",
    [((4, 3, 3, 3), (1, 17, 5, 5)), ((4, 2, 3, 3), (1, 18, 5, 5)), ((4, 3, 5, 5), (1, 50, 5, 5))],
)
def test_shape_mismatch_raises(shape_w, shape_off):
    with pytest.raises(ConfigurationError):
        deform_conv2d(torch.zeros(1, 3, 5, 5), torch.zeros(shape_w), torch.zeros(shape_off))


def test_unknown_impl():
    with pytest.raises(ConfigurationError):
        DeformConv2d(2, 2, impl="cuda")
