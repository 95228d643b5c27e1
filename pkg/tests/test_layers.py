import math
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from neuraldress.engine.layers import Conv2dWeightModulate, EqualizedConv2d, EqualizedLinear, EqualizedWeight


def _seeded():
    return torch.Generator().manual_seed(0)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=2, max_size=4))
def test_weight_scale_is_inverse_root_fan_in(shape):
    fan_in = math.prod(shape[1:])
    w = EqualizedWeight(shape, generator=_seeded())
    assert w.c == pytest.approx(1.0 / math.sqrt(fan_in), rel=1e-12)
    assert torch.equal(w(), w.weight * w.c)


def test_stored_weight_has_unit_variance():
    w = EqualizedWeight([256, 512], generator=_seeded())
    assert float(w.weight.std()) == pytest.approx(1.0, abs=0.02)
    assert float(w().std()) == pytest.approx(1.0 / math.sqrt(512), rel=0.02)


def test_disabled_scale_folds_into_the_init():
    eq = EqualizedWeight([8, 3, 3, 3], generator=_seeded())
    plain = EqualizedWeight([8, 3, 3, 3], enabled=False, generator=_seeded())
    assert plain.c == 1.0
    assert torch.allclose(eq(), plain(), atol=1e-7)


def test_equalized_linear_uses_the_scaled_weight():
    layer = EqualizedLinear(12, 5, bias=0.5, generator=_seeded())
    assert layer.weight.c == pytest.approx(1.0 / math.sqrt(12))
    x = torch.randn(4, 12)
    raw = layer.weight.weight.detach()
    assert torch.allclose(layer(x), x @ (raw / math.sqrt(12)).T + 0.5, atol=1e-6)


def test_equalized_conv_uses_the_scaled_weight():
    layer = EqualizedConv2d(3, 4, 3, padding=1, generator=_seeded())
    assert layer.weight.c == pytest.approx(1.0 / math.sqrt(27))
    x = torch.randn(2, 3, 6, 6)
    raw = layer.weight.weight.detach()
    assert torch.allclose(layer(x), F.conv2d(x, raw / math.sqrt(27), padding=1), atol=1e-6)


def test_modulated_conv_uses_the_scaled_weight():
    layer = Conv2dWeightModulate(6, 2, 3, demodulate=False, generator=_seeded())
    assert layer.weight.c == pytest.approx(1.0 / math.sqrt(54))
    x = torch.randn(2, 6, 5, 5)
    raw = layer.weight.weight.detach()
    out = layer(x, torch.ones(2, 6))
    assert torch.allclose(out, F.conv2d(x, raw / math.sqrt(54), padding=1), atol=1e-6)


def test_demodulated_weights_do_not_depend_on_the_scale():
    eq = Conv2dWeightModulate(4, 3, 3, generator=_seeded())
    plain = Conv2dWeightModulate(4, 3, 3, equalized=False, generator=_seeded())
    x, s = torch.randn(2, 4, 5, 5), torch.rand(2, 4) + 0.5
    assert torch.allclose(eq(x, s), plain(x, s), atol=1e-5)


def test_gradient_on_stored_weight_carries_the_scale():
    x = torch.randn(3, 9)
    eq = EqualizedLinear(9, 2, generator=_seeded())
    plain = EqualizedLinear(9, 2, equalized=False, generator=_seeded())
    eq(x).sum().backward()
    plain(x).sum().backward()
    assert torch.allclose(eq.weight.weight.grad, plain.weight.weight.grad / 3.0, atol=1e-6)
