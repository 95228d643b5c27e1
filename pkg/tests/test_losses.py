import math
from types import SimpleNamespace
import pytest
import torch
import torch.nn.functional as F
from torch.autograd import gradcheck

from neuraldress.engine.errors import ParameterError
from neuraldress.engine.losses import (
    DICE_EPS, PathLengthPenalty, covariance_loss, dice_loss, feature_matching_loss, latent_prediction_loss,
    lsgan_discriminator_loss, lsgan_generator_loss, lsgan_losses, mipmap_alphas, mipmap_reg, nonsaturating_losses,
    perceptual_loss, r1_penalty, random_transforms,
)
from neuraldress.engine.extractors import IdentityExtractor, RandomPyramid
from neuraldress.engine.renderer import NeuralRenderer
from neuraldress.engine.settings import RendererConfig
from neuraldress.engine.texture import NeuralTexture


def _blob():
    m = torch.zeros(2, 1, 16, 16)
    m[:, :, 4:12, 3:9] = 1.0
    return m


def test_dice_of_identical_masks_is_zero():
    m = _blob()
    assert dice_loss(m, m).item() == pytest.approx(0.0, abs=1e-6)


def test_dice_of_half_mask():
    m = _blob()
    assert dice_loss(m, 0.5 * m).item() == pytest.approx(-math.log(2.0 / 3.0), abs=1e-6)


def test_dice_shape_mismatch():
    with pytest.raises(ParameterError):
        dice_loss(torch.ones(1, 1, 4, 4), torch.ones(1, 1, 4, 5))


def test_lsgan_hand_values():
    zeros, ones = torch.zeros(3), torch.ones(3)
    assert lsgan_generator_loss(zeros).item() == 1.0
    assert lsgan_generator_loss(ones).item() == 0.0
    assert lsgan_discriminator_loss(ones, zeros).item() == 0.0
    assert lsgan_discriminator_loss(zeros, ones).item() == 2.0
    g, d = lsgan_losses(ones, zeros)
    assert (g.item(), d.item()) == (1.0, 0.0)


def test_nonsaturating_at_zero_logits():
    g, d = nonsaturating_losses(torch.zeros(4), torch.zeros(4))
    assert g.item() == pytest.approx(math.log(2.0))
    assert d.item() == pytest.approx(2.0 * math.log(2.0))


def test_mipmap_reg_hand_example():
    tex = NeuralTexture(channels=16, top_resolution=512, min_resolution=8, init_std=0.0)
    with torch.no_grad():
        tex.mipmaps[-1].fill_(1.0)
    assert mipmap_reg(tex).item() == pytest.approx(16384.0, abs=1e-3)


def test_mipmap_alphas_align_to_the_top():
    assert mipmap_alphas(7) == (0.0, 0.0, 0.0, 1.0, 2.0, 4.0, 8.0)
    assert mipmap_alphas(2) == (4.0, 8.0)
    with pytest.raises(ParameterError):
        mipmap_alphas(8)


def test_mipmap_reg_ignores_zero_weighted_levels():
    tex = NeuralTexture(channels=1, top_resolution=256, min_resolution=8, init_std=0.0)
    with torch.no_grad():
        tex.mipmaps[0].fill_(5.0)
    assert mipmap_reg(tex).item() == 0.0


def test_covariance_loss_identity_renderer():
    x = torch.rand(2, 3, 16, 16)
    theta = random_transforms(2, 30.0, 0.1, torch.Generator().manual_seed(0))
    loss, empty = covariance_loss(lambda t: t, x, theta)
    assert not empty
    assert loss.item() == pytest.approx(0.0, abs=1e-6)


def test_covariance_loss_pointwise_renderer():
    x = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    theta = random_transforms(2, 20.0, 0.05, torch.Generator().manual_seed(1), dtype=torch.float64)
    loss, _ = covariance_loss(lambda t: 2.0 * t + 1.0, x, theta)
    assert loss.item() == pytest.approx(0.0, abs=1e-3)


def test_covariance_loss_identity_transform():
    r = NeuralRenderer(RendererConfig(texture_channels=2, base_width=4, depth=1, max_width=8, trunk_channels=4))
    x = torch.rand(1, 4, 16, 16)
    theta = torch.tensor([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]])
    loss, _ = covariance_loss(lambda t: r(t)[0], x, theta)
    assert loss.item() == pytest.approx(0.0, abs=1e-5)


def test_r1_penalty_of_linear_critic():
    a = torch.randn(1, 2, 4, 4)
    real = torch.rand(3, 2, 4, 4)
    value = r1_penalty(lambda x: (x * a).flatten(1).sum(dim=1), real)
    assert value.item() == pytest.approx(float((a ** 2).sum()), rel=1e-5)


def test_path_penalty_matches_its_own_average():
    pen = PathLengthPenalty(beta=0.9)
    w = torch.randn(2, 1, 8, requires_grad=True)
    M = torch.randn(8, 16)

    def image():
        return (w.sum(dim=0) @ M).reshape(1, 1, 4, 4)

    first = pen(w, image(), torch.Generator().manual_seed(5))
    assert first.item() == 0.0
    second = pen(w, image(), torch.Generator().manual_seed(5))
    assert second.item() == pytest.approx(0.0, abs=1e-6)
    assert pen.target() > 0


def test_latent_prediction_loss():
    w = torch.zeros(4, 3)
    assert latent_prediction_loss(w + 1.0, w).item() == pytest.approx(3.0)


def test_feature_matching_and_perceptual():
    a = [torch.ones(1, 2, 2, 2), torch.zeros(1, 1, 2, 2)]
    b = [torch.zeros(1, 2, 2, 2), torch.zeros(1, 1, 2, 2)]
    assert feature_matching_loss(a, b).item() == 1.0
    with pytest.raises(ParameterError):
        feature_matching_loss(a, b[:1])
    x = torch.rand(1, 3, 16, 16)
    assert perceptual_loss(x, x, RandomPyramid()).item() == 0.0
    assert perceptual_loss(x, torch.zeros_like(x), IdentityExtractor()).item() == pytest.approx(float(x.mean()))


def _masks(seed):
    g = torch.Generator().manual_seed(seed)
    m = torch.rand(2, 1, 6, 6, generator=g, dtype=torch.float64) * 0.8 + 0.1
    m_hat = torch.rand(2, 1, 6, 6, generator=g, dtype=torch.float64) * 0.8 + 0.1
    return m.requires_grad_(), m_hat.requires_grad_()


def test_loss_gradients_match_finite_differences():
    g = torch.Generator().manual_seed(0)

    def rand(*shape):
        return torch.rand(*shape, generator=g, dtype=torch.float64).requires_grad_()

    assert gradcheck(dice_loss, _masks(0))
    assert gradcheck(lsgan_generator_loss, (rand(5),))
    assert gradcheck(lsgan_discriminator_loss, (rand(5), rand(5)))
    assert gradcheck(latent_prediction_loss, (rand(3, 4), rand(3, 4)))
    assert gradcheck(lambda a, b: feature_matching_loss([a], [b]), (rand(1, 2, 3, 3), rand(1, 2, 3, 3) + 2.0))
    assert gradcheck(lambda a, b: perceptual_loss(a, b, IdentityExtractor()), (rand(1, 3, 4, 4), rand(1, 3, 4, 4) + 2.0))
    # mipmap_reg only reads the level list
    assert gradcheck(lambda *levels: mipmap_reg(SimpleNamespace(mipmaps=levels), (1.0, 2.0, 4.0)),
                     (rand(1, 2, 2, 2), rand(1, 2, 4, 4), rand(1, 2, 8, 8)))


def test_dice_is_symmetric():
    m, m_hat = _masks(1)
    assert dice_loss(m, m_hat).item() == pytest.approx(dice_loss(m_hat, m).item(), rel=1e-12)


def test_dice_of_disjoint_masks_is_the_eps_floor():
    a = torch.zeros(1, 1, 8, 8, dtype=torch.float64)
    b = torch.zeros_like(a)
    a[..., :4, :] = 1.0
    b[..., 4:, :] = 1.0
    total = 64.0
    assert dice_loss(a, b).item() == pytest.approx(math.log((total + DICE_EPS) / DICE_EPS), rel=1e-12)


def test_mipmap_reg_is_absolutely_homogeneous():
    tex = NeuralTexture(channels=3, top_resolution=32, min_resolution=8, init_std=1.0,
                        generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    base = mipmap_reg(tex).item()
    for c in (3.0, -2.0, 0.5):
        scaled = SimpleNamespace(mipmaps=[c * p.detach() for p in tex.mipmaps])
        assert mipmap_reg(scaled).item() == pytest.approx(abs(c) * base, rel=1e-12)


def test_lsgan_at_the_decision_boundary():
    half = torch.full((4,), 0.5)
    g, d = lsgan_losses(half, half)
    assert g.item() == 0.25
    assert d.item() == 0.5


def test_latent_prediction_loss_hand_value():
    assert latent_prediction_loss(torch.tensor([[3.0, 4.0]]), torch.zeros(1, 2)).item() == 25.0


def test_covariance_loss_blur_commutes_with_quarter_turn():
    kernel = torch.tensor([1.0, 2.0, 1.0], dtype=torch.float64)
    kernel = (kernel[:, None] * kernel[None, :] / 16.0).expand(3, 1, 3, 3)

    def blur(t):
        return F.conv2d(t, kernel, padding=1, groups=3)

    x = torch.rand(2, 3, 12, 12, generator=torch.Generator().manual_seed(3), dtype=torch.float64)
    quarter = torch.tensor([[[0.0, -1.0, 0.0], [1.0, 0.0, 0.0]]], dtype=torch.float64).repeat(2, 1, 1)
    loss, empty = covariance_loss(blur, x, quarter)
    assert not empty
    assert loss.item() == pytest.approx(0.0, abs=1e-9)
    shifted, _ = covariance_loss(lambda t: torch.roll(t, 1, dims=-1), x, quarter)
    assert shifted.item() > 1e-3
