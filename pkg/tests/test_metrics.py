import math
import numpy as np
import pytest
import torch

from neuraldress.engine.encoders import StyleEncoder
from neuraldress.engine.errors import DataError, ParameterError
from neuraldress.engine.extractors import IdentityExtractor, RandomClassifier, RandomPyramid
from neuraldress.engine.gan import TextureGAN, spectral_texture
from neuraldress.engine.metrics import (
    compare_image_sets, fid, fid_from_features, frechet_distance, inception_score, inception_score_from_probs,
    perceptual_distance, psnr, ssim, summarize, view_consistency, write_metrics_csv,
)
from neuraldress.engine.renderer import NeuralRenderer


def test_ssim_identity_and_symmetry():
    gen = torch.Generator().manual_seed(0)
    a = torch.rand(3, 32, 32, generator=gen)
    b = torch.rand(3, 32, 32, generator=gen)
    assert ssim(a, a) == pytest.approx(1.0)
    assert ssim(a, b) == pytest.approx(ssim(b, a))
    assert ssim(a, b) < 0.5


def test_ssim_of_inverted_checkerboard():
    yy, xx = torch.meshgrid(torch.arange(64), torch.arange(64), indexing="ij")
    board = ((yy + xx) % 2).to(torch.float64)
    # a flat 2x2 window always holds two black and two white pixels
    value = ssim(board, 1.0 - board, window=2, sigma=1e6)
    assert value == pytest.approx(-1.0, abs=5e-3)


def test_ssim_rejects_small_images():
    with pytest.raises(ParameterError):
        ssim(torch.rand(8, 8), torch.rand(8, 8))


def test_psnr():
    a = torch.zeros(1, 4, 4)
    assert psnr(a, a) == math.inf
    assert psnr(a, a + 0.1) == pytest.approx(20.0)


def test_perceptual_distance_is_zero_on_identical():
    x = torch.rand(3, 16, 16)
    assert perceptual_distance(x, x, RandomPyramid()) == 0.0
    assert perceptual_distance(x, 1 - x, RandomPyramid()) > 0.0


def test_fid_of_identical_sets_is_zero():
    x = torch.rand(40, 3, 8, 8, generator=torch.Generator().manual_seed(0))
    assert fid(x, x, IdentityExtractor()) == pytest.approx(0.0, abs=1e-6)


def test_fid_of_shifted_gaussians():
    assert frechet_distance(np.zeros(1), np.eye(1), np.ones(1), np.eye(1)) == pytest.approx(1.0)
    rng = np.random.default_rng(0)
    a = rng.normal(0.0, 1.0, size=(20000, 1))
    b = rng.normal(1.0, 1.0, size=(20000, 1))
    assert fid_from_features(a, b) == pytest.approx(1.0, abs=0.05)


def test_fid_shrinks_small_sets(caplog):
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(4, 10)), rng.normal(size=(4, 10))
    value = fid_from_features(a, b)
    assert math.isfinite(value) and value >= 0
    assert "shrinking" in caplog.text


def test_fid_feature_mismatch():
    with pytest.raises(ParameterError):
        fid_from_features(np.zeros((5, 3)), np.zeros((5, 4)))


def test_inception_score_bounds():
    assert inception_score_from_probs(np.full((8, 5), 0.2)) == pytest.approx(1.0)
    assert inception_score_from_probs(np.eye(5)) == pytest.approx(5.0, rel=1e-6)
    images = torch.rand(6, 3, 16, 16)
    score = inception_score(images, RandomClassifier(n_classes=4))
    assert 1.0 - 1e-9 <= score <= 4.0 + 1e-9


def test_view_consistency_without_rotation_is_zero(tiny, body):
    cfg = tiny.gan
    gan = TextureGAN(cfg, spectral_texture(body, cfg.texture_resolution, cfg.spectral_channels))
    renderer = NeuralRenderer(tiny.renderer)
    encoder = StyleEncoder(tiny.encoder, len(gan.levels), cfg.latent_dim)
    assert view_consistency(gan, renderer, encoder, body, tiny.metrics, delta_deg=0.0) == 0.0
    turned = view_consistency(gan, renderer, encoder, body, tiny.metrics, delta_deg=90.0)
    assert turned > 0.0


def test_image_set_report(tmp_path, tiny):
    rng = np.random.default_rng(0)
    pred = [rng.uniform(size=(16, 16, 3)) for _ in range(2)]
    rows = compare_image_sets(pred, pred, IdentityExtractor(), tiny.metrics)
    assert [r["index"] for r in rows] == [0, 1]
    assert all(r["psnr"] == math.inf for r in rows)
    means = summarize(rows)
    assert means["mean_ssim"] == pytest.approx(1.0)
    write_metrics_csv(tmp_path / "m.csv", rows)
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "index,psnr,ssim,perceptual"
    with pytest.raises(DataError):
        compare_image_sets(pred, pred[:1], IdentityExtractor(), tiny.metrics)
