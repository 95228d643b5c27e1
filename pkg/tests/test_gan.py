import numpy as np
import pytest
import torch

from neuraldress.engine.body import a_pose
from neuraldress.engine.camera import frontal_camera
from neuraldress.engine.dataset import generate_synthetic_dataset, load_dataset
from neuraldress.engine.errors import ConfigurationError, ParameterError
from neuraldress.engine.gan import (
    StyleLatents, TextureGAN, _fake_pair, build_discriminators, estimate_w_avg, face_crop, load_generative,
    load_generator, make_latents, map_latent, sample_person_image, save_generative, spectral_texture,
    synthesize_texture, train_generative, truncate,
)
from neuraldress.engine.renderer import NeuralRenderer
from neuraldress.engine.settings import ABLATIONS, AblationToggles


def _gan(tiny, body):
    cfg = tiny.gan
    return TextureGAN(cfg, spectral_texture(body, cfg.texture_resolution, cfg.spectral_channels))


def test_default_spectral_levels(tiny):
    assert tiny.gan.resolved_spectral_levels() == [4, 8, 16]
    off = tiny.gan.model_copy(update={"ablation": AblationToggles(use_spectral=False)})
    assert off.resolved_spectral_levels() == []


def test_spectral_level_outside_pyramid(tiny, body):
    cfg = tiny.gan.model_copy(update={"spectral_levels": [32]})
    with pytest.raises(ConfigurationError):
        TextureGAN(cfg, spectral_texture(body, 16, cfg.spectral_channels))


def test_spectral_map_required(tiny):
    with pytest.raises(ConfigurationError):
        TextureGAN(tiny.gan, None)
    with pytest.raises(ConfigurationError):
        TextureGAN(tiny.gan, np.zeros((8, 8, tiny.gan.spectral_channels)))


def test_texture_shape(tiny, body):
    gan = _gan(tiny, body)
    tex = synthesize_texture(gan, make_latents(gan, gan.sample_z(2), gan.sample_noise(2)))
    assert tex.shape == (2, tiny.gan.texture_channels, 16, 16)
    assert gan.levels == [4, 8, 16]


def test_truncation_at_one_is_identity(tiny, body):
    w = torch.randn(3, 8)
    assert truncate(w, torch.zeros(8), 1.0) is w
    gan = _gan(tiny, body)
    gan.w_avg.copy_(torch.randn(tiny.gan.latent_dim))
    z, noise = gan.sample_z(1), gan.sample_noise(1, torch.Generator().manual_seed(2))
    with torch.no_grad():
        truncated = synthesize_texture(gan, make_latents(gan, z, noise, psi=1.0))
        plain = synthesize_texture(gan, StyleLatents(w=gan.broadcast(map_latent(gan, z)), noise=noise))
    assert torch.equal(truncated, plain)


def test_truncation_at_zero_collapses(tiny, body):
    gan = _gan(tiny, body)
    gan.w_avg.copy_(torch.randn(tiny.gan.latent_dim))
    noise = gan.zero_noise(1)
    a = synthesize_texture(gan, make_latents(gan, gan.sample_z(1), noise, psi=0.0))
    b = synthesize_texture(gan, make_latents(gan, gan.sample_z(1), noise, psi=0.0))
    assert torch.allclose(a, b)


def test_noise_changes_the_texture(tiny, body):
    gan = _gan(tiny, body)
    z = gan.sample_z(1)
    a = synthesize_texture(gan, make_latents(gan, z, gan.zero_noise(1)))
    b = synthesize_texture(gan, make_latents(gan, z, gan.sample_noise(1)))
    assert not torch.allclose(a, b)


def test_latent_checks(tiny, body):
    gan = _gan(tiny, body)
    with pytest.raises(ParameterError):
        map_latent(gan, torch.randn(1, tiny.gan.latent_dim + 1))
    bad = StyleLatents(w=gan.broadcast(map_latent(gan, gan.sample_z(1))), noise=gan.sample_noise(1)[:-1])
    with pytest.raises(ConfigurationError):
        synthesize_texture(gan, bad)


def test_style_mixing_swaps_late_levels(tiny, body):
    gan = _gan(tiny, body)
    z1, z2 = gan.sample_z(1), gan.sample_z(1)
    lat = make_latents(gan, z1, gan.zero_noise(1), mixing_z=z2, crossover=1)
    assert torch.equal(lat.w[0], map_latent(gan, z1))
    assert torch.equal(lat.w[1], map_latent(gan, z2))


def test_w_avg_estimate_is_seeded(tiny, body):
    gan = _gan(tiny, body)
    a = estimate_w_avg(gan, 50, torch.Generator().manual_seed(1), batch=16)
    b = estimate_w_avg(gan, 50, torch.Generator().manual_seed(1), batch=16)
    assert torch.equal(a, b)


def test_binary_discriminator_takes_stacked_pairs(tiny):
    ds = build_discriminators(tiny.gan)
    out = ds.binary(torch.rand(2, 8, 32, 32))
    assert out.shape[0] == 2
    assert ds.unary(torch.rand(2, 4, 32, 32)).shape[0] == 2
    no_bin = tiny.gan.model_copy(update={"ablation": AblationToggles(**ABLATIONS["no-bin-discr"])})
    assert build_discriminators(no_bin).binary is None


def test_fake_pair_shares_one_texture(tiny, body, frames):
    gan = _gan(tiny, body)
    renderer = NeuralRenderer(tiny.renderer)
    pair = _fake_pair(gan, renderer, body, frames, tiny.gan, np.random.default_rng(0), torch.Generator().manual_seed(0))
    assert pair.first.texture is pair.second.texture
    assert pair.first.image.shape == (tiny.gan.batch_size, 4, 32, 32)


def test_sampled_person_mask_covers_the_mesh(tiny, body):
    gan = _gan(tiny, body)
    renderer = NeuralRenderer(tiny.renderer)
    view = sample_person_image(gan, renderer, body, gan.sample_z(1), gan.sample_noise(1), a_pose(body),
                               np.zeros(body.n_shape), frontal_camera(32), 32, psi=0.7)
    mesh = torch.from_numpy(view.buffers[0].mask.astype(np.float32))
    assert (view.mask[0, 0] >= mesh).all()
    crop = face_crop(view.image, view.buffers[0], 8)
    assert crop is not None and crop.shape == (1, 4, 8, 8)


def test_training_needs_frame_pairs(tiny, tmp_path):
    generate_synthetic_dataset(tiny.world, tmp_path, tiny.body, n_people=1, frames_per_person=1)
    with pytest.raises(ConfigurationError):
        train_generative(load_dataset(tmp_path), tiny.gan, tiny.renderer)


def test_tiny_training_run(tiny, dataset_root, tmp_path):
    model = train_generative(load_dataset(dataset_root), tiny.gan, tiny.renderer, seed=0)
    log = model.log
    assert log.all_finite()
    assert len(log.series("d_total")) == tiny.gan.steps
    assert len(log.series("r1")) == 2
    assert log.series("wreg")
    assert model.gan.w_avg.abs().sum() > 0

    save_generative(tmp_path / "run", model)
    gan = load_generator(tmp_path / "run" / "generator.npz")
    lat = make_latents(model.gan, model.gan.sample_z(1, torch.Generator().manual_seed(3)), model.gan.zero_noise(1))
    lat2 = StyleLatents(w=lat.w.clone(), noise=lat.noise)
    with torch.no_grad():
        assert torch.allclose(synthesize_texture(model.gan, lat), synthesize_texture(gan, lat2))
    back = load_generative(tmp_path / "run")
    assert back.predictor is not None
    assert torch.equal(back.gan.w_avg, model.gan.w_avg)


def test_ablated_training_run(tiny, dataset_root):
    cfg = tiny.gan.model_copy(update={"ablation": AblationToggles(**ABLATIONS["no-face-discr"]), "steps": 2})
    model = train_generative(load_dataset(dataset_root), cfg, tiny.renderer, seed=1)
    assert model.discriminators.face is None
    assert not model.log.series("d_face")
