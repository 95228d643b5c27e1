import numpy as np
import pytest
import torch

from neuraldress.engine.encoders import StyleEncoder, average_latents, encode
from neuraldress.engine.errors import ConfigurationError, DataError, ParameterError
from neuraldress.engine.fitting import (
    check_schedule, fit_fewshot, fit_video_avatar, head_uv_mask, pretrain_renderer, redress,
)
from neuraldress.engine.gan import StyleLatents, TextureGAN, spectral_texture, synthesize_texture
from neuraldress.engine.renderer import Avatar, NeuralRenderer
from neuraldress.engine.settings import FitSchedule, FitStage
from neuraldress.engine.texture import NeuralTexture, composite_texture
from neuraldress.engine.trace import TrainingLog


def _one_person(frames):
    return frames.subset(frames.person_index["person_000"])


def _fewshot_models(tiny, body):
    cfg = tiny.gan
    gan = TextureGAN(cfg, spectral_texture(body, cfg.texture_resolution, cfg.spectral_channels))
    return gan, NeuralRenderer(tiny.renderer), StyleEncoder(tiny.encoder, len(gan.levels), cfg.latent_dim)


def _checksum(module):
    return [p.detach().clone() for p in module.parameters()]


def _unchanged(before, module):
    return all(torch.equal(a, b) for a, b in zip(before, module.parameters()))


def test_default_schedule():
    s = FitSchedule()
    assert [st.name for st in s.stages] == ["latents", "generator", "noise", "texture"]
    assert [st.iterations for st in s.stages] == [100, 70, 50, 100]
    assert [st.lr for st in s.stages] == [0.01, 0.01, 0.1, 0.15]
    check_schedule(s)


def test_generator_after_texture_is_rejected():
    s = FitSchedule(stages=[
        FitStage(name="t", variables=["texture"], iterations=1, lr=0.1),
        FitStage(name="l", variables=["latents"], iterations=1, lr=0.1),
    ])
    with pytest.raises(ConfigurationError):
        check_schedule(s)


def test_texture_stage_stands_alone():
    with pytest.raises(ValueError):
        FitStage(name="x", variables=["texture", "noise"], iterations=1, lr=0.1)


def test_video_fit_leaves_frozen_renderer_alone(tiny, body, frames):
    renderer = NeuralRenderer(tiny.renderer)
    before = _checksum(renderer)
    tlog = TrainingLog()
    avatar = fit_video_avatar(_one_person(frames), body, renderer, tiny.video, tiny.texture, seed=0, training_log=tlog)
    assert _unchanged(before, renderer)
    assert avatar.channels == tiny.texture.channels
    assert avatar.provenance["person"] == "person_000"
    assert len(tlog.series("dice_fg")) == tiny.video.steps
    assert tlog.all_finite()


def test_video_fit_needs_one_person(tiny, body, frames):
    with pytest.raises(DataError):
        fit_video_avatar(frames, body, NeuralRenderer(tiny.renderer), tiny.video, tiny.texture)


def test_video_fit_is_deterministic(tiny, body, frames):
    renderer = NeuralRenderer(tiny.renderer)
    a = fit_video_avatar(_one_person(frames), body, renderer, tiny.video, tiny.texture, seed=2)
    b = fit_video_avatar(_one_person(frames), body, renderer, tiny.video, tiny.texture, seed=2)
    assert torch.equal(composite_texture(a.texture), composite_texture(b.texture))


def test_pretraining_updates_the_renderer(tiny, body, frames):
    renderer = NeuralRenderer(tiny.renderer)
    before = _checksum(renderer)
    avatars = pretrain_renderer(frames, body, renderer, tiny.video, tiny.texture, seed=0)
    assert sorted(avatars) == ["person_000", "person_001"]
    assert not _unchanged(before, renderer)


def test_fewshot_leaves_inputs_untouched(tiny, body, frames):
    gan, renderer, encoder = _fewshot_models(tiny, body)
    g0, r0 = _checksum(gan), _checksum(renderer)
    tlog = TrainingLog()
    result = fit_fewshot(_one_person(frames), body, gan, renderer, encoder, tiny.fewshot, seed=0, training_log=tlog)
    assert _unchanged(g0, gan)
    assert _unchanged(r0, renderer)
    assert [r.name for r in result.reports] == ["latents", "generator", "noise", "texture"]
    assert all(len(r.losses) == 2 for r in result.reports)
    assert tlog.series("latents/lpips")
    assert result.avatar.provenance["schedule_hash"] == tiny.fewshot.schedule_hash()
    assert result.avatar.latents.shape == (len(gan.levels), tiny.gan.latent_dim)


def test_latent_deviation_starts_at_zero(tiny, body, frames):
    gan, renderer, encoder = _fewshot_models(tiny, body)
    tlog = TrainingLog()
    fit_fewshot(_one_person(frames), body, gan, renderer, encoder, tiny.fewshot, seed=0, training_log=tlog)
    assert tlog.series("latents/encoder_deviation")[0] == 0.0
    assert tlog.series("generator/generator_deviation")[0] == 0.0
    assert tlog.series("texture/texture_deviation")[0] == 0.0


def test_undeclared_latents_stay_at_the_encoder_average(tiny, body, frames):
    gan, renderer, encoder = _fewshot_models(tiny, body)
    person = _one_person(frames)
    only_noise = FitSchedule(image_size=32, face_crop_size=16, stages=[
        FitStage(name="noise", variables=["noise"], iterations=3, lr=0.1),
    ])
    result = fit_fewshot(person, body, gan, renderer, encoder, only_noise, seed=0)
    with torch.no_grad():
        w0 = average_latents(encode(encoder, person.rgb, person.masks[:, :1]))
    assert np.array_equal(result.avatar.latents, w0[:, 0].numpy())

    only_latents = only_noise.model_copy(update={"stages": [
        FitStage(name="latents", variables=["latents"], iterations=3, lr=0.1),
    ]})
    moved = fit_fewshot(person, body, gan, renderer, encoder, only_latents, seed=0)
    assert not np.array_equal(moved.avatar.latents, w0[:, 0].numpy())


def test_fewshot_is_deterministic(tiny, body, frames):
    gan, renderer, encoder = _fewshot_models(tiny, body)
    a = fit_fewshot(_one_person(frames), body, gan, renderer, encoder, tiny.fewshot, seed=1)
    b = fit_fewshot(_one_person(frames), body, gan, renderer, encoder, tiny.fewshot, seed=1)
    assert torch.equal(composite_texture(a.avatar.texture), composite_texture(b.avatar.texture))


def test_fewshot_level_mismatch(tiny, body, frames):
    gan, renderer, _ = _fewshot_models(tiny, body)
    encoder = StyleEncoder(tiny.encoder, len(gan.levels) + 1, tiny.gan.latent_dim)
    with pytest.raises(ConfigurationError):
        fit_fewshot(_one_person(frames), body, gan, renderer, encoder, tiny.fewshot)


def _avatar(seed, channels=4, resolution=16):
    tex = NeuralTexture(channels, resolution, 8, init_std=1.0, generator=torch.Generator().manual_seed(seed))
    return Avatar(shape=np.full(4, float(seed)), texture=tex, provenance={"seed": seed})


def test_redress_with_itself_is_identity(body):
    a = _avatar(0)
    out = redress(a, a, body)
    assert torch.equal(composite_texture(out.texture), composite_texture(a.texture))


def test_redress_partitions_the_atlas(body):
    a, b = _avatar(0, resolution=64), _avatar(1, resolution=64)
    out = redress(a, b, body)
    mask = torch.from_numpy(head_uv_mask(body, 64))[None, None].expand(1, 4, 64, 64)
    assert mask.any()
    tex, ta, tb = (composite_texture(x) for x in (out.texture, a.texture, b.texture))
    assert torch.equal(tex[mask], ta.detach()[mask])
    assert torch.equal(tex[~mask], tb.detach()[~mask])
    assert np.array_equal(out.shape, b.shape)


def test_redress_rejects_mismatched_textures(body):
    with pytest.raises(ParameterError):
        redress(_avatar(0), _avatar(1, resolution=32), body)


def _state(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _same_state(before, module):
    after = module.state_dict()
    return before.keys() == after.keys() and all(torch.equal(before[k], after[k]) for k in before)


@pytest.mark.parametrize("declared", ["latents", "generator", "noise", "texture"])
def test_single_stage_moves_only_what_it_declares(tiny, body, frames, declared):
    gan, renderer, encoder = _fewshot_models(tiny, body)
    person = _one_person(frames)
    gan_state, renderer_state = _state(gan), _state(renderer)
    renderer_flags = [p.requires_grad for p in renderer.parameters()]
    with torch.no_grad():
        w0 = average_latents(encode(encoder, person.rgb, person.masks[:, :1]))
        noise0 = gan.sample_noise(1, torch.Generator().manual_seed(0))
        texture0 = synthesize_texture(gan, StyleLatents(w=w0, noise=noise0))
    schedule = FitSchedule(image_size=32, face_crop_size=16, stages=[
        FitStage(name=declared, variables=[declared], iterations=2, lr=0.1),
    ])
    result = fit_fewshot(person, body, gan, renderer, encoder, schedule, seed=0)

    kept = {
        "latents": np.array_equal(result.avatar.latents, w0[:, 0].numpy()),
        "generator": _same_state(gan_state, result.generator),
        "noise": all(torch.equal(a, b) for a, b in zip(noise0, result.noise)),
    }
    if declared == "texture":
        assert not torch.equal(composite_texture(result.avatar.texture), texture0)
    else:
        assert not kept.pop(declared)
    assert all(kept.values()), kept
    assert _same_state(gan_state, gan)
    assert _same_state(renderer_state, renderer)
    assert [p.requires_grad for p in renderer.parameters()] == renderer_flags
