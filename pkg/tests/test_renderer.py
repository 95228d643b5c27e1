import numpy as np
import pytest
import torch

from neuraldress.engine.body import a_pose, pose_mesh
from neuraldress.engine.camera import frontal_camera
from neuraldress.engine.errors import ConfigurationError, ParameterError
from neuraldress.engine.renderer import (
    Avatar, NeuralRenderer, compose_on_background, finalize_mask, load_avatar, load_renderer, render_avatar,
    save_avatar, save_renderer,
)
from neuraldress.engine.texture import NeuralTexture, render_input


def test_renderer_output_channels(tiny):
    r = NeuralRenderer(tiny.renderer)
    rgb, logits = r(torch.rand(2, tiny.texture.channels + 2, 32, 32))
    assert rgb.shape == (2, 3, 32, 32)
    assert logits.shape == (2, 3, 32, 32)
    assert ((rgb >= 0) & (rgb <= 1)).all()
    assert r.forward_stacked(torch.rand(1, tiny.texture.channels + 2, 32, 32)).shape[1] == 6


def test_renderer_input_checks(tiny):
    r = NeuralRenderer(tiny.renderer)
    with pytest.raises(ConfigurationError):
        r(torch.rand(1, tiny.texture.channels + 3, 32, 32))
    with pytest.raises(ParameterError):
        r(torch.rand(1, tiny.texture.channels + 2, 30, 30))


def test_finalized_mask_covers_the_mesh():
    pred = torch.rand(1, 1, 8, 8) * 0.5
    mesh = torch.zeros(1, 1, 8, 8)
    mesh[..., 2:5, 2:5] = 1.0
    out = finalize_mask(pred, mesh)
    assert (out >= mesh).all()
    assert (out >= pred).all()
    assert torch.equal(out[mesh == 0], pred[mesh == 0])


def test_compose_on_black():
    rgb = torch.ones(1, 3, 4, 4)
    mask = torch.zeros(1, 1, 4, 4)
    mask[..., :2] = 1.0
    out = compose_on_background(rgb, mask)
    assert out[..., :2].eq(1).all() and out[..., 2:].eq(0).all()


def test_render_avatar(tiny, body):
    r = NeuralRenderer(tiny.renderer)
    avatar = Avatar(shape=np.zeros(body.n_shape), texture=NeuralTexture.from_config(tiny.texture))
    res = render_avatar(r, avatar, body, a_pose(body), frontal_camera(32), 32, finalize=True)
    assert res.rgb.shape == (1, 3, 32, 32)
    mesh = torch.from_numpy(res.buffers.mask.astype(np.float32))
    assert (res.masks[0, 0] >= mesh).all()


def test_render_avatar_channel_mismatch(tiny, body):
    r = NeuralRenderer(tiny.renderer)
    avatar = Avatar(shape=np.zeros(body.n_shape), texture=NeuralTexture(channels=tiny.texture.channels + 1, top_resolution=16))
    with pytest.raises(ConfigurationError):
        render_avatar(r, avatar, body, a_pose(body), frontal_camera(32), 32)


@pytest.mark.filterwarnings("error::DeprecationWarning")
def test_avatar_round_trip(tmp_path, tiny, body):
    avatar = Avatar(
        shape=np.arange(body.n_shape, dtype=np.float64),
        texture=NeuralTexture.from_config(tiny.texture),
        latents=np.ones((3, 8), dtype=np.float32),
        provenance={"seed": 3},
    )
    save_avatar(tmp_path / "a.npz", avatar)
    back = load_avatar(tmp_path / "a.npz")
    assert np.array_equal(back.shape, avatar.shape)
    assert np.array_equal(back.latents, avatar.latents)
    assert back.provenance == {"seed": 3}
    assert back.resolution == avatar.resolution


def test_renderer_round_trip(tmp_path, tiny):
    r = NeuralRenderer(tiny.renderer)
    save_renderer(tmp_path / "r.npz", r)
    back = load_renderer(tmp_path / "r.npz")
    x = torch.rand(1, tiny.texture.channels + 2, 32, 32)
    assert torch.equal(back(x)[0], r(x)[0])
    with pytest.raises(ConfigurationError):
        save_avatar(tmp_path / "a.npz", Avatar(shape=np.zeros(1), texture=NeuralTexture(2, 8, 8)))
        load_renderer(tmp_path / "a.npz")


def test_render_input_layout(tiny, body):
    tex = NeuralTexture.from_config(tiny.texture)
    mesh = pose_mesh(body, a_pose(body), np.zeros(body.n_shape))
    x, buffers = render_input(mesh, frontal_camera(32), tex, 32)
    assert x.shape == (1, tiny.texture.channels + 2, 32, 32)
    outside = torch.from_numpy(buffers.mask == 0)
    assert (x[0][:, outside] == 0).all()
    uv = torch.from_numpy(buffers.uv).permute(2, 0, 1).to(x.dtype)
    assert torch.equal(x[0, -2:], uv * torch.from_numpy(buffers.mask).to(x.dtype))
