"""Desk-scale end-to-end runs. Minutes to hours on CPU; run with `pytest -m slow`."""
import math
import pytest
import torch

from neuraldress.engine.dataset import generate_synthetic_dataset, load_dataset, load_frames
from neuraldress.engine.encoders import StyleEncoder, train_a_encoder
from neuraldress.engine.fitting import fit_video_avatar, pretrain_renderer
from neuraldress.engine.gan import TextureGAN, spectral_texture, train_generative
from neuraldress.engine.loader import load_config
from neuraldress.engine.losses import dice_loss
from neuraldress.engine.metrics import psnr, view_consistency
from neuraldress.engine.renderer import NeuralRenderer, render_avatar
from neuraldress.engine.settings import ABLATIONS
from neuraldress.engine.trace import TrainingLog

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def desk():
    return load_config()


def test_video_avatar_reaches_target_quality(desk, tmp_path):
    # person_000 is fitted on 8 views and held out on a ninth; four others pretrain the renderer
    generate_synthetic_dataset(desk.world, tmp_path, desk.body, n_people=5, frames_per_person=9)
    ds = load_dataset(tmp_path)
    video = desk.video
    others = [r for r in ds.records if r.person_id != "person_000"]
    renderer = NeuralRenderer(desk.renderer)
    pretrain_renderer(load_frames(ds, video.image_size, others), ds.body, renderer, video, desk.texture, seed=0)

    person = load_frames(ds, video.image_size, ds.by_person("person_000"))
    tlog = TrainingLog()
    avatar = fit_video_avatar(person.subset(list(range(8))), ds.body, renderer, video, desk.texture,
                              seed=0, training_log=tlog)
    assert tlog.all_finite()

    with torch.no_grad():
        rec = person.records[8]
        res = render_avatar(renderer, avatar, ds.body, rec.pose, person.cameras[8], video.image_size, finalize=True)
        gt_mask = person.masks[8:9, :1]
        pred = res.rgb * res.masks[:, :1]
        gt = person.rgb[8:9] * gt_mask
        assert psnr(pred, gt) > 25.0
        assert float(dice_loss(res.masks[:, :1], gt_mask)) < 0.05


def test_a_encoder_improves_on_its_initialization(desk, tmp_path):
    cfg = desk.gan
    body_ds = generate_synthetic_dataset(desk.world, tmp_path, desk.body, n_people=1, frames_per_person=1)
    body = load_dataset(body_ds.root).body
    gan = TextureGAN(cfg, spectral_texture(body, cfg.texture_resolution, cfg.spectral_channels))
    tlog = TrainingLog()
    train_a_encoder(gan, NeuralRenderer(desk.renderer), body, desk.encoder, seed=0, training_log=tlog)
    before, after = tlog.series("val_l1")
    assert after <= 0.7 * before


def test_binary_discriminator_helps_view_consistency(desk, tmp_path):
    world = desk.world.model_copy(update={"image_size": 64, "texture_resolution": 64})
    generate_synthetic_dataset(world, tmp_path, desk.body, n_people=25, frames_per_person=8)
    ds = load_dataset(tmp_path)
    encoder_cfg = desk.encoder.model_copy(update={"image_size": 64})
    scores = {}
    for name in ("full", "no-bin-discr"):
        toggles = desk.gan.ablation.model_copy(update=ABLATIONS[name])
        gcfg = desk.gan.model_copy(update={"ablation": toggles, "steps": 3000, "image_size": 64, "face_crop_size": 16})
        model = train_generative(ds, gcfg, desk.renderer, seed=0)
        assert model.log.all_finite()
        torch.manual_seed(0)
        encoder = StyleEncoder(encoder_cfg, len(model.gan.levels), gcfg.latent_dim)
        with torch.no_grad():
            scores[name] = view_consistency(model.gan, model.renderer, encoder, ds.body, desk.metrics, seed=0)
    assert all(math.isfinite(v) for v in scores.values())
    assert scores["full"] <= scores["no-bin-discr"]
