from __future__ import annotations
import copy
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .body import HEAD, LEFT_HAND, RIGHT_HAND, ArticulatedBody, pose_mesh, rasterize_vertex_attributes, region_indicator, uv_coverage
from .dataset import FrameSet
from .discriminators import PatchDiscriminator, StyleDiscriminator, crop_batch
from .encoders import StyleEncoder, average_latents, encode, frozen
from .errors import ConfigurationError, DataError, ParameterError
from .extractors import resolve_extractor
from .gan import StyleLatents, TextureGAN, synthesize_texture
from .losses import dice_loss, feature_matching_loss, lsgan_discriminator_loss, lsgan_generator_loss, mipmap_reg, perceptual_loss
from .raster import RasterBuffers, buffers_to_tensors, rasterize
from .renderer import Avatar, NeuralRenderer, finalize_mask
from .settings import FitSchedule, FitStage, TextureConfig, VideoFitConfig, VideoPhaseConfig, config_hash
from .texture import NeuralTexture, assemble_input, composite_texture, texture_map
from .trace import TrainingLog

log = logging.getLogger(__name__)

Phase = Literal["phase1", "phase2"]


@dataclass(eq=False)
class FrameBuffers:
    """Raster buffers of every frame at the frames' resolution, plus stacked tensors."""

    buffers: List[RasterBuffers]
    uv: torch.Tensor
    mesh_mask: torch.Tensor


def rasterize_frames(frames: FrameSet, body: ArticulatedBody) -> FrameBuffers:
    size = frames.rgb.shape[-1]
    for r in frames.records:
        if len(r.pose) != body.n_joints:
            raise DataError(f"frame {r.frame_id} has no pose record for this body")
    buffers = [
        rasterize(pose_mesh(body, r.pose, r.shape), cam, size) for r, cam in zip(frames.records, frames.cameras)
    ]
    uv, mask = buffers_to_tensors(buffers, dtype=frames.rgb.dtype)
    return FrameBuffers(buffers, uv, mask)


def shared_shape(frames: FrameSet, person_id: Optional[str] = None) -> np.ndarray:
    recs = frames.records if person_id is None else [frames.records[i] for i in frames.person_index[person_id]]
    shapes = {tuple(r.shape) for r in recs}
    if len(shapes) != 1:
        raise DataError("frames of one person must share a single body shape")
    return np.asarray(next(iter(shapes)))


@dataclass(eq=False)
class VideoDiscriminators:
    full: PatchDiscriminator
    face: PatchDiscriminator
    hands: PatchDiscriminator

    def parameters(self):
        for d in (self.full, self.face, self.hands):
            yield from d.parameters()


def _hand_regions(buffers: Sequence[RasterBuffers]) -> list[np.ndarray]:
    """Left hands of the batch followed by right hands."""
    return [b.region == LEFT_HAND for b in buffers] + [b.region == RIGHT_HAND for b in buffers]


def _crop_pair(fake: torch.Tensor, real: torch.Tensor, regions: list[np.ndarray], size: int):
    """Crops of fake and real around the same boxes; (None, None) when no region is visible."""
    reps = len(regions) // fake.shape[0]
    f, _ = crop_batch(fake.repeat(reps, 1, 1, 1), regions, size)
    r, _ = crop_batch(real.repeat(reps, 1, 1, 1), regions, size)
    return f, r


def _adversarial_terms(d: PatchDiscriminator, fake: torch.Tensor, real: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(generator adversarial, feature matching) for one patch discriminator."""
    real_feats = [h.detach() for h in d.features(real)]
    fake_feats = d.features(fake)
    return lsgan_generator_loss(d.out(fake_feats[-1])), feature_matching_loss(real_feats, fake_feats)


def _fit_loop(
    frames: FrameSet,
    fb: FrameBuffers,
    renderer: NeuralRenderer,
    textures: Dict[str, NeuralTexture],
    config: VideoFitConfig,
    phase: VideoPhaseConfig,
    train_renderer: bool,
    seed: int,
    tlog: TrainingLog,
) -> None:
    """Joint optimization of per-person textures (and optionally the renderer) on posed frames."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    wt = phase.weights
    extractor = resolve_extractor(config.extractor)
    w = config.discriminator_width
    ds = VideoDiscriminators(
        full=PatchDiscriminator(3, frames.rgb.shape[-1], w),
        face=PatchDiscriminator(3, config.face_crop_size, w),
        hands=PatchDiscriminator(3, config.hand_crop_size, w),
    )
    renderer.requires_grad_(train_renderer)
    betas = (phase.beta1, 0.999)
    tex_params = [p for t in textures.values() for p in t.parameters()]
    opt_t = torch.optim.Adam(tex_params, lr=phase.lr_texture, betas=betas)
    opt_r = torch.optim.Adam(renderer.parameters(), lr=phase.lr_renderer, betas=betas) if train_renderer else None
    opt_d = torch.optim.Adam(list(ds.parameters()), lr=phase.lr_discriminator, betas=betas)
    owner = [r.person_id for r in frames.records]
    n = len(frames)
    B = min(config.batch_size, n)

    for step in range(config.steps):
        idx = [int(i) for i in rng.choice(n, size=B, replace=False)]
        tex = torch.cat([texture_map(textures[owner[i]]) for i in idx], dim=0)
        mesh = fb.mesh_mask[idx]
        rgb, logits = renderer(assemble_input(fb.uv[idx], mesh, tex))
        probs = torch.sigmoid(logits)
        pred_masks = torch.cat([finalize_mask(probs[:, :1], mesh), probs[:, 1:]], dim=1)
        target_masks = frames.masks[idx]
        fake = rgb * pred_masks[:, :1]
        real = frames.rgb[idx] * target_masks[:, :1]
        buffers = [fb.buffers[i] for i in idx]
        heads = [frames.masks[i, 1].numpy() > 0.5 for i in idx]
        fake_face, real_face = _crop_pair(fake, real, heads, config.face_crop_size)
        fake_hands, real_hands = _crop_pair(fake, real, _hand_regions(buffers), config.hand_crop_size)

        # discriminators
        d_loss = lsgan_discriminator_loss(ds.full(real), ds.full(fake.detach()))
        if fake_face is not None:
            d_loss = d_loss + lsgan_discriminator_loss(ds.face(real_face), ds.face(fake_face.detach()))
        if fake_hands is not None:
            d_loss = d_loss + lsgan_discriminator_loss(ds.hands(real_hands), ds.hands(fake_hands.detach()))
        opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        opt_d.step()

        # texture / renderer
        for p in ds.parameters():
            p.requires_grad_(False)
        terms: Dict[str, torch.Tensor] = {}
        terms["vgg"] = wt.vgg * perceptual_loss(fake, real, extractor)
        terms["segm"] = wt.segm * sum(dice_loss(target_masks[:, c], pred_masks[:, c]) for c in range(3))
        adv, fm = _adversarial_terms(ds.full, fake, real)
        terms["adv"] = wt.adv * adv
        terms["fm"] = wt.fm * fm
        if fake_face is not None:
            terms["vggface"] = wt.vggface * perceptual_loss(fake_face, real_face, extractor)
            adv_f, fm_f = _adversarial_terms(ds.face, fake_face, real_face)
            terms["advface"] = wt.advface * adv_f
            terms["fm"] = terms["fm"] + wt.fm * fm_f
        else:
            tlog.count("face_crop_skipped")
        if fake_hands is not None:
            adv_h, _ = _adversarial_terms(ds.hands, fake_hands, real_hands)
            terms["advhands"] = wt.advhands * adv_h
        batch_people = sorted({owner[i] for i in idx})
        terms["mipmap"] = wt.mipmap * sum(mipmap_reg(textures[p]) for p in batch_people) / len(batch_people)
        loss = sum(terms.values())
        opt_t.zero_grad(set_to_none=True)
        if opt_r is not None:
            opt_r.zero_grad(set_to_none=True)
        loss.backward()
        opt_t.step()
        if opt_r is not None:
            opt_r.step()
        for p in ds.parameters():
            p.requires_grad_(True)

        tlog.extend(step, {k: float(v.detach()) for k, v in terms.items()})
        tlog.add(step, "d_total", float(d_loss.detach()))
        with torch.no_grad():
            tlog.add(step, "dice_fg", float(dice_loss(target_masks[:, :1], pred_masks[:, :1])))
        if step % 100 == 0:
            log.info("video fit step %d: loss=%.4f", step, float(loss))
    renderer.requires_grad_(True)


def fit_video_avatar(
    frames: FrameSet,
    body: ArticulatedBody,
    renderer: NeuralRenderer,
    config: VideoFitConfig,
    texture_config: TextureConfig,
    phase: Phase = "phase2",
    train_renderer: bool = False,
    seed: int = 0,
    training_log: Optional[TrainingLog] = None,
) -> Avatar:
    """Neural texture of one person fitted by backpropagation through the renderer.

    With `train_renderer=False` the renderer parameters are left untouched.
    """
    people = sorted(frames.person_index)
    if len(people) != 1:
        raise DataError(f"video fitting expects frames of one person, got {len(people)}")
    shape = shared_shape(frames)
    if texture_config.channels != renderer.texture_channels:
        raise ConfigurationError("texture and renderer disagree on channel count")
    fb = rasterize_frames(frames, body)
    texture = NeuralTexture.from_config(texture_config, torch.Generator().manual_seed(seed))
    tlog = training_log if training_log is not None else TrainingLog()
    phase_cfg = config.phase1 if phase == "phase1" else config.phase2
    _fit_loop(frames, fb, renderer, {people[0]: texture}, config, phase_cfg, train_renderer, seed, tlog)
    provenance = {"kind": "video", "phase": phase, "seed": seed, "steps": config.steps,
                  "config_hash": config_hash(config), "person": people[0]}
    return Avatar(shape=shape, texture=texture, provenance=provenance)


def pretrain_renderer(
    frames: FrameSet,
    body: ArticulatedBody,
    renderer: NeuralRenderer,
    config: VideoFitConfig,
    texture_config: TextureConfig,
    seed: int = 0,
    training_log: Optional[TrainingLog] = None,
) -> Dict[str, Avatar]:
    """Trains the renderer jointly with one texture per person (first phase)."""
    if texture_config.channels != renderer.texture_channels:
        raise ConfigurationError("texture and renderer disagree on channel count")
    people = sorted(frames.person_index)
    shapes = {p: shared_shape(frames, p) for p in people}
    gen = torch.Generator().manual_seed(seed)
    textures = {p: NeuralTexture.from_config(texture_config, gen) for p in people}
    fb = rasterize_frames(frames, body)
    tlog = training_log if training_log is not None else TrainingLog()
    _fit_loop(frames, fb, renderer, textures, config, config.phase1, True, seed, tlog)
    return {
        p: Avatar(shape=shapes[p], texture=textures[p],
                  provenance={"kind": "video", "phase": "phase1", "seed": seed, "person": p})
        for p in people
    }


# --- few-shot fitting -------------------------------------------------------

@dataclass
class StageReport:
    name: str
    variables: List[str]
    iterations: int
    lr: float
    losses: List[float] = field(default_factory=list)

    @property
    def first(self) -> float:
        return self.losses[0] if self.losses else float("nan")

    @property
    def last(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


@dataclass(eq=False)
class FewShotResult:
    avatar: Avatar
    reports: List[StageReport]
    log: TrainingLog
    generator: TextureGAN  # the fitted copy
    noise: List[torch.Tensor]


def check_schedule(schedule: FitSchedule) -> None:
    """Once a stage optimizes the texture directly, later stages cannot go back to the generator."""
    seen_texture = False
    for stage in schedule.stages:
        if seen_texture and set(stage.variables) & {"latents", "generator", "noise"}:
            raise ConfigurationError(
                f"stage '{stage.name}' optimizes {stage.variables} after the texture was detached from the generator"
            )
        seen_texture = seen_texture or "texture" in stage.variables


def _parameter_gap(params: Sequence[torch.Tensor], anchors: Sequence[torch.Tensor]) -> torch.Tensor:
    total = sum((p - a).abs().sum() for p, a in zip(params, anchors))
    return total / sum(p.numel() for p in params)


def _resize(x: torch.Tensor, size: int) -> torch.Tensor:
    if x.shape[-1] == size:
        return x
    return F.interpolate(x, size=(size, size), mode="area")


def fit_fewshot(
    frames: FrameSet,
    body: ArticulatedBody,
    gan: TextureGAN,
    renderer: NeuralRenderer,
    encoder: StyleEncoder,
    schedule: FitSchedule,
    face_discriminator: Optional[StyleDiscriminator] = None,
    seed: int = 0,
    training_log: Optional[TrainingLog] = None,
) -> FewShotResult:
    """Staged optimization from the encoder's averaged prediction to a final texture.

    The generator is copied; the caller's generator and renderer are not modified.
    """
    check_schedule(schedule)
    if gan.config.texture_channels != renderer.texture_channels:
        raise ConfigurationError("generator and renderer disagree on texture channels")
    if encoder.n_levels != len(gan.levels):
        raise ConfigurationError("encoder and generator disagree on the number of style levels")
    shape = shared_shape(frames)
    tlog = training_log if training_log is not None else TrainingLog()
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    extractor = resolve_extractor(schedule.extractor)
    fb = rasterize_frames(frames, body)

    work = copy.deepcopy(gan)
    work.requires_grad_(False)
    anchors_g = [p.detach().clone() for p in gan.parameters()]

    target_mask = frames.masks[:, :1]
    target = frames.rgb * target_mask
    with torch.no_grad():
        size = encoder.config.image_size
        w0 = average_latents(encode(encoder, _resize(frames.rgb, size), _resize(target_mask, size))).detach()
    w = nn.Parameter(w0.clone(), requires_grad=False)
    noise = [nn.Parameter(n, requires_grad=False) for n in work.sample_noise(1, gen)]
    texture: Optional[NeuralTexture] = None
    texture_anchor: Optional[torch.Tensor] = None
    heads = [frames.masks[i, 1].numpy() > 0.5 for i in range(len(frames))]
    real_face, _ = crop_batch(target, heads, schedule.face_crop_size)
    real_face4, _ = crop_batch(torch.cat([target, target_mask], 1), heads, schedule.face_crop_size)

    def current_texture() -> torch.Tensor:
        if texture is not None:
            return composite_texture(texture)
        return synthesize_texture(work, StyleLatents(w=w, noise=list(noise)))

    def objective(stage: FitStage) -> Dict[str, torch.Tensor]:
        sw = stage.weights
        tex = current_texture()
        rgb, logits = renderer(assemble_input(fb.uv, fb.mesh_mask, tex))
        mask = finalize_mask(torch.sigmoid(logits[:, :1]), fb.mesh_mask)
        pred = rgb * mask
        terms = {"lpips": sw.lpips * perceptual_loss(pred, target, extractor),
                 "mse": sw.mse * F.mse_loss(pred, target)}
        if sw.encoder_deviation:
            terms["encoder_deviation"] = sw.encoder_deviation * (w - w0).abs().mean()
        if sw.generator_deviation:
            terms["generator_deviation"] = sw.generator_deviation * _parameter_gap(list(work.parameters()), anchors_g)
        if sw.texture_deviation and texture_anchor is not None:
            terms["texture_deviation"] = sw.texture_deviation * (tex - texture_anchor).abs().mean()
        if real_face is not None and (sw.face_lpips or sw.face_fm):
            fake_face, _ = crop_batch(pred, heads, schedule.face_crop_size)
            if sw.face_lpips:
                terms["face_lpips"] = sw.face_lpips * perceptual_loss(fake_face, real_face, extractor)
            if sw.face_fm and face_discriminator is not None:
                fake_face4, _ = crop_batch(torch.cat([pred, mask], 1), heads, schedule.face_crop_size)
                real_feats = [h.detach() for h in face_discriminator.features(real_face4)]
                terms["face_fm"] = sw.face_fm * feature_matching_loss(real_feats, face_discriminator.features(fake_face4))
        return terms

    held = [renderer] if face_discriminator is None else [renderer, face_discriminator]
    reports: List[StageReport] = []
    step = 0
    with frozen(*held):
        for stage in schedule.stages:
            variables = set(stage.variables)
            if "texture" in variables and texture is None:
                with torch.no_grad():
                    texture = NeuralTexture.from_map(current_texture().detach())
                texture_anchor = composite_texture(texture).detach()
            w.requires_grad_("latents" in variables)
            for n in noise:
                n.requires_grad_("noise" in variables)
            work.requires_grad_("generator" in variables)
            params: list[torch.Tensor] = []
            if "latents" in variables:
                params.append(w)
            if "noise" in variables:
                params += list(noise)
            if "generator" in variables:
                params += list(work.parameters())
            if "texture" in variables:
                params += list(texture.parameters())
            opt = torch.optim.Adam(params, lr=stage.lr)
            report = StageReport(stage.name, list(stage.variables), stage.iterations, stage.lr)
            for _ in range(stage.iterations):
                terms = objective(stage)
                loss = sum(terms.values())
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                report.losses.append(float(loss.detach()))
                tlog.extend(step, {f"{stage.name}/{k}": float(v.detach()) for k, v in terms.items()})
                step += 1
            log.info("stage %s: %d iterations, loss %.4f -> %.4f", stage.name, stage.iterations, report.first, report.last)
            reports.append(report)

    work.requires_grad_(False)
    if texture is None:
        with torch.no_grad():
            texture = NeuralTexture.from_map(current_texture().detach())
    provenance = {"kind": "fewshot", "seed": seed, "schedule_hash": schedule.schedule_hash(), "images": len(frames)}
    avatar = Avatar(shape=shape, texture=texture, latents=w.detach()[:, 0].numpy().copy(), provenance=provenance)
    return FewShotResult(avatar, reports, tlog, work, [n.detach() for n in noise])


# --- redressing -------------------------------------------------------------

def head_uv_mask(body: ArticulatedBody, resolution: int) -> np.ndarray:
    """Texels of the atlas whose interpolated head indicator exceeds one half."""
    head = rasterize_vertex_attributes(body, region_indicator(body, [HEAD]), resolution)
    return (head > 0.5) & (uv_coverage(body, resolution) > 0)


def redress(head_source: Avatar, body_source: Avatar, body: ArticulatedBody) -> Avatar:
    """Head texels from the first avatar, everything else from the second."""
    a, b = head_source.texture, body_source.texture
    if a.channels != b.channels or a.top_resolution != b.top_resolution:
        raise ParameterError(
            f"textures differ: {a.channels}ch/{a.top_resolution}p vs {b.channels}ch/{b.top_resolution}p"
        )
    R = a.top_resolution
    mask = torch.from_numpy(head_uv_mask(body, R))[None, None]
    with torch.no_grad():
        ta, tb = composite_texture(a), composite_texture(b)
        out = torch.where(mask, ta, tb)
    provenance = {"kind": "redress", "head": head_source.provenance, "body": body_source.provenance}
    return Avatar(shape=np.asarray(body_source.shape).copy(), texture=NeuralTexture.from_map(out, a.resolutions[0]),
                  provenance=provenance)
