from __future__ import annotations
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .body import ArticulatedBody, a_pose, pose_mesh
from .camera import orbit_camera
from .container import load_state, save_module
from .dataset import FrameSet
from .errors import ConfigurationError, DataError, ParameterError
from .extractors import resolve_extractor
from .gan import StyleLatents, TextureGAN, render_view, synthesize_texture
from .layers import EqualizedLinear
from .losses import perceptual_loss
from .raster import rasterize
from .renderer import NeuralRenderer
from .settings import EncoderConfig
from .trace import TrainingLog

log = logging.getLogger(__name__)


def _down(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=2, padding=1),
        nn.LeakyReLU(0.2),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.LeakyReLU(0.2),
    )


class MapToStyle(nn.Module):
    """Strided convolutions down to 1x1, then a linear projection to one style vector."""

    def __init__(self, cin: int, latent_dim: int, spatial: int) -> None:
        super().__init__()
        layers: list[nn.Module] = []
        for _ in range(int(math.log2(spatial))):
            layers += [nn.Conv2d(cin, cin, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
        self.convs = nn.Sequential(*layers)
        self.linear = EqualizedLinear(cin, latent_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.linear(self.convs(x).flatten(1))


class StyleEncoder(nn.Module):
    """Feature-pyramid encoder predicting one style vector per generator level.

    Three taps (fine, mid, coarse) are aggregated top-down: each map is summed
    with the upsampled coarser map. Coarse generator levels read the coarse
    map and fine levels the fine one.
    """

    def __init__(self, config: EncoderConfig, n_levels: int, latent_dim: int) -> None:
        super().__init__()
        s = config.image_size
        if s < 32 or s & (s - 1):
            raise ParameterError(f"encoder image size must be a power of two >= 32, got {s}")
        self.config = config
        self.n_levels = n_levels
        self.latent_dim = latent_dim
        n_blocks = int(math.log2(s)) - 2
        widths = [min(config.base_width * 2 ** i, config.max_width) for i in range(n_blocks + 1)]
        self.stem = nn.Sequential(nn.Conv2d(4, widths[0], 3, padding=1), nn.LeakyReLU(0.2))
        self.blocks = nn.ModuleList([_down(widths[i], widths[i + 1]) for i in range(n_blocks)])
        tap_widths = widths[-3:]
        sw = config.style_width
        self.lateral = nn.ModuleList([nn.Conv2d(w, sw, 1) for w in tap_widths])
        # tap 0 is the 4x4 coarse map, 1 mid, 2 fine
        self.tap_of_level = [min(2, i * 3 // n_levels) for i in range(n_levels)]
        self.styles = nn.ModuleList([MapToStyle(sw, latent_dim, 4 * 2 ** t) for t in self.tap_of_level])

    def _pyramid(self, x: torch.Tensor) -> list[torch.Tensor]:
        s = self.config.image_size
        if x.shape[1] != 4 or x.shape[-2:] != (s, s):
            raise ParameterError(f"encoder expects (4, {s}, {s}) inputs, got {tuple(x.shape[1:])}")
        h = self.stem(x)
        feats = []
        for block in self.blocks:
            h = block(h)
            feats.append(h)
        fine, mid, coarse = (lat(f) for lat, f in zip(self.lateral, feats[-3:]))
        p_mid = mid + F.interpolate(coarse, size=mid.shape[-2:], mode="bilinear", align_corners=False)
        p_fine = fine + F.interpolate(p_mid, size=fine.shape[-2:], mode="bilinear", align_corners=False)
        return [coarse, p_mid, p_fine]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        maps = self._pyramid(x)
        return torch.stack([head(maps[t]) for head, t in zip(self.styles, self.tap_of_level)], dim=0)


def encoder_input(rgb: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Premultiplied RGB plus the mask channel; content outside the mask is dropped."""
    return torch.cat([rgb * mask, mask], dim=1)


def encode(encoder: StyleEncoder, rgb: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """(levels, B, d) style vectors for a batch of masked images."""
    return encoder(encoder_input(rgb, mask))


def average_latents(w: torch.Tensor) -> torch.Tensor:
    """Per-level mean over images: (levels, N, d) -> (levels, 1, d)."""
    return w.mean(dim=1, keepdim=True)


def embed(encoder: StyleEncoder, rgb: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Global-pooled pyramid features, used as an appearance embedding."""
    maps = encoder._pyramid(encoder_input(rgb, mask))
    return torch.cat([m.mean(dim=(2, 3)) for m in maps], dim=1)


# --- synthetic supervision --------------------------------------------------

@dataclass(eq=False)
class SyntheticBatch:
    rgb: torch.Tensor
    mask: torch.Tensor
    w: torch.Tensor  # (levels, B, d)


@contextmanager
def frozen(*modules: nn.Module) -> Iterator[None]:
    """Eval mode and no gradients inside the block; prior flags come back on exit."""
    modes = [(sub, sub.training) for m in modules for sub in m.modules()]
    grads = [(p, p.requires_grad) for m in modules for p in m.parameters()]
    try:
        for m in modules:
            m.eval()
            m.requires_grad_(False)
        yield
    finally:
        for sub, training in modes:
            sub.training = training
        for p, flag in grads:
            p.requires_grad_(flag)


@torch.no_grad()
def synthetic_batch(
    gan: TextureGAN,
    renderer: NeuralRenderer,
    body: ArticulatedBody,
    config: EncoderConfig,
    batch: int,
    rng: np.random.Generator,
    gen: torch.Generator,
) -> SyntheticBatch:
    """Generated people in an approximate A-pose seen by an approximately frontal camera.

    Each level gets its own style vector from an independent z.
    """
    L = len(gan.levels)
    z = gan.sample_z(L * batch, gen)
    w = gan.mapping(z).reshape(L, batch, -1)
    texture = synthesize_texture(gan, StyleLatents(w=w, noise=gan.sample_noise(batch, gen)))
    size = config.image_size
    buffers = []
    for _ in range(batch):
        shape = rng.normal(0.0, config.shape_std, size=body.n_shape)
        pose = a_pose(body, config.a_pose_deg + rng.uniform(-config.a_pose_jitter_deg, config.a_pose_jitter_deg))
        az = rng.uniform(-config.azimuth_range_deg, config.azimuth_range_deg)
        camera = orbit_camera(az, 0.0, 3.0, 1.6 * size, size)
        buffers.append(rasterize(pose_mesh(body, pose, shape), camera, size))
    view = render_view(renderer, texture, buffers)
    return SyntheticBatch(rgb=view.rgb, mask=view.mask, w=w)


def latent_l1(encoder: StyleEncoder, batch: SyntheticBatch) -> torch.Tensor:
    return (encode(encoder, batch.rgb, batch.mask) - batch.w).abs().mean()


def _check_compat(gan: TextureGAN, renderer: NeuralRenderer) -> None:
    if gan.config.texture_channels != renderer.texture_channels:
        raise ConfigurationError("generator and renderer disagree on texture channels")


def train_a_encoder(
    gan: TextureGAN,
    renderer: NeuralRenderer,
    body: ArticulatedBody,
    config: EncoderConfig,
    seed: int = 0,
    training_log: Optional[TrainingLog] = None,
) -> StyleEncoder:
    """L1 regression of per-level styles on synthetic renders only."""
    _check_compat(gan, renderer)
    tlog = training_log if training_log is not None else TrainingLog()
    with frozen(gan, renderer):
        torch.manual_seed(seed)
        rng = np.random.default_rng(seed)
        gen = torch.Generator().manual_seed(seed)
        val = synthetic_batch(gan, renderer, body, config, config.validation_size,
                              np.random.default_rng(seed + 1), torch.Generator().manual_seed(seed + 1))
        encoder = StyleEncoder(config, len(gan.levels), gan.config.latent_dim)
        opt = torch.optim.Adam(encoder.parameters(), lr=config.lr)
        with torch.no_grad():
            tlog.add(0, "val_l1", float(latent_l1(encoder, val)))
        for step in range(config.steps):
            loss = latent_l1(encoder, synthetic_batch(gan, renderer, body, config, config.batch_size, rng, gen))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            tlog.add(step, "l1", float(loss.detach()))
            if step % 100 == 0:
                log.info("a-encoder step %d: l1=%.4f", step, float(loss))
        with torch.no_grad():
            tlog.add(config.steps, "val_l1", float(latent_l1(encoder, val)))
        return encoder


def _check_records(frames: FrameSet, body: ArticulatedBody) -> None:
    for r in frames.records:
        if len(r.pose) != body.n_joints or len(r.shape) != body.n_shape:
            raise DataError(f"frame {r.frame_id} lacks a pose/shape record matching the body")
    if not frames.people_with_pairs():
        raise DataError("no person has two frames to form a training pair")


def real_pair_loss(
    encoder: StyleEncoder,
    gan: TextureGAN,
    renderer: NeuralRenderer,
    body: ArticulatedBody,
    frames: FrameSet,
    sources: list[int],
    targets: list[int],
    extractor,
    gen: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Encode the source frames, render the textures in the target frames' pose and camera,
    compare with the target frames perceptually. Noise is drawn afresh."""
    m_src = frames.masks[sources, :1]
    w = encode(encoder, frames.rgb[sources], m_src)
    texture = synthesize_texture(gan, StyleLatents(w=w, noise=gan.sample_noise(len(sources), gen)))
    size = frames.rgb.shape[-1]
    buffers = [
        rasterize(pose_mesh(body, frames.records[t].pose, frames.records[t].shape), frames.cameras[t], size)
        for t in targets
    ]
    view = render_view(renderer, texture, buffers)
    m_tgt = frames.masks[targets, :1]
    return perceptual_loss(view.rgb * view.mask, frames.rgb[targets] * m_tgt, extractor)


def train_g_encoder(
    gan: TextureGAN,
    renderer: NeuralRenderer,
    body: ArticulatedBody,
    frames: FrameSet,
    config: EncoderConfig,
    seed: int = 0,
    training_log: Optional[TrainingLog] = None,
    encoder: Optional[StyleEncoder] = None,
) -> StyleEncoder:
    """Real same-person pairs (perceptual) plus the synthetic latent L1, weighted 1:1."""
    _check_compat(gan, renderer)
    _check_records(frames, body)
    if frames.rgb.shape[-1] != config.image_size:
        raise ParameterError(f"frames are {frames.rgb.shape[-1]}p, encoder expects {config.image_size}p")
    tlog = training_log if training_log is not None else TrainingLog()
    with frozen(gan, renderer):
        torch.manual_seed(seed)
        rng = np.random.default_rng(seed)
        gen = torch.Generator().manual_seed(seed)
        extractor = resolve_extractor(config.extractor)
        encoder = encoder or StyleEncoder(config, len(gan.levels), gan.config.latent_dim)
        opt = torch.optim.Adam(encoder.parameters(), lr=config.lr)
        people = frames.people_with_pairs()
        for step in range(config.steps):
            src, tgt = [], []
            for _ in range(config.batch_size):
                idx = frames.person_index[people[int(rng.integers(len(people)))]]
                i, j = rng.choice(len(idx), size=2, replace=False)
                src.append(idx[int(i)])
                tgt.append(idx[int(j)])
            real = real_pair_loss(encoder, gan, renderer, body, frames, src, tgt, extractor, gen)
            synth = latent_l1(encoder, synthetic_batch(gan, renderer, body, config, config.batch_size, rng, gen))
            loss = real + synth
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            tlog.extend(step, {"real": float(real.detach()), "synthetic": float(synth.detach())})
            if step % 100 == 0:
                log.info("g-encoder step %d: real=%.4f synthetic=%.4f", step, float(real), float(synth))
        return encoder


def save_encoder(path: Path, encoder: StyleEncoder) -> None:
    save_module(path, encoder, encoder.config.model_dump(),
                {"n_levels": encoder.n_levels, "latent_dim": encoder.latent_dim})


def load_encoder(path: Path) -> StyleEncoder:
    state, meta = load_state(path)
    if meta.get("kind") != StyleEncoder.__name__:
        raise ConfigurationError(f"{path} holds a {meta.get('kind')}, not an encoder checkpoint")
    enc = StyleEncoder(EncoderConfig.model_validate(meta["config"]), meta["n_levels"], meta["latent_dim"])
    enc.load_state_dict(state)
    return enc
