from __future__ import annotations
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .body import HEAD, ArticulatedBody, load_body, pose_mesh, rasterize_vertex_attributes, save_body, spectral_coordinates
from .camera import Camera
from .container import load_state, save_module
from .dataset import Dataset, FrameSet, load_frames
from .discriminators import DiscriminatorSet, LatentPredictor, StyleDiscriminator, crop_batch
from .errors import ConfigurationError, ParameterError
from .layers import Conv2dWeightModulate, EqualizedLinear, UpSample
from .losses import (
    DISCRIMINATOR_CRITERIA, GENERATOR_CRITERIA, PathLengthPenalty, covariance_loss, latent_prediction_loss,
    r1_penalty, random_transforms,
)
from .raster import RasterBuffers, buffers_to_tensors, rasterize
from .renderer import NeuralRenderer, finalize_mask, load_renderer, save_renderer
from .settings import GanConfig, RendererConfig
from .texture import assemble_input
from .trace import TrainingLog

log = logging.getLogger(__name__)


class MappingNetwork(nn.Module):
    def __init__(self, features: int, n_layers: int, equalized: bool = True) -> None:
        super().__init__()
        layers: list[nn.Module] = []
        for _ in range(n_layers):
            layers += [EqualizedLinear(features, features, equalized=equalized), nn.LeakyReLU(0.2)]
        self.net = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(F.normalize(z, dim=1))


class StyleBlock(nn.Module):
    def __init__(self, d_latent: int, in_features: int, out_features: int, equalized: bool) -> None:
        super().__init__()
        self.to_style = EqualizedLinear(d_latent, in_features, bias=1.0, equalized=equalized)
        self.conv = Conv2dWeightModulate(in_features, out_features, 3, equalized=equalized)
        # nonzero so the noise path is live from the first step
        self.scale_noise = nn.Parameter(torch.full((1,), 0.1))
        self.bias = nn.Parameter(torch.zeros(out_features))

    def forward(self, x: torch.Tensor, w: torch.Tensor, noise: Optional[torch.Tensor]) -> torch.Tensor:
        x = self.conv(x, self.to_style(w))
        if noise is not None:
            x = x + self.scale_noise[None, :, None, None] * noise
        return F.leaky_relu(x + self.bias[None, :, None, None], 0.2)


class ToTexture(nn.Module):
    """1x1 modulated projection to the L texture channels, no output activation."""

    def __init__(self, d_latent: int, features: int, channels: int, equalized: bool) -> None:
        super().__init__()
        self.to_style = EqualizedLinear(d_latent, features, bias=1.0, equalized=equalized)
        self.conv = Conv2dWeightModulate(features, channels, 1, demodulate=False, equalized=equalized)
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        return self.conv(x, self.to_style(w)) + self.bias[None, :, None, None]


@dataclass(eq=False)
class StyleLatents:
    w: torch.Tensor            # (levels, B, d)
    noise: List[torch.Tensor]  # per level (B, 2, r, r)

    @property
    def batch(self) -> int:
        return self.w.shape[1]

    def check(self, levels: Sequence[int]) -> None:
        if self.w.shape[0] != len(levels) or len(self.noise) != len(levels):
            raise ConfigurationError(f"latents carry {self.w.shape[0]} styles / {len(self.noise)} noise maps for {len(levels)} levels")
        for r, n in zip(levels, self.noise):
            if n.shape[-2:] != (r, r) or n.shape[0] != self.batch:
                raise ConfigurationError(f"noise map {tuple(n.shape)} does not match level {r}")


def spectral_texture(body: ArticulatedBody, resolution: int, channels: int = 16) -> np.ndarray:
    """(R, R, channels) spectral coordinates rasterized over the UV atlas."""
    return rasterize_vertex_attributes(body, spectral_coordinates(body, channels).values, resolution)


class TextureSynthesis(nn.Module):
    """Style-modulated synthesis from 4x4 to the texture resolution.

    Spectral coordinate maps (area-downsampled) are concatenated to the input
    of the first convolution of each conditioned level.
    """

    def __init__(self, cfg: GanConfig, spectral_map: Optional[np.ndarray]) -> None:
        super().__init__()
        self.levels = cfg.levels()
        self.spectral_levels = cfg.resolved_spectral_levels()
        missing = [r for r in self.spectral_levels if r not in self.levels]
        if missing:
            raise ConfigurationError(f"spectral levels {missing} are not in the synthesis pyramid {self.levels}")
        if self.spectral_levels:
            if spectral_map is None:
                raise ConfigurationError("spectral conditioning is enabled but no spectral map was given")
            top = self.levels[-1]
            if spectral_map.shape != (top, top, cfg.spectral_channels):
                raise ConfigurationError(f"spectral map {spectral_map.shape} != ({top}, {top}, {cfg.spectral_channels})")
            full = torch.from_numpy(np.ascontiguousarray(spectral_map.transpose(2, 0, 1)))[None].float()
            for r in self.spectral_levels:
                self.register_buffer(f"spectral_{r}", F.interpolate(full, size=(r, r), mode="area"))
        n = len(self.levels)
        feats = [min(cfg.max_features, cfg.n_features * 2 ** (n - 1 - i)) for i in range(n)]
        self.features = feats
        d, eq, sc = cfg.latent_dim, cfg.equalized_lr, cfg.spectral_channels
        extra = [sc if r in self.spectral_levels else 0 for r in self.levels]
        self.initial_constant = nn.Parameter(torch.randn(1, feats[0], 4, 4))
        self.first = StyleBlock(d, feats[0] + extra[0], feats[0], eq)
        self.first_to_texture = ToTexture(d, feats[0], cfg.texture_channels, eq)
        self.blocks1 = nn.ModuleList([StyleBlock(d, feats[i - 1] + extra[i], feats[i], eq) for i in range(1, n)])
        self.blocks2 = nn.ModuleList([StyleBlock(d, feats[i], feats[i], eq) for i in range(1, n)])
        self.to_texture = nn.ModuleList([ToTexture(d, feats[i], cfg.texture_channels, eq) for i in range(1, n)])
        self.up = UpSample()

    def _condition(self, x: torch.Tensor, r: int) -> torch.Tensor:
        if r not in self.spectral_levels:
            return x
        s = getattr(self, f"spectral_{r}").to(x.dtype).expand(x.shape[0], -1, -1, -1)
        return torch.cat([x, s], dim=1)

    def forward(self, latents: StyleLatents) -> torch.Tensor:
        latents.check(self.levels)
        w, noise = latents.w, latents.noise
        x = self.initial_constant.expand(latents.batch, -1, -1, -1)
        x = self.first(self._condition(x, self.levels[0]), w[0], noise[0][:, 1:2])
        tex = self.first_to_texture(x, w[0])
        for i in range(1, len(self.levels)):
            x = self.up(x)
            x = self.blocks1[i - 1](self._condition(x, self.levels[i]), w[i], noise[i][:, 0:1])
            x = self.blocks2[i - 1](x, w[i], noise[i][:, 1:2])
            tex = self.up(tex) + self.to_texture[i - 1](x, w[i])
        return tex


class TextureGAN(nn.Module):
    """Mapping network + texture synthesis, with the truncation center kept as a buffer."""

    def __init__(self, config: GanConfig, spectral_map: Optional[np.ndarray] = None) -> None:
        super().__init__()
        self.config = config
        self.mapping = MappingNetwork(config.latent_dim, config.mapping_layers, config.equalized_lr)
        self.synthesis = TextureSynthesis(config, spectral_map)
        self.register_buffer("w_avg", torch.zeros(config.latent_dim))

    @property
    def levels(self) -> list[int]:
        return self.synthesis.levels

    def sample_z(self, batch: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        return torch.randn(batch, self.config.latent_dim, generator=generator)

    def sample_noise(self, batch: int, generator: Optional[torch.Generator] = None) -> List[torch.Tensor]:
        return [torch.randn(batch, 2, r, r, generator=generator) for r in self.levels]

    def zero_noise(self, batch: int) -> List[torch.Tensor]:
        return [torch.zeros(batch, 2, r, r) for r in self.levels]

    def broadcast(self, w: torch.Tensor) -> torch.Tensor:
        """(B, d) -> (levels, B, d), one copy per level."""
        return w[None].expand(len(self.levels), -1, -1)

    def forward(self, latents: StyleLatents) -> torch.Tensor:
        return self.synthesis(latents)


def map_latent(gan: TextureGAN, z: torch.Tensor) -> torch.Tensor:
    if z.shape[-1] != gan.config.latent_dim:
        raise ParameterError(f"z must be {gan.config.latent_dim}-dimensional, got {z.shape[-1]}")
    return gan.mapping(z)


def truncate(w: torch.Tensor, w_avg: torch.Tensor, psi: float) -> torch.Tensor:
    """w_avg + psi (w - w_avg); psi == 1 returns `w` itself."""
    if psi == 1:
        return w
    return torch.lerp(w_avg.to(w.dtype).expand_as(w), w, psi)


@torch.no_grad()
def estimate_w_avg(gan: TextureGAN, n_samples: int, generator: Optional[torch.Generator] = None, batch: int = 1000) -> torch.Tensor:
    total = torch.zeros(gan.config.latent_dim, dtype=torch.float64)
    done = 0
    while done < n_samples:
        b = min(batch, n_samples - done)
        total += map_latent(gan, gan.sample_z(b, generator)).to(torch.float64).sum(dim=0)
        done += b
    return (total / max(n_samples, 1)).to(torch.float32)


def make_latents(
    gan: TextureGAN,
    z: torch.Tensor,
    noise: List[torch.Tensor],
    psi: float = 1.0,
    mixing_z: Optional[torch.Tensor] = None,
    crossover: int = 0,
) -> StyleLatents:
    w = truncate(map_latent(gan, z), gan.w_avg, psi)
    ws = gan.broadcast(w)
    if mixing_z is not None and 0 < crossover < len(gan.levels):
        w2 = truncate(map_latent(gan, mixing_z), gan.w_avg, psi)
        ws = torch.cat([ws[:crossover], gan.broadcast(w2)[crossover:]], dim=0)
    return StyleLatents(w=ws, noise=noise)


def synthesize_texture(gan: TextureGAN, latents: StyleLatents) -> torch.Tensor:
    """(B, L, R, R) texture maps; the generative path uses the top level only."""
    return gan(latents)


# --- sampling people --------------------------------------------------------

@dataclass(eq=False)
class RenderedView:
    image: torch.Tensor        # (B, 4, H, W): masked RGB + finalized foreground mask
    rgb: torch.Tensor
    mask: torch.Tensor         # (B, 1, H, W)
    raster_input: torch.Tensor
    buffers: List[RasterBuffers]
    texture: torch.Tensor


def render_view(
    renderer: NeuralRenderer,
    texture: torch.Tensor,
    buffers: List[RasterBuffers],
    use_mesh_mask: bool = True,
) -> RenderedView:
    uv, mesh = buffers_to_tensors(buffers, dtype=texture.dtype, device=texture.device)
    x = assemble_input(uv, mesh, texture)
    rgb, logits = renderer(x)
    prob = torch.sigmoid(logits[:, :1])
    mask = finalize_mask(prob, mesh) if use_mesh_mask else prob
    return RenderedView(torch.cat([rgb * mask, mask], dim=1), rgb, mask, x, buffers, texture)


def sample_person_image(
    gan: TextureGAN,
    renderer: NeuralRenderer,
    body: ArticulatedBody,
    z: torch.Tensor,
    noise: List[torch.Tensor],
    pose,
    shape,
    camera: Camera,
    image_size: int,
    psi: float = 1.0,
) -> RenderedView:
    """One generated person (batch 1) in the given pose, shape and camera."""
    latents = make_latents(gan, z.reshape(1, -1), noise, psi)
    texture = synthesize_texture(gan, latents)
    buffers = [rasterize(pose_mesh(body, pose, shape), camera, image_size)]
    return render_view(renderer, texture, buffers)


def sample_truncated(gan, renderer, body, psi: float, z, noise, pose, shape, camera, image_size) -> RenderedView:
    return sample_person_image(gan, renderer, body, z, noise, pose, shape, camera, image_size, psi=psi)


def face_crop(image: torch.Tensor, buffers: RasterBuffers, size: int) -> Optional[torch.Tensor]:
    """Square crop around head-labeled pixels (20% padding); None when the head is not visible."""
    crops, _ = crop_batch(image[None] if image.dim() == 3 else image, [buffers.region == HEAD], size)
    return crops


# --- training ---------------------------------------------------------------

@dataclass(eq=False)
class GenerativeModel:
    config: GanConfig
    gan: TextureGAN
    renderer: NeuralRenderer
    discriminators: DiscriminatorSet
    predictor: Optional[LatentPredictor]
    log: TrainingLog
    body: ArticulatedBody


def build_discriminators(cfg: GanConfig) -> DiscriminatorSet:
    tog = cfg.ablation
    kw = dict(n_features=cfg.discriminator_features, max_features=cfg.discriminator_max_features, equalized=cfg.equalized_lr)
    return DiscriminatorSet(
        unary=StyleDiscriminator(4, cfg.image_size, **kw),
        binary=StyleDiscriminator(8, cfg.image_size, **kw) if tog.use_binary_discriminator else None,
        face=StyleDiscriminator(4, cfg.face_crop_size, **kw) if tog.use_face_discriminator else None,
    )


@dataclass(eq=False)
class FakePair:
    first: RenderedView
    second: RenderedView
    latents: StyleLatents
    texture: torch.Tensor


def _fake_pair(gan: TextureGAN, renderer: NeuralRenderer, body: ArticulatedBody, frames: FrameSet, cfg: GanConfig,
               rng: np.random.Generator, gen: torch.Generator) -> FakePair:
    B = cfg.batch_size
    z = gan.sample_z(B, gen)
    mix = None
    crossover = 0
    if cfg.style_mixing_prob > 0 and rng.uniform() < cfg.style_mixing_prob:
        mix = gan.sample_z(B, gen)
        crossover = int(rng.integers(1, len(gan.levels)))
    latents = make_latents(gan, z, gan.sample_noise(B, gen), mixing_z=mix, crossover=crossover)
    texture = synthesize_texture(gan, latents)
    n = len(frames)
    shapes = frames.shapes()
    poses = frames.poses()
    views: list[list[RasterBuffers]] = [[], []]
    for b in range(B):
        s = shapes[int(rng.integers(n))]
        for v in range(2):
            k = int(rng.integers(n))
            views[v].append(rasterize(pose_mesh(body, poses[k], s), frames.cameras[int(rng.integers(n))], cfg.image_size))
    use_mesh = cfg.ablation.use_mesh_mask
    # both views are rendered from the very same texture tensor
    first = render_view(renderer, texture, views[0], use_mesh)
    second = render_view(renderer, texture, views[1], use_mesh)
    return FakePair(first, second, latents, texture)


def _real_pair(frames: FrameSet, cfg: GanConfig, rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor, list[np.ndarray]]:
    people = frames.people_with_pairs()
    a_idx, b_idx = [], []
    for _ in range(cfg.batch_size):
        idx = frames.person_index[people[int(rng.integers(len(people)))]]
        i, j = rng.choice(len(idx), size=2, replace=False)
        a_idx.append(idx[int(i)])
        b_idx.append(idx[int(j)])

    def four(ix: list[int]) -> torch.Tensor:
        m = frames.masks[ix, :1]
        return torch.cat([frames.rgb[ix] * m, m], dim=1)

    heads = [frames.masks[i, 1].numpy() > 0.5 for i in a_idx]
    return four(a_idx), four(b_idx), heads


def _set_requires_grad(modules: Sequence[nn.Module], flag: bool) -> None:
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(flag)


def train_generative(
    dataset: Dataset,
    config: GanConfig,
    renderer_config: Optional[RendererConfig] = None,
    seed: int = 0,
    checkpoint_dir: Optional[Path] = None,
    training_log: Optional[TrainingLog] = None,
) -> GenerativeModel:
    """Adversarial training of texture generator and renderer on posed person frames."""
    cfg = config
    body = dataset.body
    frames = load_frames(dataset, cfg.image_size)
    if not frames.people_with_pairs():
        raise ConfigurationError("dataset has no person with two frames; the pairwise discriminator cannot form real pairs")
    rcfg = renderer_config or RendererConfig(texture_channels=cfg.texture_channels)
    if rcfg.texture_channels != cfg.texture_channels:
        raise ConfigurationError("renderer and generator disagree on texture channels")
    tlog = training_log or TrainingLog()
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)

    spectral = None
    if cfg.resolved_spectral_levels():
        spectral = spectral_texture(body, cfg.texture_resolution, cfg.spectral_channels)
    gan = TextureGAN(cfg, spectral)
    renderer = NeuralRenderer(rcfg)
    ds = build_discriminators(cfg)
    predictor = LatentPredictor(cfg.image_size, cfg.latent_dim, cfg.predictor_width) if cfg.ablation.use_latent_predictor else None
    path_penalty = PathLengthPenalty(cfg.path_beta)

    lr = cfg.lr
    opt_g = torch.optim.Adam(gan.parameters(), lr=lr.generator, betas=(0.0, 0.99))
    opt_r = torch.optim.Adam(renderer.parameters(), lr=lr.renderer, betas=(0.0, 0.99))
    opt_q = torch.optim.Adam(predictor.parameters(), lr=lr.predictor, betas=(0.0, 0.99)) if predictor else None
    d_lrs = {"unary": lr.d_unary, "binary": lr.d_binary, "face": lr.d_face}
    opt_d = {name: torch.optim.Adam(d.parameters(), lr=d_lrs[name], betas=(0.0, 0.99)) for name, d in ds.modules()}
    crit_g = GENERATOR_CRITERIA[cfg.criterion]
    crit_d = DISCRIMINATOR_CRITERIA[cfg.criterion]
    wt = cfg.weights
    d_modules = [d for _, d in ds.modules()]

    for step in range(cfg.steps):
        fake = _fake_pair(gan, renderer, body, frames, cfg, rng, gen)
        real1, real2, heads = _real_pair(frames, cfg, rng)
        fake1, fake2 = fake.first.image, fake.second.image
        real_faces, _ = crop_batch(real1, heads, cfg.face_crop_size) if ds.face is not None else (None, [])
        fake_faces, _ = crop_batch(fake1, [b.region == HEAD for b in fake.first.buffers], cfg.face_crop_size) \
            if ds.face is not None else (None, [])
        if ds.face is not None and (real_faces is None or fake_faces is None):
            tlog.count("face_crop_skipped")
        use_face = ds.face is not None and real_faces is not None and fake_faces is not None

        # discriminator step
        _set_requires_grad(d_modules, True)
        d_terms = {"d_unary": crit_d(ds.unary(real1), ds.unary(fake1.detach())) * wt.adv_unary}
        if ds.binary is not None:
            d_terms["d_binary"] = crit_d(ds.binary(torch.cat([real1, real2], 1)),
                                         ds.binary(torch.cat([fake1, fake2], 1).detach())) * wt.adv_binary
        if use_face:
            d_terms["d_face"] = crit_d(ds.face(real_faces), ds.face(fake_faces.detach())) * wt.adv_face
        d_loss = sum(d_terms.values())
        if cfg.r1_every > 0 and step % cfg.r1_every == 0 and wt.r1 > 0:
            r1 = r1_penalty(ds.unary, real1)
            if ds.binary is not None:
                r1 = r1 + r1_penalty(ds.binary, torch.cat([real1, real2], 1))
            if use_face:
                r1 = r1 + r1_penalty(ds.face, real_faces)
            d_terms["r1"] = r1
            d_loss = d_loss + wt.r1 * cfg.r1_every * r1
        for o in opt_d.values():
            o.zero_grad(set_to_none=True)
        d_loss.backward()
        for o in opt_d.values():
            o.step()

        # generator / renderer / predictor step
        _set_requires_grad(d_modules, False)
        g_terms = {"g_unary": crit_g(ds.unary(fake1)) * wt.adv_unary}
        if ds.binary is not None:
            g_terms["g_binary"] = crit_g(ds.binary(torch.cat([fake1, fake2], 1))) * wt.adv_binary
        if use_face:
            g_terms["g_face"] = crit_g(ds.face(fake_faces)) * wt.adv_face
        if predictor is not None:
            g_terms["wreg"] = latent_prediction_loss(predictor(fake1), fake.latents.w[0]) * wt.wreg
        if cfg.ablation.use_augmentations and wt.augreg > 0:
            theta = random_transforms(cfg.batch_size, cfg.augment.max_rotation_deg, cfg.augment.max_translation, gen)
            cov, _ = covariance_loss(renderer.forward_stacked, fake.first.raster_input, theta)
            g_terms["augreg"] = cov * wt.augreg
        if cfg.path_every > 0 and step % cfg.path_every == 0 and wt.path > 0:
            g_terms["path"] = path_penalty(fake.latents.w, fake.texture, gen) * wt.path * cfg.path_every
        g_loss = sum(g_terms.values())
        opt_g.zero_grad(set_to_none=True)
        opt_r.zero_grad(set_to_none=True)
        if opt_q is not None:
            opt_q.zero_grad(set_to_none=True)
        g_loss.backward()
        opt_g.step()
        opt_r.step()
        if opt_q is not None:
            opt_q.step()

        tlog.extend(step, {k: float(v.detach()) for k, v in {**d_terms, **g_terms}.items()})
        tlog.add(step, "d_total", float(d_loss.detach()))
        tlog.add(step, "g_total", float(g_loss.detach()))
        if step % 50 == 0:
            log.info("gan step %d: d=%.4f g=%.4f", step, float(d_loss), float(g_loss))
        if checkpoint_dir is not None and cfg.checkpoint_every > 0 and (step + 1) % cfg.checkpoint_every == 0:
            model = GenerativeModel(cfg, gan, renderer, ds, predictor, tlog, body)
            save_generative(checkpoint_dir / f"step_{step + 1:06d}", model)

    _set_requires_grad(d_modules, True)
    gan.w_avg.copy_(estimate_w_avg(gan, cfg.truncation_samples, gen))
    return GenerativeModel(cfg, gan, renderer, ds, predictor, tlog, body)


# --- persistence ------------------------------------------------------------

def save_generative(out_dir: Path, model: GenerativeModel) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = model.config.model_dump(mode="json")
    save_module(out_dir / "generator.npz", model.gan, cfg)
    save_renderer(out_dir / "renderer.npz", model.renderer)
    for name, d in model.discriminators.modules():
        save_module(out_dir / f"d_{name}.npz", d, cfg, {"role": name})
    if model.predictor is not None:
        save_module(out_dir / "predictor.npz", model.predictor, cfg)
    save_body(out_dir / "body.npz", model.body)
    model.log.write_csv(out_dir / "train_log.csv")


def load_generator(path: Path) -> TextureGAN:
    state, meta = load_state(path)
    cfg = GanConfig.model_validate(meta["config"])
    placeholder = None
    if cfg.resolved_spectral_levels():
        r = cfg.texture_resolution
        placeholder = np.zeros((r, r, cfg.spectral_channels))
    gan = TextureGAN(cfg, placeholder)
    gan.load_state_dict({k: v.to(torch.float32) if v.is_floating_point() else v for k, v in state.items()})
    return gan


def load_generative(out_dir: Path) -> GenerativeModel:
    gan = load_generator(out_dir / "generator.npz")
    cfg = gan.config
    renderer = load_renderer(out_dir / "renderer.npz")
    ds = build_discriminators(cfg)
    for name, d in ds.modules():
        p = out_dir / f"d_{name}.npz"
        if p.exists():
            state, _ = load_state(p)
            d.load_state_dict(state)
    predictor = None
    if (out_dir / "predictor.npz").exists():
        state, _ = load_state(out_dir / "predictor.npz")
        predictor = LatentPredictor(cfg.image_size, cfg.latent_dim, cfg.predictor_width)
        predictor.load_state_dict(state)
    return GenerativeModel(cfg, gan, renderer, ds, predictor, TrainingLog(), load_body(out_dir / "body.npz"))
