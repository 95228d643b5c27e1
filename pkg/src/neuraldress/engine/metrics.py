from __future__ import annotations
import csv
import logging
import math
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence
import numpy as np
import scipy.linalg
import torch
import torch.nn.functional as F

from .body import ArticulatedBody, a_pose, pose_mesh
from .camera import orbit_camera
from .encoders import StyleEncoder, embed
from .errors import DataError, ParameterError
from .gan import TextureGAN, make_latents, render_view, synthesize_texture
from .raster import rasterize
from .renderer import NeuralRenderer
from .settings import MetricsConfig

log = logging.getLogger(__name__)

SSIM_K1 = 0.01
SSIM_K2 = 0.03
# covariance shrinkage toward the scaled identity for sets smaller than the feature dimension
FID_SHRINKAGE = 0.1


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=torch.float64)
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x[None]
    return x


def _gaussian_window(size: int, sigma: float, dtype=torch.float64) -> torch.Tensor:
    r = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(r ** 2) / (2.0 * sigma ** 2))
    g = g / g.sum()
    return (g[:, None] * g[None, :])[None, None]


def ssim(a, b, window: int = 11, sigma: float = 1.5, data_range: float = 1.0) -> float:
    """Mean windowed structural similarity, averaged over channels and images.

    Accepts (H, W), (C, H, W) or (B, C, H, W); statistics use valid windows only.
    """
    x, y = _as_batch(a), _as_batch(b)
    if x.shape != y.shape:
        raise ParameterError(f"ssim: shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    if min(x.shape[-2:]) < window:
        raise ParameterError(f"ssim: images smaller than the {window}px window")
    c = x.shape[1]
    k = _gaussian_window(window, sigma).expand(c, 1, window, window)

    def blur(t: torch.Tensor) -> torch.Tensor:
        return F.conv2d(t, k, groups=c)

    mu_x, mu_y = blur(x), blur(y)
    sxx = blur(x * x) - mu_x ** 2
    syy = blur(y * y) - mu_y ** 2
    sxy = blur(x * y) - mu_x * mu_y
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    s = ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / ((mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2))
    return float(s.mean())


def psnr(a, b, data_range: float = 1.0) -> float:
    x, y = _as_batch(a), _as_batch(b)
    if x.shape != y.shape:
        raise ParameterError(f"psnr: shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    mse = float(((x - y) ** 2).mean())
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / mse)


def _unit_channels(f: torch.Tensor) -> torch.Tensor:
    return f / (f.norm(dim=1, keepdim=True) + 1e-10)


@torch.no_grad()
def perceptual_distance(a: torch.Tensor, b: torch.Tensor, extractor: Callable[[torch.Tensor], list]) -> float:
    """Sum over layers of the spatially averaged squared gap between channel-normalized features."""
    x, y = _as_batch(a).float(), _as_batch(b).float()
    if x.shape != y.shape:
        raise ParameterError(f"perceptual_distance: shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    total = 0.0
    for fa, fb in zip(extractor(x), extractor(y)):
        total += float(((_unit_channels(fa) - _unit_channels(fb)) ** 2).sum(dim=1).mean())
    return total


@torch.no_grad()
def pooled_features(images: torch.Tensor, extractor: Callable[[torch.Tensor], list], batch: int = 64) -> np.ndarray:
    """(N, D) float64: every extractor layer global-average-pooled and concatenated."""
    out = []
    for i in range(0, images.shape[0], batch):
        feats = extractor(images[i:i + batch].float())
        out.append(torch.cat([f.mean(dim=(2, 3)) for f in feats], dim=1).to(torch.float64))
    return torch.cat(out, dim=0).numpy()


def _gaussian(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, d = features.shape
    mu = features.mean(axis=0)
    sigma = np.atleast_2d(np.cov(features, rowvar=False)) if n > 1 else np.zeros((d, d))
    if n < d + 1:
        log.warning("fid: %d samples for %d features; shrinking the covariance", n, d)
        sigma = (1.0 - FID_SHRINKAGE) * sigma + FID_SHRINKAGE * np.trace(sigma) / d * np.eye(d)
    return mu, sigma


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = scipy.linalg.eigh((m + m.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(mu_a: np.ndarray, sigma_a: np.ndarray, mu_b: np.ndarray, sigma_b: np.ndarray) -> float:
    """|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)), the root taken through eigendecompositions."""
    root_a = _psd_sqrt(sigma_a)
    inner = root_a @ sigma_b @ root_a
    vals = scipy.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_cross = float(np.sqrt(np.clip(vals, 0.0, None)).sum())
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * tr_cross)
    return max(value, 0.0)


def fid_from_features(features_a: np.ndarray, features_b: np.ndarray) -> float:
    fa, fb = np.asarray(features_a, dtype=np.float64), np.asarray(features_b, dtype=np.float64)
    if fa.ndim != 2 or fb.ndim != 2 or fa.shape[1] != fb.shape[1]:
        raise ParameterError(f"fid: incompatible feature sets {fa.shape} and {fb.shape}")
    return frechet_distance(*_gaussian(fa), *_gaussian(fb))


def fid(set_a: torch.Tensor, set_b: torch.Tensor, extractor: Callable[[torch.Tensor], list]) -> float:
    return fid_from_features(pooled_features(set_a, extractor), pooled_features(set_b, extractor))


def inception_score_from_probs(probs) -> float:
    p = np.asarray(probs, dtype=np.float64)
    p = np.clip(p, 1e-12, 1.0)
    marginal = p.mean(axis=0, keepdims=True)
    kl = (p * (np.log(p) - np.log(marginal))).sum(axis=1)
    return float(np.exp(kl.mean()))


@torch.no_grad()
def inception_score(images: torch.Tensor, classifier: Callable[[torch.Tensor], torch.Tensor]) -> float:
    return inception_score_from_probs(classifier(images.float()).to(torch.float64).numpy())


@torch.no_grad()
def view_consistency(
    gan: TextureGAN,
    renderer: NeuralRenderer,
    encoder: StyleEncoder,
    body: ArticulatedBody,
    config: MetricsConfig,
    image_size: Optional[int] = None,
    seed: int = 0,
    delta_deg: Optional[float] = None,
    psi: float = 1.0,
) -> float:
    """Mean embedding distance between two views of the same generated person, `delta_deg` apart.

    The embedding is the encoder's pooled pyramid features.
    """
    delta = config.consistency_delta_deg if delta_deg is None else delta_deg
    image_size = image_size or encoder.config.image_size
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    pose = a_pose(body, 60.0)
    focal = 1.6 * image_size
    distances = []
    for _ in range(config.consistency_avatars):
        shape = rng.normal(0.0, 0.5, size=body.n_shape)
        latents = make_latents(gan, gan.sample_z(1, gen), gan.sample_noise(1, gen), psi)
        texture = synthesize_texture(gan, latents)
        mesh = pose_mesh(body, pose, shape)
        views = []
        for az in (0.0, delta):
            buffers = [rasterize(mesh, orbit_camera(az, 0.0, 3.0, focal, image_size), image_size)]
            v = render_view(renderer, texture, buffers)
            views.append(embed(encoder, v.rgb, v.mask))
        distances.append(float((views[0] - views[1]).norm()))
    return float(np.mean(distances))


# --- reports ----------------------------------------------------------------

def compare_image_sets(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray], extractor, config: MetricsConfig) -> List[Dict[str, object]]:
    """Per-image psnr/ssim/perceptual rows for paired (H, W, 3) images."""
    if len(pred) != len(gt):
        raise DataError(f"{len(pred)} predictions for {len(gt)} references")
    rows: List[Dict[str, object]] = []
    for i, (p, g) in enumerate(zip(pred, gt)):
        tp = torch.from_numpy(np.ascontiguousarray(p.transpose(2, 0, 1)))
        tg = torch.from_numpy(np.ascontiguousarray(g.transpose(2, 0, 1)))
        rows.append({
            "index": i,
            "psnr": psnr(tp, tg),
            "ssim": ssim(tp, tg, config.ssim_window, config.ssim_sigma),
            "perceptual": perceptual_distance(tp, tg, extractor),
        })
    return rows


def write_metrics_csv(path: Path, rows: Sequence[Dict[str, object]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("", encoding="utf-8")
        return
    cols = list(rows[0].keys())
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def summarize(rows: Sequence[Dict[str, object]]) -> Dict[str, float]:
    keys = [k for k, v in rows[0].items() if isinstance(v, float)] if rows else []
    return {f"mean_{k}": float(np.mean([r[k] for r in rows])) for k in keys}


# --- ablations --------------------------------------------------------------

@torch.no_grad()
def generated_frames(gan: TextureGAN, renderer: NeuralRenderer, body: ArticulatedBody, frames, count: int,
                     seed: int = 0, psi: float = 1.0) -> torch.Tensor:
    """(count, 3, H, W) masked renders of random people in poses and cameras drawn from `frames`."""
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    size = frames.rgb.shape[-1]
    out = []
    for _ in range(count):
        k = int(rng.integers(len(frames)))
        rec = frames.records[k]
        texture = synthesize_texture(gan, make_latents(gan, gan.sample_z(1, gen), gan.sample_noise(1, gen), psi))
        buffers = [rasterize(pose_mesh(body, rec.pose, rec.shape), frames.cameras[k], size)]
        v = render_view(renderer, texture, buffers)
        out.append(v.rgb * v.mask)
    return torch.cat(out, dim=0)


def fid_proxy(gan: TextureGAN, renderer: NeuralRenderer, body: ArticulatedBody, frames, extractor, seed: int = 0) -> float:
    """FID between generated people and the masked real frames, under the given extractor."""
    real = frames.rgb * frames.masks[:, :1]
    fake = generated_frames(gan, renderer, body, frames, len(frames), seed)
    return fid(fake, real, extractor)
