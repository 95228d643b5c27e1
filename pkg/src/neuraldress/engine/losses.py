from __future__ import annotations
import logging
import math
from typing import Callable, Optional, Sequence
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ParameterError
from .settings import MIPMAP_ALPHAS
from .texture import NeuralTexture

log = logging.getLogger(__name__)

DICE_EPS = 1e-7


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ParameterError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def perceptual_loss(pred: torch.Tensor, target: torch.Tensor, extractor: Callable[[torch.Tensor], list]) -> torch.Tensor:
    """Sum over extractor layers of the mean absolute feature difference."""
    _same_shape(pred, target, "perceptual_loss")
    fp = extractor(pred)
    ft = extractor(target)
    return sum((a - b).abs().mean() for a, b in zip(fp, ft))


def dice_loss(m: torch.Tensor, m_hat: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """-log((2 sum(m m_hat) + eps) / (sum m + sum m_hat + eps)), per sample, batch-averaged."""
    _same_shape(m, m_hat, "dice_loss")
    if m.dim() < 2:
        m, m_hat = m[None], m_hat[None]
    dims = tuple(range(1, m.dim()))
    inter = (m * m_hat).sum(dim=dims)
    total = m.sum(dim=dims) + m_hat.sum(dim=dims)
    return -torch.log((2.0 * inter + eps) / (total + eps)).mean()


def lsgan_generator_loss(d_fake: torch.Tensor) -> torch.Tensor:
    return ((1.0 - d_fake) ** 2).mean()


def lsgan_discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    return (d_fake ** 2).mean() + ((1.0 - d_real) ** 2).mean()


def lsgan_losses(d_real: torch.Tensor, d_fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    return lsgan_generator_loss(d_fake), lsgan_discriminator_loss(d_real, d_fake)


def nonsaturating_generator_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    return F.softplus(-fake_logits).mean()


def nonsaturating_discriminator_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    return F.softplus(fake_logits).mean() + F.softplus(-real_logits).mean()


def nonsaturating_losses(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    return nonsaturating_generator_loss(fake_logits), nonsaturating_discriminator_loss(real_logits, fake_logits)


GENERATOR_CRITERIA = {"lsgan": lsgan_generator_loss, "nonsaturating": nonsaturating_generator_loss}
DISCRIMINATOR_CRITERIA = {"lsgan": lsgan_discriminator_loss, "nonsaturating": nonsaturating_discriminator_loss}


def feature_matching_loss(real_features: Sequence[torch.Tensor], fake_features: Sequence[torch.Tensor]) -> torch.Tensor:
    if len(real_features) != len(fake_features):
        raise ParameterError(f"feature lists differ in length: {len(real_features)} vs {len(fake_features)}")
    return sum((r - f).abs().mean() for r, f in zip(real_features, fake_features))


def mipmap_alphas(n_levels: int) -> tuple[float, ...]:
    if n_levels > len(MIPMAP_ALPHAS):
        raise ParameterError(f"at most {len(MIPMAP_ALPHAS)} mipmap levels are weighted, got {n_levels}")
    return MIPMAP_ALPHAS[len(MIPMAP_ALPHAS) - n_levels:]


def mipmap_reg(texture: NeuralTexture, alphas: Optional[Sequence[float]] = None) -> torch.Tensor:
    """Weighted L2 norms of the mipmaps; the weight row is aligned to the top of the stack."""
    levels = list(texture.mipmaps)
    a = mipmap_alphas(len(levels)) if alphas is None else tuple(alphas)
    if len(a) != len(levels):
        raise ParameterError("alpha row and mipmap stack differ in length")
    out = levels[0].new_zeros(())
    for alpha, p in zip(a, levels):
        if alpha:
            out = out + alpha * torch.linalg.vector_norm(p)
    return out


def latent_prediction_loss(predicted: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Squared Euclidean distance, averaged over the batch."""
    _same_shape(predicted, w, "latent_prediction_loss")
    return ((predicted - w) ** 2).sum(dim=-1).mean()


# --- transform covariance ---------------------------------------------------

def random_transforms(
    batch: int,
    max_rotation_deg: float,
    max_translation: float,
    generator: Optional[torch.Generator] = None,
    dtype: torch.dtype = torch.float32,
    device: str | torch.device = "cpu",
) -> torch.Tensor:
    """(B, 2, 3) in-plane rigid transforms in normalized image coordinates.

    Translation is a fraction of the image side.
    """
    u = torch.rand(batch, 3, generator=generator, dtype=torch.float64) * 2.0 - 1.0
    ang = u[:, 0] * math.radians(max_rotation_deg)
    t = u[:, 1:] * max_translation * 2.0
    c, s = torch.cos(ang), torch.sin(ang)
    theta = torch.stack([torch.stack([c, -s, t[:, 0]], 1), torch.stack([s, c, t[:, 1]], 1)], 1)
    return theta.to(device=device, dtype=dtype)


def warp(x: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    grid = F.affine_grid(theta.to(x.dtype), list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


def warp_validity(like: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    ones = like.new_ones(like.shape[0], 1, *like.shape[-2:])
    return (warp(ones, theta) > 1.0 - 1e-4).to(like.dtype)


def covariance_loss(
    renderer: Callable[[torch.Tensor], torch.Tensor], raster_input: torch.Tensor, theta: torch.Tensor
) -> tuple[torch.Tensor, bool]:
    """L1 gap between transform-then-render and render-then-transform on both-valid pixels.

    Returns (loss, empty); an empty valid region gives a zero loss and empty=True.
    """
    valid = warp_validity(raster_input, theta)
    a = warp(renderer(raster_input), theta)
    b = renderer(warp(raster_input, theta))
    n = valid.sum() * a.shape[1]
    if n.item() == 0:
        log.warning("covariance_loss: transform leaves no valid pixels")
        return a.new_zeros(()), True
    return ((a - b).abs() * valid).sum() / n, False


# --- regularizers -----------------------------------------------------------

def r1_penalty(discriminator: Callable[[torch.Tensor], torch.Tensor], real: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of the squared input-gradient norm at real samples."""
    x = real.detach().requires_grad_(True)
    out = discriminator(x)
    if not out.requires_grad:
        return real.new_zeros(())
    (grad,) = torch.autograd.grad(out.sum(), x, create_graph=True, allow_unused=True)
    if grad is None:
        return real.new_zeros(())
    return grad.pow(2).reshape(x.shape[0], -1).sum(dim=1).mean()


class PathLengthPenalty(nn.Module):
    """(|J_w^T y| - a)^2 with `a` an exponential moving average of the observed norms."""

    def __init__(self, beta: float = 0.99) -> None:
        super().__init__()
        self.beta = beta
        self.register_buffer("steps", torch.tensor(0.0, dtype=torch.float64))
        self.register_buffer("exp_sum_a", torch.tensor(0.0, dtype=torch.float64))

    def target(self) -> float:
        if self.steps.item() == 0:
            return 0.0
        return float(self.exp_sum_a / (1.0 - self.beta ** self.steps))

    def forward(self, w: torch.Tensor, x: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        """`w`: (levels, B, d) styles that produced `x`: (B, C, H, W)."""
        y = torch.randn(x.shape, generator=generator, dtype=x.dtype).to(x.device)
        output = (x * y).sum() / math.sqrt(x.shape[2] * x.shape[3])
        grad = None
        if output.requires_grad:
            (grad,) = torch.autograd.grad(output, w, create_graph=True, allow_unused=True)
        if grad is None:
            grad = torch.zeros_like(w)
        norm = grad.pow(2).sum(dim=-1).mean(dim=0).sqrt() if w.dim() == 3 else grad.pow(2).sum(dim=-1).sqrt()
        if self.steps.item() > 0:
            loss = ((norm - self.target()) ** 2).mean()
        else:
            loss = norm.sum() * 0.0
        with torch.no_grad():
            self.exp_sum_a.mul_(self.beta).add_(norm.mean().detach().to(torch.float64), alpha=1.0 - self.beta)
            self.steps.add_(1.0)
        return loss
