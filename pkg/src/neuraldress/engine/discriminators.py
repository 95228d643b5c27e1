from __future__ import annotations
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ParameterError
from .layers import DownSample, EqualizedConv2d, EqualizedLinear, MiniBatchStdDev


def _log2(n: int, what: str) -> int:
    if n < 8 or n & (n - 1):
        raise ParameterError(f"{what} must be a power of two >= 8, got {n}")
    return int(math.log2(n))


class _ResidualDown(nn.Module):
    def __init__(self, cin: int, cout: int, equalized: bool) -> None:
        super().__init__()
        self.residual = nn.Sequential(DownSample(), EqualizedConv2d(cin, cout, 1, equalized=equalized))
        self.block = nn.Sequential(
            EqualizedConv2d(cin, cin, 3, padding=1, equalized=equalized),
            nn.LeakyReLU(0.2),
            EqualizedConv2d(cin, cout, 3, padding=1, equalized=equalized),
            nn.LeakyReLU(0.2),
        )
        self.down = DownSample()
        self.scale = 1 / math.sqrt(2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return (self.down(self.block(x)) + self.residual(x)) * self.scale


class StyleDiscriminator(nn.Module):
    """Residual discriminator down to 4x4, minibatch-std channel, one logit per sample."""

    def __init__(self, in_channels: int, resolution: int, n_features: int = 32, max_features: int = 256,
                 equalized: bool = True) -> None:
        super().__init__()
        log_res = _log2(resolution, "discriminator resolution")
        self.in_channels = in_channels
        self.resolution = resolution
        feats = [min(max_features, n_features * 2 ** i) for i in range(log_res - 1)]
        self.from_rgb = nn.Sequential(EqualizedConv2d(in_channels, feats[0], 1, equalized=equalized), nn.LeakyReLU(0.2))
        self.blocks = nn.ModuleList([_ResidualDown(feats[i], feats[i + 1], equalized) for i in range(log_res - 2)])
        self.std_dev = MiniBatchStdDev()
        final = feats[log_res - 2] + 1
        self.conv = EqualizedConv2d(final, final, 3, equalized=equalized)
        self.final = EqualizedLinear(2 * 2 * final, 1, equalized=equalized)

    def _check(self, x: torch.Tensor) -> None:
        if x.shape[1] != self.in_channels or x.shape[-1] != self.resolution or x.shape[-2] != self.resolution:
            raise ParameterError(
                f"discriminator expects ({self.in_channels}, {self.resolution}, {self.resolution}), got {tuple(x.shape[1:])}"
            )

    def features(self, x: torch.Tensor) -> List[torch.Tensor]:
        self._check(x)
        h = self.from_rgb(x - 0.5)
        out = [h]
        for block in self.blocks:
            h = block(h)
            out.append(h)
        return out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)[-1]
        h = self.conv(self.std_dev(h))
        return self.final(F.leaky_relu(h, 0.2).reshape(h.shape[0], -1))


class PatchDiscriminator(nn.Module):
    """Patch-level real/fake scores for least-squares training."""

    def __init__(self, in_channels: int, resolution: int, width: int = 32) -> None:
        super().__init__()
        n_down = min(3, max(1, int(math.log2(resolution)) - 2))
        layers: list[nn.Module] = []
        cin, cout = in_channels, width
        for i in range(n_down):
            layers.append(nn.Sequential(nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.LeakyReLU(0.2)))
            cin, cout = cout, min(cout * 2, 8 * width)
        layers.append(nn.Sequential(nn.Conv2d(cin, cout, 4, stride=1, padding=1), nn.LeakyReLU(0.2)))
        self.layers = nn.ModuleList(layers)
        self.out = nn.Conv2d(cout, 1, 4, stride=1, padding=1)
        self.in_channels = in_channels

    def features(self, x: torch.Tensor) -> List[torch.Tensor]:
        if x.shape[1] != self.in_channels:
            raise ParameterError(f"patch discriminator expects {self.in_channels} channels, got {x.shape[1]}")
        out, h = [], x
        for layer in self.layers:
            h = layer(h)
            out.append(h)
        return out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out(self.features(x)[-1])


class LatentPredictor(nn.Module):
    """Regresses the single style vector w from a generated RGB + mask image."""

    def __init__(self, resolution: int, latent_dim: int, width: int = 32, in_channels: int = 4) -> None:
        super().__init__()
        log_res = _log2(resolution, "predictor resolution")
        layers: list[nn.Module] = []
        cin = in_channels
        for i in range(log_res - 2):
            cout = min(width * 2 ** i, 256)
            layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            cin = cout
        self.net = nn.Sequential(*layers)
        self.head = nn.Linear(cin * 4 * 4, latent_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.net(x)
        return self.head(h.reshape(h.shape[0], -1))


@dataclass(eq=False)
class DiscriminatorSet:
    unary: StyleDiscriminator
    binary: Optional[StyleDiscriminator]
    face: Optional[StyleDiscriminator]

    def modules(self) -> list[tuple[str, nn.Module]]:
        out: list[tuple[str, nn.Module]] = [("unary", self.unary)]
        if self.binary is not None:
            out.append(("binary", self.binary))
        if self.face is not None:
            out.append(("face", self.face))
        return out


# --- crops ------------------------------------------------------------------

CropBox = Tuple[float, float, int]  # center x, center y (pixel-edge coordinates), side


def crop_box(region: np.ndarray, pad: float = 1.2) -> Optional[CropBox]:
    """Square box around the nonzero pixels of `region`; side = ceil(max(h, w) * pad)."""
    ys, xs = np.nonzero(region)
    if len(ys) == 0:
        return None
    y0, y1, x0, x1 = ys.min(), ys.max(), xs.min(), xs.max()
    side = int(math.ceil(max(y1 - y0 + 1, x1 - x0 + 1) * pad))
    return (x0 + x1 + 1) / 2.0, (y0 + y1 + 1) / 2.0, side


def crop_square(image: torch.Tensor, box: CropBox, size: int) -> torch.Tensor:
    """Bilinear resample of a (B, C, H, W) image inside `box` to (B, C, size, size), zero outside."""
    cx, cy, side = box
    H, W = image.shape[-2:]
    theta = torch.tensor(
        [[side / W, 0.0, cx / W * 2.0 - 1.0], [0.0, side / H, cy / H * 2.0 - 1.0]],
        dtype=image.dtype, device=image.device,
    )[None].expand(image.shape[0], 2, 3)
    grid = F.affine_grid(theta, [image.shape[0], image.shape[1], size, size], align_corners=False)
    return F.grid_sample(image, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


def crop_batch(images: torch.Tensor, regions: Sequence[np.ndarray], size: int) -> tuple[Optional[torch.Tensor], list[int]]:
    """Crop each image around its region; returns the stacked crops and the kept indices."""
    crops, kept = [], []
    for i, region in enumerate(regions):
        box = crop_box(region)
        if box is None:
            continue
        crops.append(crop_square(images[i:i + 1], box, size))
        kept.append(i)
    if not crops:
        return None, kept
    return torch.cat(crops, dim=0), kept
