from __future__ import annotations
from dataclasses import dataclass
from typing import Callable, Dict, List
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError

# Fixed seed of the default random pyramid; changing it changes every logged perceptual number.
RANDOM_PYRAMID_SEED = 20210101


class FeatureExtractor(nn.Module):
    """Frozen multi-layer feature function: image (B, 3, H, W) in [0, 1] -> list of maps."""

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:  # pragma: no cover - interface
        raise NotImplementedError


class RandomPyramid(FeatureExtractor):
    def __init__(self, widths=(16, 32, 64), in_channels: int = 3, seed: int = RANDOM_PYRAMID_SEED) -> None:
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        cin = in_channels
        self.n_layers = len(widths)
        for i, cout in enumerate(widths):
            w = torch.randn(cout, cin, 3, 3, generator=g) / (3.0 * cin ** 0.5)
            self.register_buffer(f"w{i}", w, persistent=False)
            cin = cout

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        feats = []
        h = x - 0.5
        for i in range(self.n_layers):
            w = getattr(self, f"w{i}").to(device=h.device, dtype=h.dtype)
            h = F.leaky_relu(F.conv2d(h, w, padding=1, stride=1 if i == 0 else 2), 0.2)
            feats.append(h)
        return feats


class IdentityExtractor(FeatureExtractor):
    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        return [x]


class VGG19Extractor(FeatureExtractor):
    # relu1_2, relu2_2, relu3_4, relu4_4, relu5_4
    _CUTS = (4, 9, 18, 27, 36)

    def __init__(self) -> None:
        super().__init__()
        try:
            from torchvision.models import VGG19_Weights, vgg19
        except ImportError as e:
            raise ConfigurationError("the 'vgg19' extractor needs torchvision (install the 'pretrained' extra)") from e
        net = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).features.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        self.net = net
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).reshape(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).reshape(1, 3, 1, 1), persistent=False)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        h = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        feats, start = [], 0
        for cut in self._CUTS:
            h = self.net[start:cut](h)
            feats.append(h)
            start = cut
        return feats


class RandomClassifier(nn.Module):
    """Softmax head over random-pyramid features; stands in for a pretrained classifier."""

    def __init__(self, n_classes: int = 10, seed: int = RANDOM_PYRAMID_SEED + 1) -> None:
        super().__init__()
        self.features = RandomPyramid()
        g = torch.Generator().manual_seed(seed)
        self.register_buffer("head", torch.randn(n_classes, 64, generator=g) * 4.0, persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        f = self.features(x)[-1].mean(dim=(2, 3))
        f = f / (f.norm(dim=1, keepdim=True) + 1e-8)
        return torch.softmax(f @ self.head.to(f.dtype).T, dim=1)


@dataclass(frozen=True)
class ExtractorMeta:
    factory: Callable[[], FeatureExtractor]
    description: str
    needs_download: bool = False


_REGISTRY: Dict[str, ExtractorMeta] = {
    "random": ExtractorMeta(RandomPyramid, "fixed-seed random conv pyramid (offline default)"),
    "identity": ExtractorMeta(IdentityExtractor, "raw pixels as a single layer"),
    "vgg19": ExtractorMeta(VGG19Extractor, "ImageNet VGG19 relu features (torchvision)", needs_download=True),
}


def extractor_names() -> list[str]:
    return sorted(_REGISTRY)


def resolve_extractor(name: str) -> FeatureExtractor:
    meta = _REGISTRY.get(name)
    if meta is None:
        raise ConfigurationError(f"unknown extractor '{name}'; known: {extractor_names()}")
    return meta.factory()
