from __future__ import annotations
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .body import ArticulatedBody, pose_mesh
from .camera import Camera
from .container import load_arrays, load_state, save_arrays, save_module
from .errors import ConfigurationError, ParameterError
from .raster import ImageSize, RasterBuffers, buffers_to_tensors, rasterize
from .settings import RendererConfig
from .texture import NeuralTexture, TextureLike, assemble_input, check_channels, texture_map

MASK_CHANNELS = ("foreground", "head", "hands")


def _block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.LeakyReLU(0.2),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.LeakyReLU(0.2),
    )


def _head(trunk: int, out: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(trunk, trunk, 3, padding=1), nn.LeakyReLU(0.2), nn.Conv2d(trunk, out, 1))


class NeuralRenderer(nn.Module):
    """Skip-connected encoder-decoder from the (L+2)-channel raster input to RGB + 3 mask logits."""

    def __init__(self, config: Optional[RendererConfig] = None) -> None:
        super().__init__()
        self.config = config or RendererConfig()
        cfg = self.config
        widths = [min(cfg.base_width * 2 ** i, cfg.max_width) for i in range(cfg.depth + 1)]
        self.in_channels = cfg.texture_channels + 2
        self.inc = _block(self.in_channels, widths[0])
        self.down = nn.ModuleList([_block(widths[i], widths[i + 1]) for i in range(cfg.depth)])
        self.up = nn.ModuleList([_block(widths[i + 1] + widths[i], widths[i]) for i in range(cfg.depth)])
        self.trunk = nn.Sequential(nn.Conv2d(widths[0], cfg.trunk_channels, 3, padding=1), nn.LeakyReLU(0.2))
        self.rgb_head = _head(cfg.trunk_channels, 3)
        self.mask_head = _head(cfg.trunk_channels, len(MASK_CHANNELS))

    @property
    def texture_channels(self) -> int:
        return self.config.texture_channels

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if x.shape[1] != self.in_channels:
            raise ConfigurationError(f"renderer expects {self.in_channels} input channels, got {x.shape[1]}")
        step = 2 ** self.config.depth
        if x.shape[-1] % step or x.shape[-2] % step:
            raise ParameterError(f"input size {tuple(x.shape[-2:])} must be divisible by {step}")
        skips = [self.inc(x)]
        for down in self.down:
            skips.append(down(F.avg_pool2d(skips[-1], 2)))
        y = skips.pop()
        for up in reversed(self.up):
            skip = skips.pop()
            y = F.interpolate(y, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            y = up(torch.cat([y, skip], dim=1))
        t = self.trunk(y)
        return torch.sigmoid(self.rgb_head(t)), self.mask_head(t)

    def forward_stacked(self, x: torch.Tensor) -> torch.Tensor:
        """Six channels: RGB then foreground/head/hands probabilities."""
        rgb, logits = self(x)
        return torch.cat([rgb, torch.sigmoid(logits)], dim=1)


def finalize_mask(predicted: torch.Tensor, mesh_mask: torch.Tensor) -> torch.Tensor:
    """Pixels covered by the body mesh are foreground regardless of the prediction."""
    if predicted.shape[-2:] != mesh_mask.shape[-2:]:
        raise ParameterError("predicted mask and mesh mask differ in resolution")
    return torch.maximum(predicted, mesh_mask.to(predicted.dtype))


def compose_on_background(rgb: torch.Tensor, mask: torch.Tensor, background: float | torch.Tensor = 0.0) -> torch.Tensor:
    return rgb * mask + (1.0 - mask) * background


def save_renderer(path: Path, renderer: NeuralRenderer, extra: Optional[dict] = None) -> None:
    save_module(path, renderer, renderer.config.model_dump(), extra)


def load_renderer(path: Path) -> NeuralRenderer:
    state, meta = load_state(path)
    if meta.get("kind") != NeuralRenderer.__name__:
        raise ConfigurationError(f"{path} holds a {meta.get('kind')}, not a renderer checkpoint")
    r = NeuralRenderer(RendererConfig.model_validate(meta["config"]))
    r.load_state_dict(state)
    return r


@dataclass(eq=False)
class Avatar:
    shape: np.ndarray
    texture: NeuralTexture
    latents: Optional[np.ndarray] = None  # (n_levels, d) style vectors the texture came from
    provenance: Dict[str, Any] = field(default_factory=dict)

    @property
    def channels(self) -> int:
        return self.texture.channels

    @property
    def resolution(self) -> int:
        return self.texture.top_resolution


def save_avatar(path: Path, avatar: Avatar) -> None:
    arrays = dict(avatar.texture.to_arrays())
    arrays["shape"] = np.asarray(avatar.shape, dtype=np.float64)
    if avatar.latents is not None:
        arrays["latents"] = np.asarray(avatar.latents)
    meta = {
        "kind": "avatar",
        "channels": avatar.channels,
        "resolution": avatar.resolution,
        "provenance": avatar.provenance,
    }
    save_arrays(path, arrays, meta)


def load_avatar(path: Path) -> Avatar:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "avatar":
        raise ConfigurationError(f"{path} is not an avatar file")
    latents = arrays.pop("latents", None)
    shape = arrays.pop("shape")
    return Avatar(shape=shape, texture=NeuralTexture.from_arrays(arrays), latents=latents,
                  provenance=meta.get("provenance", {}))


@dataclass(eq=False)
class RenderResult:
    rgb: torch.Tensor    # (1, 3, H, W) in [0, 1]
    masks: torch.Tensor  # (1, 3, H, W) probabilities: foreground, head, hands
    buffers: RasterBuffers


def render_buffers(renderer: NeuralRenderer, buffers: list[RasterBuffers], texture: TextureLike) -> tuple[torch.Tensor, torch.Tensor]:
    check_channels(texture, renderer.texture_channels)
    tex = texture_map(texture)
    uv, mask = buffers_to_tensors(buffers, dtype=tex.dtype, device=tex.device)
    rgb, logits = renderer(assemble_input(uv, mask, tex))
    return rgb, torch.sigmoid(logits)


def render_avatar(
    renderer: NeuralRenderer,
    avatar: Avatar,
    body: ArticulatedBody,
    pose,
    camera: Camera,
    image_size: ImageSize,
    finalize: bool = False,
) -> RenderResult:
    check_channels(avatar.texture, renderer.texture_channels)
    buffers = rasterize(pose_mesh(body, pose, avatar.shape), camera, image_size)
    rgb, masks = render_buffers(renderer, [buffers], avatar.texture)
    if finalize:
        _, mesh = buffers_to_tensors([buffers], dtype=masks.dtype, device=masks.device)
        masks = torch.cat([finalize_mask(masks[:, :1], mesh), masks[:, 1:]], dim=1)
    return RenderResult(rgb=rgb, masks=masks, buffers=buffers)
