from __future__ import annotations
from typing import Dict, Optional, Sequence, Union
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .body import PosedMesh
from .camera import Camera
from .errors import ConfigurationError, ParameterError
from .raster import ImageSize, RasterBuffers, buffers_to_tensors, rasterize
from .settings import TextureConfig


def _levels(min_resolution: int, top_resolution: int) -> list[int]:
    out, r = [], min_resolution
    while r <= top_resolution:
        out.append(r)
        r *= 2
    if not out or out[-1] != top_resolution:
        raise ParameterError(f"resolutions {min_resolution}..{top_resolution} do not form a doubling chain")
    return out


class NeuralTexture(nn.Module):
    """Mipmap stack; the working texture is the sum of every level upsampled to the top."""

    def __init__(
        self,
        channels: int = 16,
        top_resolution: int = 64,
        min_resolution: int = 8,
        init_std: float = 0.01,
        generator: Optional[torch.Generator] = None,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        super().__init__()
        self.channels = channels
        self.mipmaps = nn.ParameterList([
            nn.Parameter(torch.randn(1, channels, r, r, generator=generator, dtype=dtype) * init_std)
            for r in _levels(min_resolution, top_resolution)
        ])

    @classmethod
    def from_config(cls, cfg: TextureConfig, generator: Optional[torch.Generator] = None) -> "NeuralTexture":
        return cls(cfg.channels, cfg.top_resolution, cfg.min_resolution, cfg.init_std, generator)

    @classmethod
    def from_map(cls, texture_map: torch.Tensor, min_resolution: int = 8) -> "NeuralTexture":
        """Stack holding `texture_map` at the top level and zeros below."""
        m = texture_map.detach()
        if m.dim() == 3:
            m = m[None]
        if m.dim() != 4 or m.shape[0] != 1 or m.shape[2] != m.shape[3]:
            raise ParameterError(f"expected a (1, C, R, R) map, got {tuple(m.shape)}")
        top = m.shape[-1]
        tex = cls(m.shape[1], top, min(min_resolution, top), init_std=0.0, dtype=m.dtype)
        with torch.no_grad():
            for p in tex.mipmaps:
                p.zero_()
            tex.mipmaps[-1].copy_(m)
        return tex.to(m.device)

    @property
    def resolutions(self) -> list[int]:
        return [p.shape[-1] for p in self.mipmaps]

    @property
    def top_resolution(self) -> int:
        return self.resolutions[-1]

    def forward(self) -> torch.Tensor:
        return composite_texture(self)

    def to_arrays(self) -> Dict[str, np.ndarray]:
        out = {f"mip{p.shape[-1]}": p.detach().cpu().numpy()[0] for p in self.mipmaps}
        out["channels"] = np.array(self.channels, dtype=np.int64)
        return out

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "NeuralTexture":
        keys = sorted((k for k in arrays if k.startswith("mip")), key=lambda k: int(k[3:]))
        if not keys:
            raise ParameterError("no mipmap arrays found")
        levels = [int(k[3:]) for k in keys]
        if "channels" in arrays:
            channels = int(np.asarray(arrays["channels"]).reshape(-1)[0])
        else:
            channels = arrays[keys[0]].shape[0]
        first = torch.from_numpy(np.ascontiguousarray(arrays[keys[0]]))
        tex = cls(channels, levels[-1], levels[0], init_std=0.0, dtype=first.dtype)
        if tex.resolutions != levels:
            raise ParameterError(f"mipmap levels {levels} are not a doubling chain")
        with torch.no_grad():
            for p, k in zip(tex.mipmaps, keys):
                p.copy_(torch.from_numpy(np.ascontiguousarray(arrays[k]))[None])
        return tex


def composite_texture(texture: NeuralTexture) -> torch.Tensor:
    """(1, L, top, top): sum of the bilinearly upsampled mipmaps."""
    top = texture.top_resolution
    out = texture.mipmaps[-1]
    for p in texture.mipmaps[:-1]:
        out = out + F.interpolate(p, size=(top, top), mode="bilinear", align_corners=False)
    return out


TextureLike = Union[NeuralTexture, torch.Tensor]


def texture_map(texture: TextureLike) -> torch.Tensor:
    if isinstance(texture, NeuralTexture):
        return composite_texture(texture)
    if texture.dim() == 3:
        return texture[None]
    return texture


def sample_texture(uv: torch.Tensor, mask: torch.Tensor, texture: TextureLike) -> torch.Tensor:
    """Bilinear lookup of the composite texture at (B, H, W, 2) uv; zero where mask is 0.

    UVs are treated as constants. Row i of the texture sits at v = (i + 0.5) / R.
    """
    tex = texture_map(texture)
    B = uv.shape[0]
    if tex.shape[0] == 1 and B > 1:
        tex = tex.expand(B, -1, -1, -1)
    elif tex.shape[0] != B:
        raise ParameterError(f"texture batch {tex.shape[0]} does not match raster batch {B}")
    grid = uv.detach().to(dtype=tex.dtype) * 2.0 - 1.0
    out = F.grid_sample(tex, grid, mode="bilinear", padding_mode="border", align_corners=False)
    return out * mask.to(dtype=tex.dtype)


def assemble_input(uv: torch.Tensor, mask: torch.Tensor, texture: TextureLike) -> torch.Tensor:
    """(B, L+2, H, W): sampled texture followed by the masked raw UV channels."""
    sampled = sample_texture(uv, mask, texture)
    uv_ch = uv.detach().to(dtype=sampled.dtype).permute(0, 3, 1, 2) * mask.to(dtype=sampled.dtype)
    return torch.cat([sampled, uv_ch], dim=1)


def buffers_input(buffers: Sequence[RasterBuffers], texture: TextureLike) -> torch.Tensor:
    tex = texture_map(texture)
    uv, mask = buffers_to_tensors(buffers, dtype=tex.dtype, device=tex.device)
    return assemble_input(uv, mask, tex)


def render_input(mesh: PosedMesh, camera: Camera, texture: TextureLike, image_size: ImageSize) -> tuple[torch.Tensor, RasterBuffers]:
    buffers = rasterize(mesh, camera, image_size)
    return buffers_input([buffers], texture), buffers


def check_channels(texture: TextureLike, expected: int) -> None:
    c = texture.channels if isinstance(texture, NeuralTexture) else texture_map(texture).shape[1]
    if c != expected:
        raise ConfigurationError(f"texture has {c} channels, renderer expects {expected}")
