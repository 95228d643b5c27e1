from __future__ import annotations
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple, Union
import numpy as np
import torch

from .body import PosedMesh
from .camera import Camera
from .container import load_arrays, save_arrays
from .errors import ParameterError
from .scan import scan_triangles

ZNEAR = 1e-3

ImageSize = Union[int, Tuple[int, int]]


@dataclass(eq=False)
class RasterBuffers:
    uv: np.ndarray          # (H, W, 2), 0 on background
    face_index: np.ndarray  # (H, W) int64, -1 on background
    mask: np.ndarray        # (H, W) uint8 in {0, 1}
    depth: np.ndarray       # (H, W), inf on background
    region: np.ndarray      # (H, W) int64, -1 on background

    @property
    def size(self) -> Tuple[int, int]:
        return self.face_index.shape  # type: ignore[return-value]

    @classmethod
    def blank(cls, height: int, width: int) -> "RasterBuffers":
        return cls(
            uv=np.zeros((height, width, 2)),
            face_index=np.full((height, width), -1, dtype=np.int64),
            mask=np.zeros((height, width), dtype=np.uint8),
            depth=np.full((height, width), np.inf),
            region=np.full((height, width), -1, dtype=np.int64),
        )

    def region_mask(self, label: int) -> np.ndarray:
        return (self.region == label).astype(np.float64)

    def save(self, path: Path) -> None:
        save_arrays(
            path,
            {"uv": self.uv, "face_index": self.face_index, "mask": self.mask, "depth": self.depth, "region": self.region},
            {"kind": "raster_buffers"},
        )

    @classmethod
    def load(cls, path: Path) -> "RasterBuffers":
        a, _ = load_arrays(path)
        return cls(uv=a["uv"], face_index=a["face_index"], mask=a["mask"], depth=a["depth"], region=a["region"])


def _hw(image_size: ImageSize) -> Tuple[int, int]:
    if isinstance(image_size, int):
        return image_size, image_size
    h, w = image_size
    return int(h), int(w)


def project(vertices: np.ndarray, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates (N, 2) and camera-space depth (N,)."""
    cam = camera.to_camera(vertices)
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        x = camera.focal * cam[:, 0] / z + camera.principal[0]
        y = camera.focal * cam[:, 1] / z + camera.principal[1]
    return np.stack([x, y], axis=1), z


def rasterize(mesh: PosedMesh, camera: Camera, image_size: ImageSize) -> RasterBuffers:
    """Z-buffer rasterization; triangles touching the near plane are dropped whole."""
    if not camera.focal > 0:
        raise ParameterError(f"camera focal must be > 0, got {camera.focal}")
    h, w = _hw(image_size)
    if h <= 0 or w <= 0:
        raise ParameterError(f"image size must be positive, got {(h, w)}")
    if len(mesh.faces) == 0:
        return RasterBuffers.blank(h, w)
    pts, z = project(mesh.vertices, camera)
    valid = (z[mesh.faces] > ZNEAR).all(axis=1)
    inv_z = np.where(z > ZNEAR, 1.0 / np.where(z > ZNEAR, z, 1.0), 0.0)
    scan = scan_triangles(pts, mesh.faces, h, w, inv_depth=inv_z, valid=valid)

    out = RasterBuffers.blank(h, w)
    covered = scan.face_index >= 0
    f = scan.face_index[covered]
    uv_corner = mesh.uv_coords[mesh.faces[f]]  # (N, 3, 2)
    out.uv[covered] = np.clip(np.einsum("nk,nkc->nc", scan.bary[covered], uv_corner), 0.0, 1.0)
    out.face_index = scan.face_index
    out.mask = covered.astype(np.uint8)
    out.depth = scan.depth
    out.region[covered] = mesh.face_regions[f]
    return out


def buffers_to_tensors(
    buffers: Sequence[RasterBuffers], dtype: torch.dtype = torch.float32, device: str | torch.device = "cpu"
) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack buffers into (B, H, W, 2) uv and (B, 1, H, W) mask tensors."""
    uv = torch.from_numpy(np.stack([b.uv for b in buffers])).to(device=device, dtype=dtype)
    mask = torch.from_numpy(np.stack([b.mask for b in buffers])[:, None]).to(device=device, dtype=dtype)
    return uv, mask
