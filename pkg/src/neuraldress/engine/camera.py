from __future__ import annotations
import math
from typing import Tuple
import numpy as np
from pydantic import BaseModel, ConfigDict

Vec3 = Tuple[float, float, float]


class Camera(BaseModel):
    """Pinhole camera in pixel units (x right, y down, z forward); X_cam = R X + t."""

    model_config = ConfigDict(frozen=True)

    focal: float
    principal: Tuple[float, float]
    rotation: Tuple[Vec3, Vec3, Vec3] = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    translation: Vec3 = (0.0, 0.0, 0.0)

    @property
    def R(self) -> np.ndarray:
        return np.asarray(self.rotation, dtype=np.float64)

    @property
    def t(self) -> np.ndarray:
        return np.asarray(self.translation, dtype=np.float64)

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def scaled(self, factor: float) -> "Camera":
        """Same view for an image resized by `factor`."""
        if factor == 1:
            return self
        cx, cy = self.principal
        return self.model_copy(update={"focal": self.focal * factor, "principal": (cx * factor, cy * factor)})


def _rows(m: np.ndarray) -> Tuple[Vec3, Vec3, Vec3]:
    return tuple(tuple(float(v) for v in row) for row in m)  # type: ignore[return-value]


def look_at(eye, target, focal: float, image_size: int, up=(0.0, 1.0, 0.0)) -> Camera:
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    f = target - eye
    f = f / np.linalg.norm(f)
    right = np.cross(f, np.asarray(up, dtype=np.float64))
    right = right / np.linalg.norm(right)
    down = np.cross(f, right)
    R = np.stack([right, down, f])
    t = -R @ eye
    c = image_size / 2.0
    return Camera(focal=focal, principal=(c, c), rotation=_rows(R), translation=tuple(float(v) for v in t))


def orbit_camera(
    azimuth_deg: float,
    elevation_deg: float,
    distance: float,
    focal: float,
    image_size: int,
    target: Vec3 = (0.0, 0.9, 0.0),
) -> Camera:
    """Camera on a sphere around `target`; azimuth 0 looks at the body's front (+z side)."""
    az = math.radians(azimuth_deg)
    el = math.radians(elevation_deg)
    tx, ty, tz = target
    eye = (
        tx + distance * math.sin(az) * math.cos(el),
        ty + distance * math.sin(el),
        tz + distance * math.cos(az) * math.cos(el),
    )
    return look_at(eye, target, focal, image_size)


def frontal_camera(image_size: int, distance: float = 3.0, focal_ratio: float = 1.6, target_height: float = 0.9) -> Camera:
    return orbit_camera(0.0, 0.0, distance, focal_ratio * image_size, image_size, (0.0, target_height, 0.0))
