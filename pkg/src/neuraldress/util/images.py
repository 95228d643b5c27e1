from __future__ import annotations
from pathlib import Path
import numpy as np
import torch
from PIL import Image

from ..engine.errors import DataError


def to_uint8(image: np.ndarray) -> np.ndarray:
    """(H, W, C) float in [0, 1] -> uint8, round-half-to-even."""
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path: Path, image: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = image if image.dtype == np.uint8 else to_uint8(image)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path, format="PNG")


def load_png(path: Path) -> np.ndarray:
    """(H, W, 3) float64 in [0, 1]."""
    if not path.exists():
        raise DataError(f"image not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    """(C, H, W) or (1, C, H, W) tensor -> (H, W, C) numpy."""
    if t.dim() == 4:
        t = t[0]
    return t.detach().cpu().to(torch.float64).permute(1, 2, 0).numpy()


def image_to_tensor(image: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).to(dtype)


def save_tensor_png(path: Path, t: torch.Tensor) -> None:
    img = tensor_to_image(t)
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    save_png(path, img)
