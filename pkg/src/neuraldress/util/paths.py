from __future__ import annotations
from pathlib import Path
import sys

def frozen_base_dir() -> Path:
    # When packaged with PyInstaller --onefile, data is unpacked to sys._MEIPASS
    if hasattr(sys, "_MEIPASS"):
        return Path(sys._MEIPASS) / "neuraldress"  # type: ignore[attr-defined]
    # dev mode: src/neuraldress
    return Path(__file__).resolve().parent.parent

def content_dir() -> Path:
    # Shipped configs live in src/neuraldress/content
    return frozen_base_dir() / "content"
