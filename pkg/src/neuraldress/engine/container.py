from __future__ import annotations
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional
import io
import json
import zipfile
import numpy as np
import torch

from .errors import DataError

META_KEY = "__meta__"
# Fixed member timestamp keeps identical payloads byte-identical on disk.
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_arrays(path: Path, arrays: Mapping[str, np.ndarray], meta: Optional[dict] = None) -> None:
    """Write a named-array container (.npz layout, readable by numpy.load)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    members = dict(arrays)
    if meta is not None:
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        members[META_KEY] = np.frombuffer(blob, dtype=np.uint8)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(members):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(members[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())


def load_arrays(path: Path) -> tuple[Dict[str, np.ndarray], dict]:
    if not path.exists():
        raise DataError(f"container not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: np.array(data[k]) for k in data.files}
    meta_raw = arrays.pop(META_KEY, None)
    meta = json.loads(meta_raw.tobytes().decode("utf-8")) if meta_raw is not None else {}
    return arrays, meta


def save_module(path: Path, module: torch.nn.Module, config: dict, extra: Optional[dict] = None) -> None:
    """Checkpoint: every state-dict entry as a named array, architecture config in the header."""
    arrays = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
    meta = {"kind": type(module).__name__, "config": config}
    if extra:
        meta.update(extra)
    save_arrays(path, arrays, meta)


def load_state(path: Path) -> tuple[Dict[str, torch.Tensor], dict]:
    arrays, meta = load_arrays(path)
    state = {k: torch.from_numpy(v) for k, v in arrays.items()}
    return state, meta


@dataclass
class RunManifest:
    command: str
    seed: int
    config_hash: str
    arguments: Dict[str, Any] = field(default_factory=dict)
    versions: Dict[str, str] = field(default_factory=dict)

    def write(self, out_dir: Path) -> Path:
        out_dir.mkdir(parents=True, exist_ok=True)
        p = out_dir / "manifest.json"
        payload = {
            "command": self.command,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "arguments": self.arguments,
            "versions": self.versions,
        }
        p.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
        return p


def read_manifest(out_dir: Path) -> RunManifest:
    data = json.loads((out_dir / "manifest.json").read_text(encoding="utf-8"))
    return RunManifest(
        command=data.get("command", "unknown"),
        seed=data.get("seed", 0),
        config_hash=data.get("config_hash", ""),
        arguments=data.get("arguments", {}),
        versions=data.get("versions", {}),
    )


def component_versions() -> Dict[str, str]:
    from .. import __version__
    return {"neuraldress": __version__, "torch": torch.__version__, "numpy": np.__version__}
