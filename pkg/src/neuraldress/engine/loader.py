from __future__ import annotations
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Tuple
import json
import yaml
from pydantic import TypeAdapter
from .errors import ConfigurationError
from .settings import FitSchedule, ProjectConfig
from ..util.paths import content_dir

ConfigAdapter = TypeAdapter(ProjectConfig)
ScheduleAdapter = TypeAdapter(FitSchedule)


def _load_file(path: Path) -> dict:
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() in [".yaml", ".yml"]:
        return yaml.safe_load(text) or {}
    return json.loads(text)


def _iter_files(root: Path, exts: Tuple[str, ...] = (".json", ".yaml", ".yml")) -> Iterable[Path]:
    if not root.exists():
        return
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.suffix.lower() in exts:
            yield p


def load_config(path: Path | None = None) -> ProjectConfig:
    """Load a project config file; with no path, the shipped desk config."""
    if path is None:
        return shipped_configs().get("desk")
    return ConfigAdapter.validate_python(_load_file(path))


def load_schedule(path: Path) -> FitSchedule:
    data = _load_file(path)
    # A full project config is accepted too; its few-shot block is the schedule.
    if "stages" not in data and "fewshot" in data:
        data = data["fewshot"]
    return ScheduleAdapter.validate_python(data)


@dataclass
class ConfigIndex:
    configs: Dict[str, ProjectConfig]

    def get(self, name: str) -> ProjectConfig:
        if name not in self.configs:
            raise ConfigurationError(f"unknown config '{name}'; shipped: {self.names()}")
        return self.configs[name].model_copy(deep=True)

    def names(self) -> list[str]:
        return sorted(self.configs)


def load_configs(base_dir: Path) -> ConfigIndex:
    configs: Dict[str, ProjectConfig] = {}
    for fp in _iter_files(base_dir):
        cfg = ConfigAdapter.validate_python(_load_file(fp))
        if fp.stem in configs:
            raise ConfigurationError(f"duplicate config name {fp.stem} in {fp}")
        configs[fp.stem] = cfg
    return ConfigIndex(configs=configs)


def shipped_configs() -> ConfigIndex:
    return load_configs(content_dir() / "configs")
