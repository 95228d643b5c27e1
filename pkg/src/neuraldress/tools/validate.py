from __future__ import annotations
from pathlib import Path
from typing import Iterable, List
import typer
from pydantic import BaseModel, ValidationError

from neuraldress.engine.errors import ConfigurationError
from neuraldress.engine.extractors import extractor_names
from neuraldress.engine.fitting import check_schedule
from neuraldress.engine.loader import ConfigAdapter, ScheduleAdapter, _iter_files, _load_file
from neuraldress.engine.settings import FitSchedule, ProjectConfig


# Linting and error reporting
class LintCounters:
    def __init__(self):
        self.errors = 0
        self.warnings = 0

def emit_error(msg: str, counters: LintCounters):
    typer.echo(f"[ERROR] {msg}", err=True)
    counters.errors += 1

def emit_warn(msg: str, counters: LintCounters):
    typer.echo(f"[WARN] {msg}")
    counters.warnings += 1


def _unknown_keys(raw: dict, model: type[BaseModel], prefix: str = "") -> List[str]:
    """Keys pydantic would silently ignore, as dotted paths."""
    out: List[str] = []
    fields = model.model_fields
    for key, value in raw.items():
        if key not in fields:
            out.append(prefix + key)
            continue
        ann = fields[key].annotation
        if isinstance(value, dict) and isinstance(ann, type) and issubclass(ann, BaseModel):
            out.extend(_unknown_keys(value, ann, f"{prefix}{key}."))
    return out


def _check_pow2(value: int, what: str, file_path: str, counters: LintCounters):
    if value < 1 or value & (value - 1):
        emit_error(f"{file_path}: {what} must be a power of two, got {value}", counters)


def _check_schedule(sched: FitSchedule, file_path: str, counters: LintCounters, where: str = "fewshot"):
    try:
        check_schedule(sched)
    except ConfigurationError as e:
        emit_error(f"{file_path}:{where}: {e}", counters)
    for stage in sched.stages:
        if stage.iterations == 0:
            emit_warn(f"{file_path}:{where}: stage '{stage.name}' has zero iterations", counters)
    if sched.extractor not in extractor_names():
        emit_error(f"{file_path}:{where}.extractor: unknown extractor '{sched.extractor}'", counters)


def _check_config(cfg: ProjectConfig, file_path: str, counters: LintCounters):
    for where, name in (("encoder", cfg.encoder.extractor), ("video", cfg.video.extractor),
                        ("metrics", cfg.metrics.extractor)):
        if name not in extractor_names():
            emit_error(f"{file_path}:{where}.extractor: unknown extractor '{name}'", counters)
    step = 2 ** cfg.renderer.depth
    for where, size in (("gan.image_size", cfg.gan.image_size), ("video.image_size", cfg.video.image_size),
                        ("encoder.image_size", cfg.encoder.image_size), ("fewshot.image_size", cfg.fewshot.image_size)):
        _check_pow2(size, where, file_path, counters)
        if size % step:
            emit_error(f"{file_path}: {where} {size} is not divisible by the renderer's {step}x downsampling", counters)
    levels = cfg.gan.levels()
    for r in cfg.gan.resolved_spectral_levels():
        if r not in levels:
            emit_error(f"{file_path}: gan.spectral_levels contains {r}, not in the pyramid {levels}", counters)
    if cfg.encoder.image_size < 32:
        emit_error(f"{file_path}: encoder.image_size must be at least 32", counters)
    if cfg.gan.style_mixing_prob > 0:
        emit_warn(f"{file_path}: gan.style_mixing_prob > 0 enables style mixing", counters)
    if cfg.gan.steps < cfg.gan.r1_every or cfg.gan.steps < cfg.gan.path_every:
        emit_warn(f"{file_path}: gan.steps shorter than the lazy regularization interval", counters)
    _check_schedule(cfg.fewshot, file_path, counters)


def lint_files(paths: Iterable[Path], strict: bool = False) -> LintCounters:
    counters = LintCounters()
    for fp in paths:
        try:
            raw = _load_file(fp)
        except Exception as e:
            emit_error(f"{fp}: unreadable: {e}", counters)
            continue
        if not isinstance(raw, dict):
            emit_error(f"{fp}: top level must be a mapping", counters)
            continue
        is_schedule = "stages" in raw
        model = FitSchedule if is_schedule else ProjectConfig
        for key in _unknown_keys(raw, model):
            msg = f"{fp}: unknown key '{key}' is ignored"
            if strict:
                emit_error(msg, counters)
            else:
                emit_warn(msg, counters)
        try:
            obj = (ScheduleAdapter if is_schedule else ConfigAdapter).validate_python(raw)
        except ValidationError as e:
            emit_error(f"{fp}: {e}", counters)
            continue
        if is_schedule:
            _check_schedule(obj, str(fp), counters, where="stages")
        else:
            _check_config(obj, str(fp), counters)
    return counters


def _expand(paths: List[Path]) -> List[Path]:
    out: List[Path] = []
    for p in paths:
        out.extend(_iter_files(p) if p.is_dir() else [p])
    return out


app = typer.Typer(add_completion=False)

@app.command("export-schemas")
def export_schemas_cmd(out: Path = typer.Option(Path("docs/schemas"), "--out")):
    from neuraldress.tools.export_schemas import export_schemas
    export_schemas(out)
    typer.echo(f"Exported schemas to {out}")

@app.command("validate")
def validate(
    paths: List[Path] = typer.Argument(..., help="Config or schedule files, or directories of them"),
    strict: bool = typer.Option(False, "--strict", help="Unknown keys are errors"),
):
    files = _expand(paths)
    counters = lint_files(files, strict)
    typer.echo(f"Validated {len(files)} config files: {counters.errors} error(s), {counters.warnings} warning(s).")
    if counters.errors > 0:
        raise typer.Exit(code=1)


if __name__ == "__main__":
    app()
