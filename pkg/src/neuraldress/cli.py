from __future__ import annotations
import functools
import json
import logging
import random
from pathlib import Path
from typing import Any, Callable, List, Optional
import numpy as np
import torch
import typer
from pydantic import ValidationError

from .engine.body import a_pose, load_body
from .engine.camera import orbit_camera
from .engine.container import RunManifest, component_versions
from .engine.dataset import generate_synthetic_dataset, load_dataset, load_frames
from .engine.encoders import StyleEncoder, load_encoder, save_encoder, train_a_encoder, train_g_encoder
from .engine.errors import ConfigurationError, DataError, NeuralDressError
from .engine.extractors import resolve_extractor
from .engine.fitting import fit_fewshot, fit_video_avatar, pretrain_renderer, redress
from .engine.gan import load_generative, sample_truncated, save_generative, train_generative
from .engine.loader import load_config, load_schedule
from .engine.metrics import compare_image_sets, fid_proxy, psnr, summarize, view_consistency, write_metrics_csv
from .engine.renderer import NeuralRenderer, load_avatar, load_renderer, render_avatar, save_avatar, save_renderer
from .engine.settings import ABLATIONS, ProjectConfig, config_hash
from .engine.trace import TrainingLog
from .util.console import console, setup_logging, summary_table
from .util.images import load_png, save_png, save_tensor_png, tensor_to_image

log = logging.getLogger(__name__)

app = typer.Typer(help="Neural textures on an articulated body: datasets, avatars, generative model, evaluation.")
dataset_app = typer.Typer(help="Synthetic datasets")
avatar_app = typer.Typer(help="Avatar fitting, rendering and redressing")
gan_app = typer.Typer(help="Generative texture model")
encoder_app = typer.Typer(help="Image-to-latent encoders")
eval_app = typer.Typer(help="Metrics and ablations")
app.add_typer(dataset_app, name="dataset")
app.add_typer(avatar_app, name="avatar")
app.add_typer(gan_app, name="gan")
app.add_typer(encoder_app, name="encoder")
app.add_typer(eval_app, name="eval")

ConfigOpt = typer.Option(None, "--config", "-c", help="Project config (YAML/JSON); default: shipped desk config")
SeedOpt = typer.Option(None, "--seed", help="Root seed; default: the config's seed")


@app.callback()
def main(verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging")) -> None:
    setup_logging(verbose)


def guarded(fn: Callable[..., Any]) -> Callable[..., Any]:
    """Domain, validation and missing-file errors become a red message and exit code 1."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (NeuralDressError, ValidationError, FileNotFoundError) as e:
            console.print(f"[red]error:[/red] {e}")
            raise typer.Exit(code=1)

    return wrapper


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def _setup(config_path: Optional[Path], seed: Optional[int]) -> tuple[ProjectConfig, int]:
    cfg = load_config(config_path)
    root_seed = cfg.seed if seed is None else seed
    seed_everything(root_seed)
    return cfg, root_seed


def _manifest(out: Path, command: str, seed: int, cfg: Optional[ProjectConfig], /, **arguments: Any) -> None:
    """Commands without a config record an empty config hash; their arguments name every input."""
    args = {k: str(v) if isinstance(v, Path) else v for k, v in arguments.items()}
    RunManifest(command, seed, config_hash(cfg) if cfg is not None else "", args, component_versions()).write(out)


def _person_frames(root: Path, person: Optional[str], image_size: int, limit: Optional[int] = None):
    ds = load_dataset(root)
    people = sorted({r.person_id for r in ds.records})
    if not people:
        raise DataError(f"{root} holds no frames")
    pid = person or people[0]
    recs = [r for r in ds.records if r.person_id == pid]
    if not recs:
        raise DataError(f"person '{pid}' not found; available: {people}")
    if limit is not None:
        recs = recs[:limit]
    return ds, load_frames(ds, image_size, recs)


# --- dataset ----------------------------------------------------------------

@dataset_app.command("synth")
@guarded
def dataset_synth(
    out: Path = typer.Option(..., "--out", "-o"),
    config: Optional[Path] = ConfigOpt,
    seed: Optional[int] = SeedOpt,
    people: Optional[int] = typer.Option(None, "--people"),
    frames: Optional[int] = typer.Option(None, "--frames"),
    workers: int = typer.Option(0, "--workers"),
) -> None:
    cfg, root_seed = _setup(config, seed)
    world = cfg.world.model_copy(update={"seed": root_seed})
    summary = generate_synthetic_dataset(world, out, cfg.body, people, frames, workers)
    _manifest(out, "dataset synth", root_seed, cfg, people=summary.n_people, frames=summary.n_frames)
    console.print(f"Wrote {summary.n_frames} frames of {summary.n_people} people to {out}")


# --- avatars ----------------------------------------------------------------

@avatar_app.command("pretrain-renderer")
@guarded
def avatar_pretrain_renderer(
    dataset: Path = typer.Option(..., "--dataset", "-d"),
    out: Path = typer.Option(..., "--out", "-o"),
    config: Optional[Path] = ConfigOpt,
    seed: Optional[int] = SeedOpt,
    steps: Optional[int] = typer.Option(None, "--steps"),
) -> None:
    cfg, root_seed = _setup(config, seed)
    video = cfg.video if steps is None else cfg.video.model_copy(update={"steps": steps})
    ds = load_dataset(dataset)
    frames = load_frames(ds, video.image_size)
    renderer = NeuralRenderer(cfg.renderer)
    tlog = TrainingLog()
    avatars = pretrain_renderer(frames, ds.body, renderer, video, cfg.texture, root_seed, tlog)
    save_renderer(out / "renderer.npz", renderer)
    for pid, av in avatars.items():
        save_avatar(out / f"{pid}.npz", av)
    tlog.write_csv(out / "train_log.csv")
    _manifest(out, "avatar pretrain-renderer", root_seed, cfg, dataset=dataset, steps=video.steps)
    console.print(f"Renderer and {len(avatars)} avatars written to {out}")


@avatar_app.command("fit-video")
@guarded
def avatar_fit_video(
    dataset: Path = typer.Option(..., "--dataset", "-d"),
    out: Path = typer.Option(..., "--out", "-o"),
    person: Optional[str] = typer.Option(None, "--person"),
    renderer_path: Optional[Path] = typer.Option(None, "--renderer", help="Pretrained renderer; trained on the other people when omitted"),
    holdout: int = typer.Option(1, "--holdout", help="Last N frames of the person are kept for evaluation"),
    train_renderer: bool = typer.Option(False, "--train-renderer", help="Fine-tune the renderer with the texture"),
    config: Optional[Path] = ConfigOpt,
    seed: Optional[int] = SeedOpt,
    steps: Optional[int] = typer.Option(None, "--steps"),
) -> None:
    cfg, root_seed = _setup(config, seed)
    video = cfg.video if steps is None else cfg.video.model_copy(update={"steps": steps})
    ds, frames = _person_frames(dataset, person, video.image_size)
    pid = frames.records[0].person_id
    if holdout >= len(frames):
        raise DataError(f"holdout {holdout} leaves no frames to fit (person has {len(frames)})")
    fit_idx = list(range(len(frames) - holdout))
    test_idx = list(range(len(frames) - holdout, len(frames)))
    tlog = TrainingLog()
    if renderer_path is not None:
        renderer = load_renderer(renderer_path)
    else:
        others = [r for r in ds.records if r.person_id != pid]
        if not others:
            raise ConfigurationError("no pretrained renderer given and no other people to pretrain one on")
        renderer = NeuralRenderer(cfg.renderer)
        pretrain_renderer(load_frames(ds, video.image_size, others), ds.body, renderer, video, cfg.texture, root_seed, tlog)
        save_renderer(out / "renderer.npz", renderer)
    avatar = fit_video_avatar(frames.subset(fit_idx), ds.body, renderer, video, cfg.texture, "phase2",
                              train_renderer, root_seed, tlog)
    save_avatar(out / "avatar.npz", avatar)
    tlog.write_csv(out / "train_log.csv")
    rows = []
    with torch.no_grad():
        for i in test_idx:
            rec = frames.records[i]
            res = render_avatar(renderer, avatar, ds.body, rec.pose, frames.cameras[i], video.image_size, finalize=True)
            pred = res.rgb * res.masks[:, :1]
            gt = frames.rgb[i:i + 1] * frames.masks[i:i + 1, :1]
            rows.append({"frame": rec.frame_id, "psnr": psnr(pred, gt)})
            save_tensor_png(out / "holdout" / f"{rec.frame_id}.png", pred)
    if rows:
        write_metrics_csv(out / "holdout.csv", rows)
        console.print(summary_table(f"held-out views of {pid}", rows))
    _manifest(out, "avatar fit-video", root_seed, cfg, dataset=dataset, person=pid, holdout=holdout,
              train_renderer=train_renderer, steps=video.steps)


@avatar_app.command("fit-fewshot")
@guarded
def avatar_fit_fewshot(
    images: Path = typer.Option(..., "--images", help="Dataset directory holding the person's frames"),
    generator: Path = typer.Option(..., "--generator", help="Directory written by 'gan train'"),
    encoder_path: Path = typer.Option(..., "--encoder"),
    out: Path = typer.Option(..., "--out", "-o"),
    person: Optional[str] = typer.Option(None, "--person"),
    count: int = typer.Option(1, "--count", help="Number of frames to fit"),
    schedule_path: Optional[Path] = typer.Option(None, "--schedule"),
    config: Optional[Path] = ConfigOpt,
    seed: Optional[int] = SeedOpt,
) -> None:
    cfg, root_seed = _setup(config, seed)
    schedule = load_schedule(schedule_path) if schedule_path is not None else cfg.fewshot
    model = load_generative(generator)
    encoder = load_encoder(encoder_path)
    _, frames = _person_frames(images, person, schedule.image_size, count)
    result = fit_fewshot(frames, model.body, model.gan, model.renderer, encoder, schedule,
                         model.discriminators.face, root_seed)
    save_avatar(out / "avatar.npz", result.avatar)
    result.log.write_csv(out / "fit_log.csv")
    rows = [{"stage": r.name, "iterations": r.iterations, "lr": r.lr, "first": r.first, "last": r.last}
            for r in result.reports]
    console.print(summary_table("few-shot stages", rows))
    _manifest(out, "avatar fit-fewshot", root_seed, cfg, images=images, person=frames.records[0].person_id,
              count=count, schedule_hash=schedule.schedule_hash())


def _pose_sequence(path: Optional[Path], body, n_frames: int) -> list[tuple[np.ndarray, float]]:
    """(pose, azimuth) per output frame: a JSON list of poses, or an A-pose turntable."""
    if path is None:
        pose = a_pose(body, 60.0)
        return [(pose, 360.0 * k / n_frames) for k in range(n_frames)]
    data = json.loads(path.read_text(encoding="utf-8"))
    return [(np.asarray(p, dtype=np.float64), 0.0) for p in data]


@avatar_app.command("render")
@guarded
def avatar_render(
    avatar_path: Path = typer.Option(..., "--avatar"),
    renderer_path: Path = typer.Option(..., "--renderer"),
    body_path: Path = typer.Option(..., "--body"),
    out: Path = typer.Option(..., "--out", "-o"),
    pose_seq: Optional[Path] = typer.Option(None, "--pose-seq", help="JSON list of (joints, 3) poses"),
    frames: int = typer.Option(8, "--frames", help="Turntable frame count when no pose sequence is given"),
    size: int = typer.Option(128, "--size"),
) -> None:
    avatar = load_avatar(avatar_path)
    renderer = load_renderer(renderer_path)
    body = load_body(body_path)
    seq = _pose_sequence(pose_seq, body, frames)
    with torch.no_grad():
        for k, (pose, az) in enumerate(seq):
            cam = orbit_camera(az, 0.0, 3.0, 1.6 * size, size)
            res = render_avatar(renderer, avatar, body, pose, cam, size, finalize=True)
            save_tensor_png(out / f"frame_{k:04d}.png", res.rgb * res.masks[:, :1])
    _manifest(out, "avatar render", 0, None, avatar=avatar_path, renderer=renderer_path, body=body_path,
              pose_seq=pose_seq, frames=len(seq), size=size)
    console.print(f"Rendered {len(seq)} frames to {out}")


@avatar_app.command("redress")
@guarded
def avatar_redress(
    head: Path = typer.Option(..., "--head", help="Avatar providing the head"),
    body_avatar: Path = typer.Option(..., "--body", help="Avatar providing everything but the head"),
    body_path: Path = typer.Option(..., "--body-model"),
    out: Path = typer.Option(..., "--out", "-o"),
) -> None:
    avatar = redress(load_avatar(head), load_avatar(body_avatar), load_body(body_path))
    save_avatar(out, avatar)
    _manifest(out.parent, "avatar redress", 0, None, head=head, body=body_avatar, body_model=body_path, out=out)
    console.print(f"Redressed avatar written to {out}")


# --- generative model -------------------------------------------------------

@gan_app.command("train")
@guarded
def gan_train(
    dataset: Path = typer.Option(..., "--dataset", "-d"),
    out: Path = typer.Option(..., "--out", "-o"),
    config: Optional[Path] = ConfigOpt,
    seed: Optional[int] = SeedOpt,
    steps: Optional[int] = typer.Option(None, "--steps"),
) -> None:
    cfg, root_seed = _setup(config, seed)
    gcfg = cfg.gan if steps is None else cfg.gan.model_copy(update={"steps": steps})
    ds = load_dataset(dataset)
    model = train_generative(ds, gcfg, cfg.renderer, root_seed, checkpoint_dir=out / "checkpoints")
    save_generative(out, model)
    if model.log.counters:
        console.print(summary_table("skipped samples", {k: float(v) for k, v in model.log.counters.items()}))
    _manifest(out, "gan train", root_seed, cfg, dataset=dataset, steps=gcfg.steps)
    console.print(f"Generative model written to {out}")


@gan_app.command("sample")
@guarded
def gan_sample(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Directory written by 'gan train'"),
    out: Path = typer.Option(..., "--out", "-o"),
    truncation: float = typer.Option(0.8, "--truncation"),
    seed: int = typer.Option(0, "--seed"),
    count: int = typer.Option(8, "--count"),
    size: Optional[int] = typer.Option(None, "--size"),
) -> None:
    seed_everything(seed)
    model = load_generative(checkpoint)
    size = size or model.config.image_size
    gen = torch.Generator().manual_seed(seed)
    pose = a_pose(model.body, 60.0)
    shape = np.zeros(model.body.n_shape)
    cam = orbit_camera(0.0, 0.0, 3.0, 1.6 * size, size)
    tiles = []
    with torch.no_grad():
        for k in range(count):
            z = model.gan.sample_z(1, gen)
            noise = model.gan.sample_noise(1, gen)
            view = sample_truncated(model.gan, model.renderer, model.body, truncation, z, noise, pose, shape, cam, size)
            img = tensor_to_image(view.rgb * view.mask)
            save_png(out / f"sample_{k:03d}.png", img)
            tiles.append(img)
    save_png(out / "grid.png", np.concatenate(tiles, axis=1))
    RunManifest("gan sample", seed, config_hash(model.config), {"checkpoint": str(checkpoint), "truncation": truncation, "count": count},
                component_versions()).write(out)
    console.print(f"Wrote {count} samples to {out}")


# --- encoders ---------------------------------------------------------------

@encoder_app.command("train")
@guarded
def encoder_train(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Directory written by 'gan train'"),
    out: Path = typer.Option(..., "--out", "-o"),
    kind: str = typer.Option("a", "--kind", help="a: synthetic only; g: synthetic + real pairs"),
    dataset: Optional[Path] = typer.Option(None, "--dataset", "-d", help="Real frames (G-encoder)"),
    init: Optional[Path] = typer.Option(None, "--init", help="Encoder checkpoint to start from"),
    config: Optional[Path] = ConfigOpt,
    seed: Optional[int] = SeedOpt,
    steps: Optional[int] = typer.Option(None, "--steps"),
) -> None:
    cfg, root_seed = _setup(config, seed)
    ecfg = cfg.encoder.model_copy(update={"kind": kind, **({"steps": steps} if steps is not None else {})})
    model = load_generative(checkpoint)
    tlog = TrainingLog()
    if kind == "a":
        encoder = train_a_encoder(model.gan, model.renderer, model.body, ecfg, root_seed, tlog)
    elif kind == "g":
        if dataset is None:
            raise ConfigurationError("the G-encoder needs --dataset with real frame pairs")
        frames = load_frames(load_dataset(dataset), ecfg.image_size)
        start = load_encoder(init) if init is not None else None
        encoder = train_g_encoder(model.gan, model.renderer, model.body, frames, ecfg, root_seed, tlog, start)
    else:
        raise ConfigurationError(f"unknown encoder kind '{kind}' (expected a or g)")
    save_encoder(out / "encoder.npz", encoder)
    tlog.write_csv(out / "train_log.csv")
    _manifest(out, "encoder train", root_seed, cfg, kind=kind, checkpoint=checkpoint, dataset=dataset, steps=ecfg.steps)
    console.print(f"{kind.upper()}-encoder written to {out}")


# --- evaluation -------------------------------------------------------------

@eval_app.command("metrics")
@guarded
def eval_metrics(
    pred: Path = typer.Option(..., "--pred"),
    gt: Path = typer.Option(..., "--gt"),
    out: Path = typer.Option(..., "--out", "-o", help="CSV report"),
    config: Optional[Path] = ConfigOpt,
) -> None:
    cfg = load_config(config)
    names = sorted(p.name for p in pred.glob("*.png"))
    if not names:
        raise DataError(f"no PNG images in {pred}")
    missing = [n for n in names if not (gt / n).exists()]
    if missing:
        raise DataError(f"{len(missing)} predictions have no reference in {gt}: {missing[:3]}")
    extractor = resolve_extractor(cfg.metrics.extractor)
    rows = compare_image_sets([load_png(pred / n) for n in names], [load_png(gt / n) for n in names],
                              extractor, cfg.metrics)
    for r, n in zip(rows, names):
        r["index"] = n
    write_metrics_csv(out, rows)
    _manifest(out.parent, "eval metrics", cfg.seed, cfg, pred=pred, gt=gt, out=out)
    console.print(summary_table("image metrics", summarize(rows)))


@eval_app.command("ablation")
@guarded
def eval_ablation(
    dataset: Path = typer.Option(..., "--dataset", "-d"),
    out: Path = typer.Option(..., "--out", "-o"),
    rows_opt: Optional[List[str]] = typer.Option(None, "--row", help="Ablation rows to run (default: all)"),
    encoder_path: Optional[Path] = typer.Option(None, "--encoder", help="Embedding for view consistency"),
    config: Optional[Path] = ConfigOpt,
    seed: Optional[int] = SeedOpt,
    steps: Optional[int] = typer.Option(None, "--steps"),
) -> None:
    cfg, root_seed = _setup(config, seed)
    names = rows_opt or list(ABLATIONS)
    unknown = [n for n in names if n not in ABLATIONS]
    if unknown:
        raise ConfigurationError(f"unknown ablation rows {unknown}; known: {list(ABLATIONS)}")
    ds = load_dataset(dataset)
    frames = load_frames(ds, cfg.gan.image_size)
    extractor = resolve_extractor(cfg.metrics.extractor)
    if encoder_path is not None:
        encoder = load_encoder(encoder_path)
    else:
        torch.manual_seed(root_seed)
        encoder = StyleEncoder(cfg.encoder, len(cfg.gan.levels()), cfg.gan.latent_dim)
    rows = []
    for name in names:
        toggles = cfg.gan.ablation.model_copy(update=ABLATIONS[name])
        update: dict[str, Any] = {"ablation": toggles}
        if steps is not None:
            update["steps"] = steps
        gcfg = cfg.gan.model_copy(update=update)
        model = train_generative(ds, gcfg, cfg.renderer, root_seed)
        save_generative(out / name, model)
        with torch.no_grad():
            rows.append({
                "config": name,
                "fid_proxy": fid_proxy(model.gan, model.renderer, ds.body, frames, extractor, root_seed),
                "view_consistency": view_consistency(model.gan, model.renderer, encoder, ds.body, cfg.metrics,
                                                     seed=root_seed),
            })
        log.info("ablation %s done", name)
    write_metrics_csv(out / "ablation.csv", rows)
    console.print(summary_table("ablations", rows))
    _manifest(out, "eval ablation", root_seed, cfg, dataset=dataset, rows=names, steps=steps)


if __name__ == "__main__":
    app()
