from __future__ import annotations
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence
import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ValidationError

from .body import (
    HEAD, LEFT_HAND, RIGHT_HAND, ArticulatedBody, a_pose, load_body, make_toy_body, pose_mesh,
    rasterize_vertex_attributes, sample_pose, save_body,
)
from .camera import Camera, orbit_camera
from .errors import DataError
from .raster import rasterize
from .settings import BodyConfig, SyntheticWorld
from ..util.images import image_to_tensor, load_png, save_png

log = logging.getLogger(__name__)

BODY_FILE = "body.npz"
WORLD_FILE = "world.json"
META_FILE = "meta.jsonl"
# palette slots of the procedural clothing texture
PARTS = ("skin", "hair", "top", "bottom", "shoes")


class DatasetRecord(BaseModel):
    frame_id: str
    person_id: str
    rgb_path: str   # relative to the dataset root
    mask_path: str  # RGB PNG: foreground, head, hands
    pose: List[List[float]]
    shape: List[float]
    camera: Camera
    image_size: int


@dataclass
class PersonLook:
    palette: np.ndarray       # (5, 3) colors in PARTS order
    stripe_color: np.ndarray  # (3,)
    stripes: bool
    stripe_freq: float
    stripe_phase: float
    sleeve: float             # sleeve length in model units past the shoulder
    patches: np.ndarray       # (n, 6): u, v, radius, r, g, b


def _random_look(rng: np.random.Generator, world: SyntheticWorld) -> PersonLook:
    skin = np.array([0.95, 0.8, 0.65]) * rng.uniform(0.45, 1.0)
    hair = rng.uniform(0.0, 0.5, size=3)
    palette = np.stack([skin, hair, rng.uniform(0.1, 1.0, 3), rng.uniform(0.05, 0.8, 3), rng.uniform(0.0, 0.4, 3)])
    patches = np.concatenate([
        rng.uniform(0.05, 0.95, size=(world.patch_count, 2)),
        rng.uniform(0.01, 0.04, size=(world.patch_count, 1)),
        rng.uniform(0.0, 1.0, size=(world.patch_count, 3)),
    ], axis=1)
    return PersonLook(
        palette=palette,
        stripe_color=rng.uniform(0.0, 1.0, 3),
        stripes=bool(rng.uniform() < world.stripe_probability),
        stripe_freq=float(rng.uniform(6.0, 20.0)),
        stripe_phase=float(rng.uniform(0.0, 2 * math.pi)),
        sleeve=float(rng.uniform(0.05, 0.5)),
        patches=patches,
    )


def part_weights(body: ArticulatedBody, sleeve: float) -> np.ndarray:
    """(V, 5) one-hot clothing part per vertex in PARTS order."""
    x, y, z = body.template_vertices.T
    part = np.full(body.n_vertices, 2, dtype=np.int64)  # top
    part[np.abs(x) > 0.20 + sleeve] = 0
    part[np.isin(body.region_labels, [LEFT_HAND, RIGHT_HAND])] = 0
    part[(y >= 1.42) & (np.abs(x) <= 0.06)] = 0  # neck
    head = body.region_labels == HEAD
    part[head] = 0
    part[head & ((y > 1.66) | (z < 0))] = 1
    part[(y < 0.88) & (np.abs(x) <= 0.20)] = 3
    part[y < 0.08] = 4
    return np.eye(len(PARTS))[part]


def procedural_texture(body: ArticulatedBody, look: PersonLook, resolution: int) -> np.ndarray:
    """(R, R, 3) classical RGB texture; texels off the atlas are 0."""
    w = rasterize_vertex_attributes(body, part_weights(body, look.sleeve), resolution)
    rgb = w @ look.palette
    coverage = w.sum(axis=2, keepdims=True)
    v = (np.arange(resolution) + 0.5) / resolution
    u = v.copy()
    U, V = np.meshgrid(u, v)
    if look.stripes:
        band = (np.sin(2 * math.pi * look.stripe_freq * V + look.stripe_phase) > 0).astype(np.float64)
        top = w[..., 2:3] * band[..., None]
        rgb = rgb * (1 - top) + top * look.stripe_color
    clothes = 1.0 - w[..., 0:1] - w[..., 1:2]
    for pu, pv, radius, *color in look.patches:
        disc = (((U - pu) ** 2 + (V - pv) ** 2) < radius ** 2).astype(np.float64)[..., None] * clothes
        rgb = rgb * (1 - disc) + disc * np.asarray(color)
    return np.clip(rgb * np.minimum(coverage, 1.0), 0.0, 1.0)


def classical_render(
    body: ArticulatedBody, texture: np.ndarray, pose: np.ndarray, shape: np.ndarray, camera: Camera, image_size: int
) -> tuple[np.ndarray, np.ndarray]:
    """Textured render on black plus the (foreground, head, hands) mask image."""
    buffers = rasterize(pose_mesh(body, pose, shape), camera, image_size)
    tex = torch.from_numpy(np.ascontiguousarray(texture.transpose(2, 0, 1)))[None]
    grid = torch.from_numpy(buffers.uv * 2.0 - 1.0)[None]
    rgb = F.grid_sample(tex, grid, mode="bilinear", padding_mode="border", align_corners=False)[0]
    rgb = rgb.numpy().transpose(1, 2, 0) * buffers.mask[..., None]
    masks = np.stack([
        buffers.mask.astype(np.float64),
        buffers.region_mask(HEAD),
        np.maximum(buffers.region_mask(LEFT_HAND), buffers.region_mask(RIGHT_HAND)),
    ], axis=2)
    return rgb, masks


def sample_camera(world: SyntheticWorld, rng: np.random.Generator) -> Camera:
    c = world.cameras
    return orbit_camera(
        azimuth_deg=float(rng.uniform(-1.0, 1.0) * c.azimuth_range_deg),
        elevation_deg=float(rng.uniform(-1.0, 1.0) * c.elevation_range_deg),
        distance=c.distance,
        focal=c.focal_ratio * world.image_size,
        image_size=world.image_size,
        target=(0.0, c.target_height, 0.0),
    )


def sample_frame_pose(body: ArticulatedBody, world: SyntheticWorld, rng: np.random.Generator) -> np.ndarray:
    p = world.poses
    pose = sample_pose(body, rng, p.max_joint_deg)
    if rng.uniform() < p.a_pose_fraction:
        pose = pose + a_pose(body, p.a_pose_deg)
    return pose


@dataclass
class DatasetSummary:
    root: Path
    n_people: int
    n_frames: int


def _person_id(i: int) -> str:
    return f"person_{i:03d}"


def generate_synthetic_dataset(
    world: SyntheticWorld,
    out_dir: Path,
    body_config: Optional[BodyConfig] = None,
    n_people: Optional[int] = None,
    frames_per_person: Optional[int] = None,
    workers: int = 0,
) -> DatasetSummary:
    """Render procedurally dressed toy bodies with exact masks and (pose, shape, camera) records."""
    n_people = world.n_people if n_people is None else n_people
    frames = world.frames_per_person if frames_per_person is None else frames_per_person
    body = make_toy_body(body_config)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_body(out_dir / BODY_FILE, body)
    world_dump = world.model_dump(mode="json")
    world_dump.update({"n_people": n_people, "frames_per_person": frames})
    (out_dir / WORLD_FILE).write_text(json.dumps(world_dump, indent=2, sort_keys=True), encoding="utf-8")

    root_seq = np.random.SeedSequence(world.seed)
    for p, person_seq in enumerate(root_seq.spawn(n_people)):
        pid = _person_id(p)
        look_seq, *frame_seqs = person_seq.spawn(frames + 1)
        look_rng = np.random.default_rng(look_seq)
        look = _random_look(look_rng, world)
        shape = np.clip(look_rng.normal(0.0, 0.5, size=body.n_shape), -1.5, 1.5)
        texture = procedural_texture(body, look, world.texture_resolution)
        save_png(out_dir / pid / "texture.png", texture)

        def _frame(k: int) -> DatasetRecord:
            rng = np.random.default_rng(frame_seqs[k])
            pose = sample_frame_pose(body, world, rng)
            camera = sample_camera(world, rng)
            rgb, masks = classical_render(body, texture, pose, shape, camera, world.image_size)
            fid = f"{k:05d}"
            save_png(out_dir / pid / "frames" / f"{fid}.png", rgb)
            save_png(out_dir / pid / "masks" / f"{fid}.png", masks)
            return DatasetRecord(
                frame_id=fid,
                person_id=pid,
                rgb_path=f"{pid}/frames/{fid}.png",
                mask_path=f"{pid}/masks/{fid}.png",
                pose=pose.tolist(),
                shape=shape.tolist(),
                camera=camera,
                image_size=world.image_size,
            )

        if workers > 0:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                records = list(ex.map(_frame, range(frames)))
        else:
            records = [_frame(k) for k in range(frames)]
        lines = [json.dumps(r.model_dump(mode="json"), sort_keys=True) for r in records]
        (out_dir / pid / META_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")
        log.info("rendered %s: %d frames", pid, frames)
    return DatasetSummary(root=out_dir, n_people=n_people, n_frames=n_people * frames)


# --- loading ----------------------------------------------------------------

@dataclass
class Dataset:
    root: Path
    body: ArticulatedBody
    records: List[DatasetRecord]

    def people(self) -> list[str]:
        return sorted({r.person_id for r in self.records})

    def by_person(self, person_id: str) -> list[DatasetRecord]:
        return [r for r in self.records if r.person_id == person_id]


def read_records(path: Path) -> list[DatasetRecord]:
    out = []
    for i, line in enumerate(path.read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        try:
            out.append(DatasetRecord.model_validate_json(line))
        except ValidationError as e:
            raise DataError(f"{path}:{i + 1}: malformed record: {e.errors()[0]['msg']}") from e
    return out


def load_dataset(root: Path) -> Dataset:
    if not (root / BODY_FILE).exists():
        raise DataError(f"{root} is not a dataset (missing {BODY_FILE})")
    body = load_body(root / BODY_FILE)
    records: list[DatasetRecord] = []
    for person_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        meta = person_dir / META_FILE
        frames = sorted((person_dir / "frames").glob("*.png")) if (person_dir / "frames").exists() else []
        if not meta.exists():
            if frames:
                raise DataError(f"{person_dir}: frames without pose records")
            continue
        recs = read_records(meta)
        known = {Path(r.rgb_path).name for r in recs}
        orphans = [f.name for f in frames if f.name not in known]
        if orphans:
            raise DataError(f"{person_dir}: frames without pose records: {orphans[:3]}")
        shapes = {tuple(r.shape) for r in recs}
        if len(shapes) > 1:
            raise DataError(f"{person_dir}: shape differs between frames")
        records.extend(recs)
    return Dataset(root=root, body=body, records=records)


@dataclass
class FrameSet:
    """Frames of a dataset loaded as tensors at one working resolution."""

    records: List[DatasetRecord]
    rgb: torch.Tensor    # (N, 3, H, W) in [0, 1]
    masks: torch.Tensor  # (N, 3, H, W): foreground, head, hands
    cameras: List[Camera]
    person_index: Dict[str, List[int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def poses(self) -> list[np.ndarray]:
        return [np.asarray(r.pose) for r in self.records]

    def shapes(self) -> list[np.ndarray]:
        return [np.asarray(r.shape) for r in self.records]

    def people_with_pairs(self) -> list[str]:
        return sorted(p for p, idx in self.person_index.items() if len(idx) >= 2)

    def subset(self, indices: Sequence[int]) -> "FrameSet":
        idx = list(indices)
        return make_frameset([self.records[i] for i in idx], self.rgb[idx], self.masks[idx], [self.cameras[i] for i in idx])


def make_frameset(records, rgb, masks, cameras) -> FrameSet:
    index: Dict[str, List[int]] = {}
    for i, r in enumerate(records):
        index.setdefault(r.person_id, []).append(i)
    return FrameSet(records=list(records), rgb=rgb, masks=masks, cameras=list(cameras), person_index=index)


def load_frames(dataset: Dataset, image_size: int, records: Optional[Sequence[DatasetRecord]] = None) -> FrameSet:
    recs = list(dataset.records if records is None else records)
    if not recs:
        raise DataError("no frames selected")
    rgbs, masks, cams = [], [], []
    for r in recs:
        rgb = image_to_tensor(load_png(dataset.root / r.rgb_path))
        m = image_to_tensor(load_png(dataset.root / r.mask_path))
        if rgb.shape[-2:] != m.shape[-2:]:
            raise DataError(f"{r.mask_path}: mask size differs from its frame")
        if rgb.shape[-1] != image_size:
            rgb = F.interpolate(rgb[None], size=(image_size, image_size), mode="area")[0]
            m = F.interpolate(m[None], size=(image_size, image_size), mode="area")[0]
        rgbs.append(rgb)
        masks.append(m)
        cams.append(r.camera.scaled(image_size / r.image_size))
    return make_frameset(recs, torch.stack(rgbs), torch.stack(masks), cams)
