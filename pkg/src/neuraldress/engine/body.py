from __future__ import annotations
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence
import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigh
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import eigsh
from scipy.spatial import cKDTree

from .container import load_arrays, save_arrays
from .errors import ParameterError, StructuralError
from .scan import scan_triangles
from .settings import BodyConfig

log = logging.getLogger(__name__)

REGION_NAMES = ("body", "head", "left_hand", "right_hand")
BODY, HEAD, LEFT_HAND, RIGHT_HAND = range(4)
SPECTRAL_CHANNELS = 16
# Dense eigensolver below this size, shift-invert Lanczos above.
_DENSE_EIGEN_LIMIT = 4000


@dataclass(frozen=True, eq=False)
class Skeleton:
    names: tuple[str, ...]
    parents: np.ndarray            # (J,) int, -1 for the root; parents precede children
    rest_joints: np.ndarray        # (J, 3)
    joint_shape_basis: np.ndarray  # (J, 3, K)

    @property
    def n_joints(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True, eq=False)
class ArticulatedBody:
    template_vertices: np.ndarray  # (V, 3)
    faces: np.ndarray              # (F, 3) int64
    uv_coords: np.ndarray          # (V, 2) in [0, 1]
    skeleton: Skeleton
    skin_weights: np.ndarray       # (V, J)
    shape_basis: np.ndarray        # (V, 3, K)
    region_labels: np.ndarray      # (V,) in REGION_NAMES order

    def __post_init__(self) -> None:
        V = len(self.template_vertices)
        J = self.skeleton.n_joints
        if self.template_vertices.shape != (V, 3):
            raise StructuralError("template_vertices must be (V, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise StructuralError("faces must be (F, 3)")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= V):
            raise StructuralError("face index out of range")
        if self.uv_coords.shape != (V, 2):
            raise StructuralError("uv_coords must be (V, 2)")
        if self.skin_weights.shape != (V, J):
            raise StructuralError(f"skin_weights must be ({V}, {J})")
        if self.shape_basis.ndim != 3 or self.shape_basis.shape[:2] != (V, 3):
            raise StructuralError("shape_basis must be (V, 3, K)")
        K = self.shape_basis.shape[2]
        if self.skeleton.joint_shape_basis.shape != (J, 3, K):
            raise StructuralError("joint_shape_basis must be (J, 3, K)")
        if self.region_labels.shape != (V,):
            raise StructuralError("region_labels must be (V,)")
        parents = self.skeleton.parents
        if any(p >= j for j, p in enumerate(parents)):
            raise StructuralError("skeleton parents must precede their children")
        if (self.skin_weights < 0).any() or not np.allclose(self.skin_weights.sum(axis=1), 1.0, atol=1e-9):
            raise ParameterError("skin weights must be nonnegative and sum to 1 per vertex")
        if (self.uv_coords < 0).any() or (self.uv_coords > 1).any():
            raise ParameterError("uv coordinates must lie in [0, 1]^2")

    @property
    def n_vertices(self) -> int:
        return len(self.template_vertices)

    @property
    def n_joints(self) -> int:
        return self.skeleton.n_joints

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[2]

    @cached_property
    def face_regions(self) -> np.ndarray:
        """Per-face region: most common vertex label, ties to the lower label."""
        if len(self.faces) == 0:
            return np.zeros(0, dtype=np.int64)
        counts = np.zeros((len(self.faces), len(REGION_NAMES)), dtype=np.int64)
        labels = self.region_labels[self.faces]
        for k in range(3):
            np.add.at(counts, (np.arange(len(self.faces)), labels[:, k]), 1)
        return counts.argmax(axis=1)

    @cached_property
    def edges(self) -> np.ndarray:
        return mesh_edges(self.faces)


def invariant_violations(body: ArticulatedBody) -> list[str]:
    errs: list[str] = []
    w = body.skin_weights
    if (w < 0).any():
        errs.append("negative skin weight")
    if not np.allclose(w.sum(axis=1), 1.0, atol=1e-9):
        errs.append("skin weights do not sum to 1")
    if len(body.faces) and (body.faces.min() < 0 or body.faces.max() >= body.n_vertices):
        errs.append("invalid face index")
    if (body.uv_coords < 0).any() or (body.uv_coords > 1).any():
        errs.append("uv outside [0,1]^2")
    for label in (HEAD, LEFT_HAND, RIGHT_HAND):
        if not (body.region_labels == label).any():
            errs.append(f"region '{REGION_NAMES[label]}' is empty")
    return errs


@dataclass(frozen=True, eq=False)
class PosedMesh:
    vertices: np.ndarray
    faces: np.ndarray
    uv_coords: np.ndarray
    face_regions: np.ndarray

    @classmethod
    def empty(cls) -> "PosedMesh":
        return cls(
            vertices=np.zeros((0, 3)),
            faces=np.zeros((0, 3), dtype=np.int64),
            uv_coords=np.zeros((0, 2)),
            face_regions=np.zeros(0, dtype=np.int64),
        )


# --- posing -----------------------------------------------------------------

def rodrigues(rotvecs: np.ndarray) -> np.ndarray:
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3); zero maps to I exactly."""
    rv = np.asarray(rotvecs, dtype=np.float64)
    lead = rv.shape[:-1]
    rv = rv.reshape(-1, 3)
    angle = np.linalg.norm(rv, axis=1, keepdims=True)
    axis = rv / np.where(angle > 0, angle, 1.0)
    x, y, z = axis.T
    zero = np.zeros_like(x)
    K = np.stack([zero, -z, y, z, zero, -x, -y, x, zero], axis=1).reshape(-1, 3, 3)
    s = np.sin(angle)[:, :, None]
    c = np.cos(angle)[:, :, None]
    R = np.eye(3)[None] + s * K + (1.0 - c) * (K @ K)
    return R.reshape(*lead, 3, 3)


def _check_params(body: ArticulatedBody, pose, shape) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pose, dtype=np.float64)
    if p.shape == (body.n_joints * 3,):
        p = p.reshape(body.n_joints, 3)
    if p.shape != (body.n_joints, 3):
        raise ParameterError(f"pose must be ({body.n_joints}, 3), got {p.shape}")
    s = np.asarray(shape, dtype=np.float64)
    if s.shape != (body.n_shape,):
        raise ParameterError(f"shape must have {body.n_shape} coefficients, got {s.shape}")
    if not (np.isfinite(p).all() and np.isfinite(s).all()):
        raise ParameterError("pose/shape must be finite")
    return p, s


def joint_transforms(parents: np.ndarray, rotations: np.ndarray, joints: np.ndarray) -> np.ndarray:
    """Global (J, 4, 4) transforms; each joint rotates its subtree about its own pivot."""
    J = len(parents)
    A = np.empty((J, 4, 4))
    for j in range(J):
        local = np.eye(4)
        R = rotations[j]
        local[:3, :3] = R
        local[:3, 3] = joints[j] - R @ joints[j]
        A[j] = local if parents[j] < 0 else A[parents[j]] @ local
    return A


def shaped_rest(body: ArticulatedBody, shape: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    verts = body.template_vertices + np.einsum("vck,k->vc", body.shape_basis, shape)
    joints = body.skeleton.rest_joints + np.einsum("jck,k->jc", body.skeleton.joint_shape_basis, shape)
    return verts, joints


def pose_mesh(body: ArticulatedBody, pose, shape) -> PosedMesh:
    """Linear blend skinning of the shaped template.

    Written as v + sum_j w_j (A_j v - v) so an all-zero pose leaves every
    vertex bit-identical.
    """
    p, s = _check_params(body, pose, shape)
    verts, joints = shaped_rest(body, s)
    A = joint_transforms(body.skeleton.parents, rodrigues(p), joints)
    D = np.einsum("vj,jab->vab", body.skin_weights, A[:, :3, :] - np.eye(4)[None, :3, :])
    posed = verts + np.einsum("vab,vb->va", D[:, :, :3], verts) + D[:, :, 3]
    return PosedMesh(vertices=posed, faces=body.faces, uv_coords=body.uv_coords, face_regions=body.face_regions)


def rest_pose(body: ArticulatedBody) -> np.ndarray:
    return np.zeros((body.n_joints, 3))


def a_pose(body: ArticulatedBody, abduction_deg: float = 45.0) -> np.ndarray:
    """Arms lowered from the T-pose by `abduction_deg` about the z axis."""
    pose = rest_pose(body)
    a = math.radians(abduction_deg)
    pose[body.skeleton.index("l_shoulder"), 2] = -a
    pose[body.skeleton.index("r_shoulder"), 2] = a
    return pose


def sample_pose(body: ArticulatedBody, rng: np.random.Generator, max_joint_deg: float) -> np.ndarray:
    """Small random rotation per non-root joint, uniform axis and angle."""
    J = body.n_joints
    axes = rng.normal(size=(J, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    angles = rng.uniform(-1.0, 1.0, size=(J, 1)) * math.radians(max_joint_deg)
    pose = axes * angles
    pose[body.skeleton.parents < 0] = 0.0
    return pose


# --- spectral coordinates ---------------------------------------------------

@dataclass(frozen=True, eq=False)
class SpectralCoordinates:
    values: np.ndarray       # (V, n_channels)
    eigenvalues: np.ndarray  # (n_channels,)
    null_eigenvalue: float


def mesh_edges(faces: np.ndarray) -> np.ndarray:
    if len(faces) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def graph_laplacian(n: int, edges) -> sp.csr_matrix:
    """Combinatorial Laplacian D - A of an undirected graph."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    e = np.unique(np.sort(e, axis=1), axis=0)
    e = e[e[:, 0] != e[:, 1]]
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    A = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n)).tocsr()
    deg = np.asarray(A.sum(axis=1)).ravel()
    return (sp.diags(deg) - A).tocsr()


def laplacian_eigenvectors(L: sp.spmatrix, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Lowest k+1 eigenpairs of L, ascending, each vector's largest entry made positive."""
    n = L.shape[0]
    if k + 1 > n:
        raise ParameterError(f"graph with {n} vertices has no {k} non-constant eigenvectors")
    if n <= _DENSE_EIGEN_LIMIT:
        vals, vecs = eigh(L.toarray(), subset_by_index=[0, k])
    else:
        v0 = np.linspace(1.0, 2.0, n)
        vals, vecs = eigsh(L.tocsc(), k=k + 1, sigma=-1e-2, which="LM", v0=v0)
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]
    idx = np.abs(vecs).argmax(axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vals, vecs * signs


def spectral_coordinates(body: ArticulatedBody, n_channels: int = SPECTRAL_CHANNELS) -> SpectralCoordinates:
    n = body.n_vertices
    L = graph_laplacian(n, body.edges)
    n_comp, _ = connected_components(L, directed=False)
    if n_comp != 1:
        raise StructuralError(f"mesh graph has {n_comp} connected components")
    vals, vecs = laplacian_eigenvectors(L, n_channels)
    return SpectralCoordinates(values=vecs[:, 1:], eigenvalues=vals[1:], null_eigenvalue=float(vals[0]))


# --- texture-space rasterization --------------------------------------------

def rasterize_vertex_attributes(body: ArticulatedBody, attributes: np.ndarray, resolution: int) -> np.ndarray:
    """Barycentric fill of per-vertex attributes over the UV atlas; (R, R, C), 0 off-atlas.

    Texel (row i, col j) is sampled at uv = ((j + 0.5) / R, (i + 0.5) / R).
    """
    attrs = np.asarray(attributes, dtype=np.float64)
    squeeze = attrs.ndim == 1
    if squeeze:
        attrs = attrs[:, None]
    if attrs.ndim != 2 or len(attrs) != body.n_vertices:
        raise ParameterError(f"expected one attribute vector per vertex ({body.n_vertices}), got {attrs.shape}")
    scan = scan_triangles(body.uv_coords * resolution, body.faces, resolution, resolution)
    out = np.zeros((resolution, resolution, attrs.shape[1]))
    covered = scan.face_index >= 0
    f = scan.face_index[covered]
    corner = attrs[body.faces[f]]  # (N, 3, C)
    out[covered] = np.einsum("nk,nkc->nc", scan.bary[covered], corner)
    return out[..., 0] if squeeze else out


def uv_coverage(body: ArticulatedBody, resolution: int) -> np.ndarray:
    scan = scan_triangles(body.uv_coords * resolution, body.faces, resolution, resolution)
    return (scan.face_index >= 0).astype(np.float64)


# --- toy humanoid -----------------------------------------------------------

# Silhouette parts in the T-pose, (xmin, xmax, ymin, ymax), model units.
_PARTS = {
    "head": (-0.11, 0.11, 1.50, 1.76),
    "neck": (-0.05, 0.05, 1.40, 1.50),
    "torso": (-0.20, 0.20, 0.86, 1.42),
    "l_arm": (0.20, 0.76, 1.26, 1.40),
    "l_hand": (0.76, 0.90, 1.25, 1.41),
    "r_arm": (-0.76, -0.20, 1.26, 1.40),
    "r_hand": (-0.90, -0.76, 1.25, 1.41),
    "l_leg": (0.02, 0.18, 0.0, 0.88),
    "r_leg": (-0.18, -0.02, 0.0, 0.88),
}
_PART_REGION = {"head": HEAD, "l_hand": LEFT_HAND, "r_hand": RIGHT_HAND}
_UV_MARGIN = 0.02
_MIN_VERTICES = 200
_MAX_VERTICES = 20000


def _skeleton_layout(spine_joints: int) -> tuple[list[str], list[int], np.ndarray, np.ndarray, np.ndarray]:
    """Joint names, parents, rest positions, and each joint's bone segment end and radius."""
    names: list[str] = ["pelvis"]
    parents: list[int] = [-1]
    pos: list[tuple[float, float]] = [(0.0, 0.86)]
    for i in range(1, spine_joints + 1):
        names.append(f"spine{i}")
        parents.append(len(names) - 2)
        pos.append((0.0, 0.86 + 0.54 * i / (spine_joints + 1)))
    last_spine = len(names) - 1
    names += ["neck", "head"]
    parents += [last_spine, last_spine + 1]
    pos += [(0.0, 1.40), (0.0, 1.50)]
    for side, sx in (("l", 1.0), ("r", -1.0)):
        base = len(names)
        names += [f"{side}_shoulder", f"{side}_elbow", f"{side}_wrist"]
        parents += [last_spine, base, base + 1]
        pos += [(0.20 * sx, 1.33), (0.48 * sx, 1.33), (0.76 * sx, 1.33)]
    for side, sx in (("l", 1.0), ("r", -1.0)):
        base = len(names)
        names += [f"{side}_hip", f"{side}_knee", f"{side}_ankle"]
        parents += [0, base, base + 1]
        pos += [(0.10 * sx, 0.86), (0.10 * sx, 0.46), (0.10 * sx, 0.06)]

    joints = np.array([[x, y, 0.0] for x, y in pos])
    ends = np.zeros_like(joints)
    radius = np.zeros(len(names))
    for j, name in enumerate(names):
        children = [c for c, p in enumerate(parents) if p == j and not names[c].endswith(("shoulder", "hip"))]
        if name == "head":
            ends[j] = (0.0, 1.76, 0.0)
        elif name.endswith("wrist"):
            ends[j] = joints[j] + (np.sign(joints[j, 0]) * 0.14, 0.0, 0.0)
        elif name.endswith("ankle"):
            ends[j] = (joints[j, 0], 0.0, 0.0)
        else:
            ends[j] = joints[children[0]]
        if name == "pelvis" or name.startswith("spine"):
            radius[j] = 0.20
        elif name == "neck":
            radius[j] = 0.05
        elif name == "head":
            radius[j] = 0.11
        elif name.endswith("wrist"):
            radius[j] = 0.08
        elif name.endswith("hip"):
            radius[j] = 0.08
        else:
            radius[j] = 0.07
    return names, parents, joints, ends, radius


def _segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from points (V, 2) to segments (J, 2)-(J, 2); result (V, J)."""
    ab = b - a
    denom = np.maximum((ab * ab).sum(axis=1), 1e-12)
    ap = p[:, None, :] - a[None]
    t = np.clip((ap * ab[None]).sum(axis=2) / denom, 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(p[:, None, :] - closest, axis=2)


def _shape_field(points: np.ndarray, n_shape: int) -> np.ndarray:
    """Shape directions at points (N, 3): arm length, leg length, width, girth."""
    x, y, z = points.T
    cols = [
        np.stack([0.25 * np.sign(x) * np.maximum(np.abs(x) - 0.20, 0.0), 0 * y, 0 * z], axis=1),
        np.stack([0 * x, -0.20 * np.maximum(0.86 - y, 0.0), 0 * z], axis=1),
        np.stack([0.15 * np.clip(x, -0.20, 0.20), 0 * y, 0 * z], axis=1),
        np.stack([0 * x, 0 * y, 0.30 * z], axis=1),
    ]
    if n_shape == 0:
        return np.zeros((len(points), 3, 0))
    return np.stack(cols[:n_shape], axis=2)


def _cell_grid(h: float) -> tuple[np.ndarray, np.ndarray, float, int]:
    """Included cells (mask) and their part labels for cell size h; columns symmetric about x=0."""
    half_cols = math.ceil(0.95 / h)
    n_cols = 2 * half_cols
    n_rows = math.ceil(1.80 / h)
    x0 = -half_cols * h
    cx = x0 + (np.arange(n_cols) + 0.5) * h
    cy = (np.arange(n_rows) + 0.5) * h
    X, Y = np.meshgrid(cx, cy)  # (rows, cols)
    label = np.full(X.shape, -1, dtype=np.int64)
    for name, (xmin, xmax, ymin, ymax) in _PARTS.items():
        inside = (X >= xmin) & (X <= xmax) & (Y >= ymin) & (Y <= ymax)
        region = _PART_REGION.get(name, BODY)
        label = np.where(inside & ((label < 0) | (region != BODY)), region, label)
    return label >= 0, label, x0, n_cols


def _vertex_count(h: float) -> int:
    cells, _, _, _ = _cell_grid(h)
    corners = np.zeros((cells.shape[0] + 1, cells.shape[1] + 1), dtype=bool)
    for dr in (0, 1):
        for dc in (0, 1):
            corners[dr:dr + cells.shape[0], dc:dc + cells.shape[1]] |= cells
    top = np.nonzero(corners.any(axis=1))[0].max()
    return 2 * int(corners.sum()) - int(corners[top].sum())


def _choose_cell_size(budget: int) -> float:
    if budget < _MIN_VERTICES or budget > _MAX_VERTICES:
        raise ParameterError(f"vertex_budget must be in [{_MIN_VERTICES}, {_MAX_VERTICES}], got {budget}")
    h = 0.14
    while h > 0.004:
        if _vertex_count(h) >= budget:
            return h
        h *= 0.95
    raise ParameterError(f"vertex_budget {budget} is not reachable")


def make_toy_body(config: Optional[BodyConfig] = None) -> ArticulatedBody:
    """A two-sheet 'paper doll' humanoid built on a regular grid of the T-pose silhouette.

    The front sheet bulges towards +z, the back sheet towards -z; both share
    the silhouette outline positions and are stitched through the top row of
    the head, which keeps the mesh graph connected while the UV atlas stays a
    single planar layout (front doll below v=0.5, mirrored back doll above).
    """
    cfg = config or BodyConfig()
    if not 1 <= cfg.spine_joints <= 4:
        raise ParameterError(f"spine_joints must be in [1, 4], got {cfg.spine_joints}")
    if not 0 <= cfg.n_shape <= 4:
        raise ParameterError(f"n_shape must be in [0, 4], got {cfg.n_shape}")
    if cfg.depth_ratio < 0 or cfg.blend_width <= 0:
        raise ParameterError("depth_ratio must be >= 0 and blend_width > 0")
    h = _choose_cell_size(cfg.vertex_budget)
    cells, cell_label, x0, n_cols = _cell_grid(h)
    n_rows = cells.shape[0]

    corners = np.zeros((n_rows + 1, n_cols + 1), dtype=bool)
    corner_region = np.full((n_rows + 1, n_cols + 1), BODY, dtype=np.int64)
    full = np.ones((n_rows + 1, n_cols + 1), dtype=bool)
    for dr in (0, 1):
        for dc in (0, 1):
            sl = (slice(dr, dr + n_rows), slice(dc, dc + n_cols))
            corners[sl] |= cells
            padded = np.zeros_like(full)
            padded[sl] = cells
            full &= padded
            special = cells & (cell_label != BODY)
            corner_region[sl] = np.where(special, cell_label, corner_region[sl])
    boundary = corners & ~full
    top_row = np.nonzero(corners.any(axis=1))[0].max()

    rr, cc = np.nonzero(corners)
    xy = np.stack([x0 + cc * h, rr * h], axis=1)
    bxy = xy[boundary[rr, cc]]
    dist, _ = cKDTree(bxy).query(xy)
    depth = cfg.depth_ratio * dist

    n_front = len(rr)
    front_id = np.full(corners.shape, -1, dtype=np.int64)
    front_id[rr, cc] = np.arange(n_front)
    back_id = front_id.copy()
    own_back = rr != top_row
    back_id[rr[own_back], cc[own_back]] = n_front + np.arange(own_back.sum())

    verts = np.concatenate([
        np.stack([xy[:, 0], xy[:, 1], depth], axis=1),
        np.stack([xy[own_back, 0], xy[own_back, 1], -depth[own_back]], axis=1),
    ])
    regions = np.concatenate([corner_region[rr, cc], corner_region[rr[own_back], cc[own_back]]])

    xmin, xmax = xy[:, 0].min(), xy[:, 0].max()
    ytop, ybot = xy[:, 1].max(), xy[:, 1].min()
    u = _UV_MARGIN + (xy[:, 0] - xmin) / (xmax - xmin) * (1.0 - 2 * _UV_MARGIN)
    dv = (ytop - xy[:, 1]) / (ytop - ybot) * (0.5 - _UV_MARGIN)
    uv = np.concatenate([
        np.stack([u, 0.5 + dv], axis=1),
        np.stack([u[own_back], 0.5 - dv[own_back]], axis=1),
    ])
    uv = np.clip(uv, 0.0, 1.0)

    faces: list[np.ndarray] = []
    cr, ccol = np.nonzero(cells)
    right_side = (x0 + (ccol + 0.5) * h) > 0
    for ids, flip in ((front_id, False), (back_id, True)):
        a = ids[cr, ccol]
        b = ids[cr, ccol + 1]
        c = ids[cr + 1, ccol + 1]
        d = ids[cr + 1, ccol]
        # diagonal mirrors across x=0 so the mesh keeps its bilateral symmetry
        t1 = np.where(right_side[:, None], np.stack([a, b, c], 1), np.stack([a, b, d], 1))
        t2 = np.where(right_side[:, None], np.stack([a, c, d], 1), np.stack([b, c, d], 1))
        tris = np.concatenate([t1, t2])
        if flip:
            tris = tris[:, [0, 2, 1]]
        faces.append(tris)
    face_arr = np.concatenate(faces).astype(np.int64)

    names, parents, joints, ends, radius = _skeleton_layout(cfg.spine_joints)
    d = _segment_distance(verts[:, :2], joints[:, :2], ends[:, :2]) - radius[None]
    logits = -(d - d.min(axis=1, keepdims=True)) / cfg.blend_width
    w = np.exp(logits)
    w = np.where(w < 1e-2, 0.0, w)
    w = w / w.sum(axis=1, keepdims=True)

    body = ArticulatedBody(
        template_vertices=verts,
        faces=face_arr,
        uv_coords=uv,
        skeleton=Skeleton(
            names=tuple(names),
            parents=np.asarray(parents, dtype=np.int64),
            rest_joints=joints,
            joint_shape_basis=_shape_field(joints, cfg.n_shape),
        ),
        skin_weights=w,
        shape_basis=_shape_field(verts, cfg.n_shape),
        region_labels=regions.astype(np.int64),
    )
    errs = invariant_violations(body)
    n_comp, _ = connected_components(graph_laplacian(body.n_vertices, body.edges), directed=False)
    if n_comp != 1:
        errs.append(f"mesh has {n_comp} components at cell size {h:.4f}")
    if errs:
        raise StructuralError("; ".join(errs))
    log.debug("toy body: %d vertices, %d faces, %d joints, cell %.4f", body.n_vertices, len(face_arr), body.n_joints, h)
    return body


# --- persistence ------------------------------------------------------------

def save_body(path: Path, body: ArticulatedBody) -> None:
    arrays = {
        "template_vertices": body.template_vertices,
        "faces": body.faces,
        "uv_coords": body.uv_coords,
        "skin_weights": body.skin_weights,
        "shape_basis": body.shape_basis,
        "region_labels": body.region_labels,
        "joint_parents": body.skeleton.parents,
        "rest_joints": body.skeleton.rest_joints,
        "joint_shape_basis": body.skeleton.joint_shape_basis,
    }
    save_arrays(path, arrays, {"kind": "body", "joint_names": list(body.skeleton.names), "regions": list(REGION_NAMES)})


def load_body(path: Path) -> ArticulatedBody:
    a, meta = load_arrays(path)
    return ArticulatedBody(
        template_vertices=a["template_vertices"],
        faces=a["faces"].astype(np.int64),
        uv_coords=a["uv_coords"],
        skeleton=Skeleton(
            names=tuple(meta["joint_names"]),
            parents=a["joint_parents"].astype(np.int64),
            rest_joints=a["rest_joints"],
            joint_shape_basis=a["joint_shape_basis"],
        ),
        skin_weights=a["skin_weights"],
        shape_basis=a["shape_basis"],
        region_labels=a["region_labels"].astype(np.int64),
    )


def region_indicator(body: ArticulatedBody, labels: Sequence[int]) -> np.ndarray:
    return np.isin(body.region_labels, list(labels)).astype(np.float64)
