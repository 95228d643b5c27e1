from __future__ import annotations
from dataclasses import dataclass
from typing import Optional
import numpy as np

# Upper bound on (face, pixel) candidate pairs evaluated at once.
_PAIR_CHUNK = 1 << 21


@dataclass
class ScanResult:
    face_index: np.ndarray  # (H, W) int64, -1 where uncovered
    bary: np.ndarray        # (H, W, 3) float64, perspective-correct when depths given
    depth: np.ndarray       # (H, W) float64, inf where uncovered


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def scan_triangles(
    points: np.ndarray,
    faces: np.ndarray,
    height: int,
    width: int,
    inv_depth: Optional[np.ndarray] = None,
    valid: Optional[np.ndarray] = None,
) -> ScanResult:
    """Z-buffered triangle fill at pixel centers (x + 0.5, y + 0.5).

    `points` are per-vertex pixel coordinates (x right, y down). With
    `inv_depth` (1/z per vertex) barycentrics are perspective-corrected and
    the nearest triangle wins; without it every triangle sits at depth 0.
    Exact depth ties go to the lower face index.
    """
    face_index = np.full((height, width), -1, dtype=np.int64)
    bary = np.zeros((height, width, 3), dtype=np.float64)
    depth = np.full((height, width), np.inf, dtype=np.float64)
    if len(faces) == 0 or height == 0 or width == 0:
        return ScanResult(face_index, bary, depth)

    pts = np.asarray(points, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    tri = pts[faces]  # (F, 3, 2)
    ok = np.isfinite(tri).all(axis=(1, 2))
    if valid is not None:
        ok &= valid
    ax, ay = tri[:, 0, 0], tri[:, 0, 1]
    bx, by = tri[:, 1, 0], tri[:, 1, 1]
    cx, cy = tri[:, 2, 0], tri[:, 2, 1]
    with np.errstate(invalid="ignore"):
        area = _edge(ax, ay, bx, by, cx, cy)
        ok &= area != 0
        x0 = np.ceil(np.nanmin(tri[:, :, 0], axis=1) - 0.5)
        x1 = np.floor(np.nanmax(tri[:, :, 0], axis=1) - 0.5)
        y0 = np.ceil(np.nanmin(tri[:, :, 1], axis=1) - 0.5)
        y1 = np.floor(np.nanmax(tri[:, :, 1], axis=1) - 0.5)
    x0 = np.clip(np.nan_to_num(x0, nan=0.0), 0, width - 1).astype(np.int64)
    x1 = np.clip(np.nan_to_num(x1, nan=-1.0), -1, width - 1).astype(np.int64)
    y0 = np.clip(np.nan_to_num(y0, nan=0.0), 0, height - 1).astype(np.int64)
    y1 = np.clip(np.nan_to_num(y1, nan=-1.0), -1, height - 1).astype(np.int64)
    bw = np.where(ok, np.maximum(x1 - x0 + 1, 0), 0)
    bh = np.where(ok, np.maximum(y1 - y0 + 1, 0), 0)
    n_pairs = bw * bh

    flat_face = face_index.reshape(-1)
    flat_bary = bary.reshape(-1, 3)
    flat_depth = depth.reshape(-1)

    start = 0
    n_faces = len(faces)
    while start < n_faces:
        # grow the chunk until the candidate budget is spent (at least one face)
        csum = np.cumsum(n_pairs[start:])
        stop = start + max(1, int(np.searchsorted(csum, _PAIR_CHUNK, side="right")))
        fid = np.arange(start, stop)
        counts = n_pairs[start:stop]
        total = int(counts.sum())
        if total == 0:
            start = stop
            continue
        f = np.repeat(fid, counts)
        offsets = np.repeat(np.cumsum(counts) - counts, counts)
        local = np.arange(total, dtype=np.int64) - offsets
        px = x0[f] + local % bw[f]
        py = y0[f] + local // bw[f]
        sx = px + 0.5
        sy = py + 0.5

        w_a = _edge(bx[f], by[f], cx[f], cy[f], sx, sy)
        w_b = _edge(cx[f], cy[f], ax[f], ay[f], sx, sy)
        w_c = _edge(ax[f], ay[f], bx[f], by[f], sx, sy)
        sgn = np.sign(area[f])
        inside = (w_a * sgn >= 0) & (w_b * sgn >= 0) & (w_c * sgn >= 0)
        if not inside.any():
            start = stop
            continue
        f, px, py = f[inside], px[inside], py[inside]
        lam = np.stack([w_a[inside], w_b[inside], w_c[inside]], axis=1) / area[f][:, None]
        if inv_depth is not None:
            q = lam * inv_depth[faces[f]]
            s = q.sum(axis=1)
            z = 1.0 / s
            lam = q / s[:, None]
        else:
            z = np.zeros(len(f))

        pix = py * width + px
        order = np.lexsort((f, z, pix))
        pix_sorted = pix[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = pix_sorted[1:] != pix_sorted[:-1]
        win = order[first]
        wp, wf, wz = pix[win], f[win], z[win]
        old_z = flat_depth[wp]
        old_f = flat_face[wp]
        better = (old_f < 0) | (wz < old_z) | ((wz == old_z) & (wf < old_f))
        wp, wf, wz, wl = wp[better], wf[better], wz[better], lam[win][better]
        flat_face[wp] = wf
        flat_depth[wp] = wz
        flat_bary[wp] = wl
        start = stop

    return ScanResult(face_index, bary, depth)
