import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neuraldress.engine.body import PosedMesh, a_pose, pose_mesh
from neuraldress.engine.camera import Camera, frontal_camera
from neuraldress.engine.errors import ParameterError
from neuraldress.engine.raster import RasterBuffers, ZNEAR, project, rasterize
from neuraldress.engine.scan import scan_triangles

SIZE = 32


def _brute_force(points, faces, inv_depth, height, width):
    """Every pixel against every triangle in face order; only a strictly nearer face replaces, so ties keep the lower one."""
    ys, xs = np.mgrid[0:height, 0:width]
    px, py = xs + 0.5, ys + 0.5
    face_index = np.full((height, width), -1, dtype=np.int64)
    depth = np.full((height, width), np.inf)
    bary = np.zeros((height, width, 3))
    for f, (i, j, k) in enumerate(faces):
        (ax, ay), (bx, by), (cx, cy) = points[i], points[j], points[k]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area == 0:
            continue
        wa = (cx - bx) * (py - by) - (cy - by) * (px - bx)
        wb = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
        wc = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        s = np.sign(area)
        inside = (wa * s >= 0) & (wb * s >= 0) & (wc * s >= 0)
        inside &= (px >= min(ax, bx, cx)) & (px <= max(ax, bx, cx))
        inside &= (py >= min(ay, by, cy)) & (py <= max(ay, by, cy))
        q = np.stack([wa, wb, wc], axis=-1) / area * inv_depth[[i, j, k]]
        total = q.sum(axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = 1.0 / total
            lam = q / total[..., None]
        nearer = inside & (z < depth)
        face_index[nearer] = f
        depth[nearer] = z[nearer]
        bary[nearer] = lam[nearer]
    return face_index, depth, bary


triangles = st.integers(1, 20).flatmap(
    lambda n: st.tuples(
        st.lists(st.tuples(st.floats(-4.0, SIZE + 4.0), st.floats(-4.0, SIZE + 4.0)), min_size=3 * n, max_size=3 * n),
        st.lists(st.floats(0.5, 10.0), min_size=3 * n, max_size=3 * n),
    )
)


@settings(max_examples=25, deadline=None)
@given(triangles)
def test_scan_matches_per_pixel_oracle(tris):
    pts, depths = tris
    points = np.asarray(pts, dtype=np.float64)
    inv_depth = 1.0 / np.asarray(depths, dtype=np.float64)
    faces = np.arange(len(points)).reshape(-1, 3)
    got = scan_triangles(points, faces, SIZE, SIZE, inv_depth=inv_depth)
    want_face, want_depth, want_bary = _brute_force(points, faces, inv_depth, SIZE, SIZE)
    assert np.array_equal(got.face_index, want_face)
    covered = want_face >= 0
    assert np.allclose(got.depth[covered], want_depth[covered], rtol=1e-9)
    assert np.allclose(got.bary[covered], want_bary[covered], atol=1e-9)
    assert np.allclose(got.bary[covered].sum(axis=-1), 1.0)


meshes = st.integers(1, 12).flatmap(
    lambda n: st.tuples(
        st.lists(st.tuples(st.floats(-1.5, 1.5), st.floats(-1.5, 1.5), st.floats(0.5, 10.0)),
                 min_size=3 * n, max_size=3 * n),
        st.lists(st.tuples(st.floats(0.0, 1.0), st.floats(0.0, 1.0)), min_size=3 * n, max_size=3 * n),
    )
)


@settings(max_examples=100, deadline=None)
@given(meshes)
def test_rasterize_matches_per_pixel_oracle(drawn):
    verts, uvs = drawn
    vertices = np.asarray(verts, dtype=np.float64)
    uv_coords = np.asarray(uvs, dtype=np.float64)
    faces = np.arange(len(vertices)).reshape(-1, 3)
    mesh = PosedMesh(vertices=vertices, faces=faces, uv_coords=uv_coords,
                     face_regions=np.zeros(len(faces), dtype=np.int64))
    cam = Camera(focal=SIZE, principal=(SIZE / 2, SIZE / 2))
    got = rasterize(mesh, cam, SIZE)

    points, z = project(vertices, cam)
    assert np.allclose(points, SIZE * vertices[:, :2] / vertices[:, 2:] + SIZE / 2)
    want_face, _, want_bary = _brute_force(points, faces, 1.0 / z, SIZE, SIZE)
    covered = want_face >= 0
    assert np.array_equal(got.face_index, want_face)
    assert np.array_equal(got.mask.astype(bool), covered)
    want_uv = np.clip((want_bary[covered][..., None] * uv_coords[faces[want_face[covered]]]).sum(axis=1), 0.0, 1.0)
    assert np.allclose(got.uv[covered], want_uv, atol=1e-5)
    assert (got.uv[~covered] == 0).all()


def test_depth_tie_goes_to_lower_face():
    points = np.array([[2.0, 2.0], [30.0, 2.0], [2.0, 30.0]] * 2)
    faces = np.array([[0, 1, 2], [3, 4, 5]])
    got = scan_triangles(points, faces, SIZE, SIZE, inv_depth=np.ones(6))
    covered = got.face_index >= 0
    assert covered.any()
    assert (got.face_index[covered] == 0).all()


def test_nearer_triangle_wins():
    points = np.array([[2.0, 2.0], [30.0, 2.0], [2.0, 30.0]] * 2)
    faces = np.array([[0, 1, 2], [3, 4, 5]])
    inv_depth = np.array([1.0, 1.0, 1.0, 2.0, 2.0, 2.0])
    got = scan_triangles(points, faces, SIZE, SIZE, inv_depth=inv_depth)
    covered = got.face_index >= 0
    assert (got.face_index[covered] == 1).all()
    assert np.allclose(got.depth[covered], 0.5)


def _mesh(vertices, faces):
    return PosedMesh(
        vertices=np.asarray(vertices, dtype=np.float64),
        faces=np.asarray(faces, dtype=np.int64),
        uv_coords=np.full((len(vertices), 2), 0.5),
        face_regions=np.zeros(len(faces), dtype=np.int64),
    )


def test_face_touching_near_plane_is_dropped():
    cam = Camera(focal=SIZE, principal=(SIZE / 2, SIZE / 2))
    mesh = _mesh([[-1.0, -1.0, 2.0], [1.0, -1.0, 2.0], [0.0, 1.0, ZNEAR / 2]], [[0, 1, 2]])
    buffers = rasterize(mesh, cam, SIZE)
    assert buffers.mask.sum() == 0
    mesh = _mesh([[-1.0, -1.0, 2.0], [1.0, -1.0, 2.0], [0.0, 1.0, 2.0]], [[0, 1, 2]])
    assert rasterize(mesh, cam, SIZE).mask.sum() > 0


def test_empty_mesh_gives_blank_buffers():
    buffers = rasterize(PosedMesh.empty(), frontal_camera(SIZE), SIZE)
    assert buffers.mask.sum() == 0
    assert (buffers.face_index == -1).all()
    assert np.isinf(buffers.depth).all()


def test_rasterize_rejects_bad_camera():
    cam = Camera(focal=0.0, principal=(16.0, 16.0))
    with pytest.raises(ParameterError):
        rasterize(PosedMesh.empty(), cam, SIZE)


def test_body_render_has_regions(body):
    mesh = pose_mesh(body, a_pose(body), np.zeros(body.n_shape))
    buffers = rasterize(mesh, frontal_camera(64), 64)
    assert buffers.mask.sum() > 0
    assert ((buffers.uv >= 0) & (buffers.uv <= 1)).all()
    assert (buffers.region[buffers.mask == 0] == -1).all()
    labels = set(np.unique(buffers.region[buffers.mask == 1]).tolist())
    assert {0, 1}.issubset(labels)


def test_buffers_round_trip(tmp_path, body):
    mesh = pose_mesh(body, a_pose(body), np.zeros(body.n_shape))
    buffers = rasterize(mesh, frontal_camera(SIZE), SIZE)
    buffers.save(tmp_path / "b.npz")
    back = RasterBuffers.load(tmp_path / "b.npz")
    assert np.array_equal(back.uv, buffers.uv)
    assert np.array_equal(back.face_index, buffers.face_index)
