import numpy as np
import pytest

from conftest import edge_mask, random_camera, random_scene, raycast_depth
from depthscene import render, shapes
from depthscene.geometry import CameraIntrinsics, DepthImage, Pose, TriangleMesh, box_mesh, inverse, rot_z
from depthscene.render import render_batch, render_depth, render_mesh_transforms
from depthscene.scene import ContactParams, ObjectModel, SceneGraph, make_table


def test_empty_world_is_background(k32):
    d = render_depth(None, Pose(), k32)
    assert d.count() == 0 and d == DepthImage.empty(k32)


def test_fronto_parallel_plane_depth():
    # a large square 2 m in front of the camera fills the image at depth 2
    k = CameraIntrinsics.from_fov(16, 12, 60.0)
    mesh = TriangleMesh([[-5, -5, 2], [5, -5, 2], [5, 5, 2], [-5, 5, 2]], [[0, 1, 2], [0, 2, 3]])
    d = render_mesh_transforms(mesh, np.eye(4)[None], k)[0]
    np.testing.assert_allclose(d, 2.0, atol=1e-12)


def test_near_plane_clipping():
    # a triangle straddling the camera plane: only the part beyond near is drawn
    k = CameraIntrinsics.from_fov(16, 16, 90.0, near=0.5, far=5.0)
    mesh = TriangleMesh([[-10, -10, 0.0], [10, -10, 0.0], [0, 10, 4.0]], [[0, 1, 2]])
    d = render_mesh_transforms(mesh, np.eye(4)[None], k)[0]
    valid = d < k.far
    assert valid.any()
    assert d[valid].min() >= 0.5 - 1e-12
    ref = raycast_depth_mesh(mesh, k)
    mask = ~edge_mask(ref, k.far, jump=0.2)
    assert np.all(np.abs(d - ref)[mask] < 1e-5)


def raycast_depth_mesh(mesh, k):
    table = ObjectModel(-1, mesh, None, "m")
    return raycast_depth(SceneGraph(table), Pose(), k)


def test_matches_raycast_oracle(small_library, k32):
    rng = np.random.default_rng(0)
    for _ in range(5):
        scene = random_scene(rng, small_library)
        cam = random_camera(rng)
        d = render_depth(scene, cam, k32).depth
        ref = raycast_depth(scene, cam, k32)
        interior = ~edge_mask(ref, k32.far)
        ok = np.abs(d - ref) < 1e-5
        assert ok[interior].mean() >= 0.99


def test_batch_equals_sequential(small_library):
    k = CameraIntrinsics.from_fov(25, 25, 40.0)
    rng = np.random.default_rng(1)
    hyps = [(random_scene(rng, small_library), random_camera(rng)) for _ in range(64)]
    seq = [render_depth(s, c, k) for s, c in hyps]
    for threads in (1, 4):
        out = render_batch(hyps, k, threads=threads)
        assert all(a == b for a, b in zip(out, seq))
    assert render_batch(hyps[:1], k)[0] == seq[0]
    dup = render_batch([hyps[0]] * 5, k, threads=3)
    assert all(d == seq[0] for d in dup)
    with pytest.raises(ValueError):
        render_batch([], k)


def test_transforms_thread_invariant(small_library):
    k = CameraIntrinsics.from_fov(32, 24, 50.0)
    obj = small_library[0]
    rng = np.random.default_rng(2)
    tfs = []
    for _ in range(17):
        cam = random_camera(rng)
        tfs.append((inverse(cam) @ Pose(rng.normal(size=4), (0, 0, 0.03))).matrix())
    tfs = np.array(tfs)
    base = render_depth(SceneGraph(make_table()), Pose((1, 0, 0, 0), (0, 0, 1.0)), k).depth
    ref = render_mesh_transforms(obj.mesh, tfs, k, base=base, threads=1)
    for t in (2, 3, 8):
        assert np.array_equal(render_mesh_transforms(obj.mesh, tfs, k, base=base, threads=t), ref)
    render.set_threads(4)
    try:
        assert np.array_equal(render_mesh_transforms(obj.mesh, tfs, k, base=base), ref)
    finally:
        render.set_threads(1)


def test_occlusion_monotone(small_library, k32):
    rng = np.random.default_rng(3)
    for _ in range(10):
        two = random_scene(rng, small_library, n=2)
        one = SceneGraph(two.table, two.children[:1])
        cam = random_camera(rng)
        d1 = render_depth(one, cam, k32).depth
        d2 = render_depth(two, cam, k32).depth
        assert np.all(d2 <= d1)
        assert np.all(render_depth(SceneGraph(two.table), cam, k32).depth >= d1)


def test_camera_equivariance(small_library, k32):
    rng = np.random.default_rng(4)
    scene = random_scene(rng, small_library)
    cam = random_camera(rng)
    verts, tris = render.scene_mesh(scene)
    t = rot_z(0.7, (0.1, -0.2, 0.05)) @ Pose((0.99, 0.05, 0.0, 0.02))
    a = render_mesh_transforms((verts, tris), inverse(cam).matrix()[None], k32)[0]
    moved = t.apply(verts)
    b = render_mesh_transforms((moved, tris), inverse(t @ cam).matrix()[None], k32)[0]
    assert np.mean(np.abs(a - b) < 1e-5) >= 0.99
    interior = ~edge_mask(a, k32.far)
    assert np.all(np.abs(a - b)[interior] < 1e-5)


def test_tie_break_lowest_index_is_deterministic():
    # two coplanar copies of the same square render identically regardless of order
    k = CameraIntrinsics.from_fov(8, 8, 60.0)
    sq = box_mesh((-1, -1, 1.0), (1, 1, 1.5))
    v = np.concatenate([sq.vertices, sq.vertices])
    t = np.concatenate([sq.triangles, sq.triangles + len(sq.vertices)])
    a = render_mesh_transforms((v, t), np.eye(4)[None], k)[0]
    b = render_mesh_transforms(sq, np.eye(4)[None], k)[0]
    np.testing.assert_array_equal(a, b)


def test_depth_is_camera_z_not_range():
    k = CameraIntrinsics.from_fov(21, 21, 90.0)
    mesh = box_mesh((-3, -3, 1.0), (3, 3, 1.2))
    d = render_mesh_transforms(mesh, np.eye(4)[None], k)[0]
    # every pixel sees the front face at z=1 even at the image corners
    np.testing.assert_allclose(d, 1.0, atol=1e-12)


def test_object_on_table_visible_from_above():
    k = CameraIntrinsics.from_fov(32, 32, 40.0)
    obj = ObjectModel.from_grid(0, shapes.box(10, 10, 10))
    table = make_table()
    scene = SceneGraph(table).add_child(obj, 1, ContactParams(0.2, 0.2, 0.0))
    cam = Pose.from_rotation(np.diag([1.0, -1.0, -1.0]), (0, 0, 1.0))  # looking straight down
    d = render_depth(scene, cam, k).depth
    assert d.min() == pytest.approx(0.9, abs=1e-9)
    # remaining pixels see the table top or, past its edge, the background
    rest = d[np.abs(d - 0.9) > 1e-9]
    assert np.all((np.abs(rest - 1.0) < 1e-9) | (rest == k.far))
    # the 10 cm top face covers exactly the pixel centers projecting inside it
    u = np.arange(k.width)
    n = int(np.sum(np.abs((u - k.cx) * 0.9 / k.fx) < 0.05))
    assert np.sum(np.abs(d - 0.9) < 1e-9) == n * n
