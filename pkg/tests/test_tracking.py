import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depthscene import shapes
from depthscene.generative import camera_from_params, camera_params
from depthscene.geometry import CameraIntrinsics, Pose, inverse, rot_z
from depthscene.likelihood import NoiseParams
from depthscene.render import render_depth
from depthscene.scene import ObjectModel, make_table
from depthscene.tracking import (
    TrackSchedule,
    TrackState,
    centered_scene,
    generate_orbit_sequence,
    look_at_views,
    pose_error,
    track_camera,
)

K = CameraIntrinsics.from_fov(32, 32, 40.0)
NOISE = NoiseParams(0.05, 0.005)


@pytest.fixture(scope="module")
def mug():
    return shapes.make_library(["mug"])[0]


def test_pose_error_known_offsets():
    a = camera_from_params(0.6, 0.3, 0.7)
    assert pose_error(a, a) == pytest.approx((0.0, 0.0), abs=1e-6)
    b = rot_z(0.0, (0.03, 0.0, -0.04)) @ a
    assert pose_error(b, a).position_cm == pytest.approx(5.0)
    c = Pose.from_rotation(a.rotation @ rot_z(math.radians(7.0)).rotation, a.translation)
    assert pose_error(c, a).orientation_deg == pytest.approx(7.0)
    assert pose_error(a, c) == pytest.approx(pose_error(c, a))


def test_schedule_offsets():
    s = TrackSchedule()
    o = s.offsets(0)
    assert o.shape == (125, 3)
    np.testing.assert_allclose(o.max(axis=0), [0.03, math.radians(10), math.radians(10)])
    np.testing.assert_allclose(s.offsets(2), o / 9.0)
    assert np.all(TrackSchedule(points=1).offsets(0) == 0)
    for bad in (dict(points=0), dict(refinements=-1), dict(shrink=1.0), dict(keep=0)):
        with pytest.raises(ValueError):
            TrackSchedule(**bad)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.2, 2.0), st.floats(0.0, 2 * math.pi), st.floats(0.05, 1.5))
def test_look_at_views_match_camera_poses(d, az, alt):
    m = look_at_views(np.array([[d, az, alt]]))[0]
    np.testing.assert_allclose(m, inverse(camera_from_params(d, az, alt)).matrix(), atol=1e-9)


def test_orbit_sequence(mug):
    frames, poses = generate_orbit_sequence(mug, K, 8, NOISE, np.random.default_rng(0))
    assert len(frames) == len(poses) == 8
    params = np.array([camera_params(p) for p in poses])
    np.testing.assert_allclose(params[:, 0], 0.6)
    np.testing.assert_allclose(np.diff(np.unwrap(params[:, 1])), 2 * math.pi / 8)
    again, _ = generate_orbit_sequence(mug, K, 8, NOISE, np.random.default_rng(0))
    assert all(a == b for a, b in zip(frames, again))
    one, p1 = generate_orbit_sequence(mug, K, 1, NOISE, np.random.default_rng(0))
    assert len(one) == 1 and pose_error(p1[0], poses[0]) == pytest.approx((0, 0), abs=1e-6)
    with pytest.raises(ValueError):
        generate_orbit_sequence(mug, K, 0, NOISE, np.random.default_rng(0))


def test_centered_scene_too_big():
    big = ObjectModel.from_grid(0, shapes.box(12, 12, 12, resolution=0.05))
    with pytest.raises(ValueError):
        centered_scene(big, make_table())


def test_noiseless_tracking_stays_within_final_grid(mug):
    # exact renders with 3 degree azimuth steps; the final grid spacing is 10/9/2 degrees
    scene = centered_scene(mug)
    poses = [camera_from_params(0.6, math.radians(3 * i), math.radians(35)) for i in range(6)]
    frames = [render_depth(scene, p, K) for p in poses]
    state = track_camera(frames, scene, K, poses[0], NOISE)
    assert len(state.poses) == 6 and state.poses[0] is poses[0]
    for est, gt in zip(state.poses, poses):
        e = pose_error(est, gt)
        assert e.position_cm < 1.0 and e.orientation_deg < 1.0


def test_tracking_thread_determinism(mug):
    frames, poses = generate_orbit_sequence(mug, K, 4, NOISE, np.random.default_rng(1), sweep=math.radians(20))
    scene = centered_scene(mug)
    a = track_camera(frames, scene, K, poses[0], NOISE, threads=1)
    b = track_camera(frames, scene, K, poses[0], NOISE, threads=4)
    assert all(np.array_equal(x.matrix(), y.matrix()) for x, y in zip(a.poses, b.poses))


def test_tracking_errors(mug):
    scene = centered_scene(mug)
    with pytest.raises(ValueError):
        track_camera([], scene, K, camera_from_params(0.6, 0, 0.6), NOISE)
    off = Pose(camera_from_params(0.6, 0, 0.6).quat, (0.5, 0.1, 0.3))
    frame = render_depth(scene, off, K)
    with pytest.raises(ValueError):
        track_camera([frame, frame], scene, K, off, NOISE)
    single = track_camera([frame], scene, K, camera_from_params(0.6, 0, 0.6), NOISE)
    assert len(single.poses) == 1


def test_fps():
    s = TrackState(durations=[5.0, 0.5, 0.5])
    assert s.fps() == pytest.approx(2.0)
    assert s.fps(skip_first=False) == pytest.approx(0.5)
    assert TrackState(durations=[0.25]).fps() == pytest.approx(4.0)
