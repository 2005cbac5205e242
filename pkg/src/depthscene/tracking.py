"""Camera-pose tracking through a depth video of a known scene.

The camera is parametrized as a look-at pose (distance, azimuth, altitude)
aimed at the world origin. Each frame is searched on a small grid of
offsets around the previous estimate; the best grid point is refined on
successively finer grids.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .generative import camera_from_params, camera_params
from .geometry import CameraIntrinsics, Pose
from .likelihood import NoiseParams, WindowScorer, default_window, sample_observation, visible_volume
from .render import render_depth, render_mesh_transforms, scene_mesh
from .scene import ContactParams, ObjectModel, SceneGraph, make_table, support_extents

__all__ = [
    "PoseError",
    "TrackState",
    "TrackSchedule",
    "pose_error",
    "centered_scene",
    "generate_orbit_sequence",
    "track_camera",
    "look_at_views",
]


class PoseError(NamedTuple):
    position_cm: float
    orientation_deg: float


def pose_error(est: Pose, gt: Pose) -> PoseError:
    pos = 100.0 * float(np.linalg.norm(est.translation - gt.translation))
    rel = est.rotation.T @ gt.rotation
    c = np.clip((np.trace(rel) - 1.0) / 2.0, -1.0, 1.0)
    return PoseError(pos, math.degrees(math.acos(c)))


@dataclass
class TrackState:
    poses: list = field(default_factory=list)
    durations: list = field(default_factory=list)  # seconds per frame

    def fps(self, skip_first: bool = True) -> float:
        d = self.durations[1:] if skip_first and len(self.durations) > 1 else self.durations
        return len(d) / max(sum(d), 1e-12)


@dataclass(frozen=True)
class TrackSchedule:
    """Half-widths of the first search grid and how it is refined.

    ``points`` grid points per dimension span [-extent, +extent]; each
    refinement shrinks the extent by ``shrink`` around the current best.
    ``keep`` > 1 refines around the best ``keep`` points of every stage.
    """

    distance: float = 0.03
    azimuth: float = math.radians(10.0)
    altitude: float = math.radians(10.0)
    points: int = 5
    refinements: int = 2
    shrink: float = 3.0
    keep: int = 1

    def __post_init__(self):
        if self.points < 1 or self.refinements < 0 or self.keep < 1 or self.shrink <= 1:
            raise ValueError("invalid tracking schedule")

    def offsets(self, stage: int) -> np.ndarray:
        """(points**3, 3) offsets in (distance, azimuth, altitude) for a stage."""
        scale = self.shrink ** -stage
        axes = [np.linspace(-e * scale, e * scale, self.points) if self.points > 1 else np.zeros(1)
                for e in (self.distance, self.azimuth, self.altitude)]
        g = np.meshgrid(*axes, indexing="ij")
        return np.stack([a.ravel() for a in g], axis=1)


def centered_scene(obj: ObjectModel, table: ObjectModel | None = None, face: int = 1,
                   dtheta: float = 0.0) -> SceneGraph:
    """Scene with ``obj`` resting at the center of the table."""
    table = table or make_table()
    sx, sy = support_extents(table, obj, face)
    if sx <= 0 or sy <= 0:
        raise ValueError("object does not fit on the table")
    return SceneGraph(table).add_child(obj, face, ContactParams(sx / 2, sy / 2, dtheta))


def generate_orbit_sequence(obj: ObjectModel, k: CameraIntrinsics, n_frames: int, noise: NoiseParams,
                            rng: np.random.Generator, distance: float = 0.6,
                            altitude: float = math.radians(35.0), azimuth_start: float = 0.0,
                            sweep: float = 2 * math.pi, scene: SceneGraph | None = None):
    """Noisy depth frames from cameras sweeping uniformly in azimuth around the object.

    Frame i looks from azimuth ``azimuth_start + i * sweep / n_frames``.

    Returns:
        (frames, ground-truth camera poses)
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    scene = scene or centered_scene(obj)
    frames, poses = [], []
    for i in range(n_frames):
        cam = camera_from_params(distance, azimuth_start + i * sweep / n_frames, altitude)
        y = render_depth(scene, cam, k)
        frames.append(sample_observation(y, k, noise, rng))
        poses.append(cam)
    return frames, poses


def look_at_views(params: np.ndarray) -> np.ndarray:
    """World-to-camera matrices (n, 4, 4) of look-at cameras with (distance, azimuth, altitude) rows."""
    d, az, alt = np.asarray(params, dtype=np.float64).T
    ca = np.cos(alt)
    eye = d[:, None] * np.stack([ca * np.cos(az), ca * np.sin(az), np.sin(alt)], axis=1)
    z = -eye / np.linalg.norm(eye, axis=1, keepdims=True)
    x = np.cross(z, np.array([0.0, 0.0, 1.0]))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    y = np.cross(z, x)
    rt = np.stack([x, y, z], axis=1)  # rows are the camera axes, i.e. R transposed
    m = np.zeros((len(d), 4, 4))
    m[:, :3, :3] = rt
    m[:, :3, 3] = -np.einsum("nij,nj->ni", rt, eye)
    m[:, 3, 3] = 1.0
    return m


def track_camera(frames, scene: SceneGraph, k: CameraIntrinsics, initial: Pose, noise: NoiseParams,
                 schedule: TrackSchedule | None = None, sigma_max: float = 0.04,
                 window: int | None = None, threads: int | None = None) -> TrackState:
    """Per-frame MAP camera pose by coarse-to-fine grid search around the previous estimate.

    The first frame's pose is ``initial``. Noise parameters stay fixed.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("empty frame list")
    schedule = schedule or TrackSchedule()
    start = camera_params(initial)
    if start is None:
        raise ValueError("initial pose must look at the origin")
    w = default_window(k.width, k.height) if window is None else int(window)
    mesh = scene_mesh(scene)
    vol = visible_volume(k)
    state = TrackState([initial], [0.0])
    current = np.array(start)
    for frame in frames[1:]:
        t0 = time.perf_counter()
        scorer = WindowScorer(frame, k, [noise.sigma_noise], vol, sigma_max, w)
        centers = [current]
        best, best_score = current, -math.inf
        for stage in range(schedule.refinements + 1):
            cand = np.concatenate([c + schedule.offsets(stage) for c in centers])
            cand[:, 0] = np.maximum(cand[:, 0], 1e-3)
            cand[:, 2] = np.clip(cand[:, 2], 1e-3, math.pi / 2 - 1e-3)
            depths = render_mesh_transforms(mesh, look_at_views(cand), k, threads=threads)
            scores = np.array([scorer.log_likelihoods(d, [noise])[0] for d in depths])
            # stable order so ties resolve identically for any thread count
            order = np.argsort(-scores, kind="stable")
            if scores[order[0]] > best_score:
                best, best_score = cand[order[0]], scores[order[0]]
            centers = [cand[i] for i in order[:schedule.keep]]
        current = best.copy()
        current[1] %= 2 * math.pi
        state.poses.append(camera_from_params(*current))
        state.durations.append(time.perf_counter() - t0)
    return state
