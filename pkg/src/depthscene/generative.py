"""The forward scene model: scene prior, look-at camera prior, renderer, depth noise."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, DepthImage, Pose, depth_to_cloud, look_at
from .likelihood import (
    NoiseParams,
    default_window,
    full_log_likelihood,
    sample_observation,
    visible_volume,
    windowed_log_likelihood,
)
from .render import render_depth
from .scene import ObjectModel, SceneGraph, make_table, sample_scene_prior, scene_prior_logpdf

__all__ = [
    "CameraPrior",
    "SceneModel",
    "Trace",
    "camera_params",
    "camera_from_params",
    "sample_camera_prior",
    "camera_prior_logpdf",
    "sample_scene_model",
    "observation_log_likelihood",
    "joint_logpdf",
]

_LOOK_AT_TOL = 1e-6


@dataclass(frozen=True)
class CameraPrior:
    """Uniform intervals for the camera's distance to the origin, azimuth and altitude."""

    distance: tuple[float, float] = (0.5, 1.5)
    azimuth: tuple[float, float] = (0.0, 2 * math.pi)
    altitude: tuple[float, float] = (math.pi / 6, math.pi / 3)

    def __post_init__(self):
        for name in ("distance", "azimuth", "altitude"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ValueError(f"{name} interval is empty")
        if self.distance[0] <= 0:
            raise ValueError("distance must be positive")
        if not (0 < self.altitude[0] and self.altitude[1] < math.pi / 2):
            raise ValueError("altitude range must lie in (0, pi/2)")

    def intervals(self):
        return (self.distance, self.azimuth, self.altitude)


def camera_from_params(distance: float, azimuth: float, altitude: float) -> Pose:
    eye = distance * np.array([
        math.cos(altitude) * math.cos(azimuth),
        math.cos(altitude) * math.sin(azimuth),
        math.sin(altitude),
    ])
    return look_at(eye)


def camera_params(pose: Pose) -> tuple[float, float, float] | None:
    """(distance, azimuth in [0, 2pi), altitude) of a look-at camera; None if not aimed at the origin."""
    t = pose.translation
    d = float(np.linalg.norm(t))
    if d == 0:
        return None
    alt = math.asin(max(-1.0, min(1.0, t[2] / d)))
    az = math.atan2(t[1], t[0]) % (2 * math.pi)
    try:
        ref = look_at(t)
    except ValueError:
        return None
    if np.abs(ref.rotation - pose.rotation).max() > _LOOK_AT_TOL:
        return None
    return d, az, alt


def sample_camera_prior(cp: CameraPrior, rng: np.random.Generator) -> Pose:
    d, az, alt = (float(rng.uniform(lo, hi)) if hi > lo else float(lo) for lo, hi in cp.intervals())
    return camera_from_params(d, az, alt)


def _in_interval(x: float, lo: float, hi: float, periodic: bool = False) -> bool:
    tol = 1e-9
    if periodic:
        if hi - lo >= 2 * math.pi - 1e-12:
            return True
        return any(lo - tol <= y <= hi + tol for y in (x - 2 * math.pi, x, x + 2 * math.pi))
    return lo - tol <= x <= hi + tol


def camera_prior_logpdf(cp: CameraPrior, pose: Pose) -> float:
    """Product of uniform densities; point intervals count as point masses (log 1)."""
    params = camera_params(pose)
    if params is None:
        return -math.inf
    total = 0.0
    for x, (lo, hi), periodic in zip(params, cp.intervals(), (False, True, False)):
        if not _in_interval(x, lo, hi, periodic):
            return -math.inf
        if hi > lo:
            total -= math.log(hi - lo)
    return total


@dataclass(frozen=True)
class SceneModel:
    """Model constants shared by sampling, scoring and inference.

    ``window`` is the likelihood window radius; None scores with the full
    all-pairs likelihood. ``"auto"`` picks the resolution-scaled default.
    """

    library: tuple
    intrinsics: CameraIntrinsics
    table: ObjectModel = field(default_factory=make_table)
    sigma_max: float = 0.04
    camera_prior: CameraPrior = field(default_factory=CameraPrior)
    window: int | str | None = "auto"
    prefactor: str = "printed"

    def __post_init__(self):
        object.__setattr__(self, "library", tuple(self.library))
        if self.sigma_max <= 0:
            raise ValueError("sigma_max must be positive")
        if self.window == "auto":
            object.__setattr__(self, "window", default_window(self.intrinsics.width, self.intrinsics.height))

    @property
    def volume(self) -> float:
        return visible_volume(self.intrinsics)


@dataclass(frozen=True, eq=False)
class Trace:
    scene: SceneGraph
    camera: Pose
    noise: NoiseParams
    rendered: DepthImage
    observed: DepthImage


def sample_scene_model(n: int, model: SceneModel, rng: np.random.Generator) -> Trace:
    scene = sample_scene_prior(rng, n, model.library, model.table)
    camera = sample_camera_prior(model.camera_prior, rng)
    y = render_depth(scene, camera, model.intrinsics)
    p_outlier = float(rng.uniform(0.0, 1.0))
    sigma = float(rng.uniform(0.0, model.sigma_max))
    while sigma == 0.0:
        sigma = float(rng.uniform(0.0, model.sigma_max))
    noise = NoiseParams(p_outlier, sigma)
    observed = sample_observation(y, model.intrinsics, noise, rng)
    return Trace(scene, camera, noise, y, observed)


def observation_log_likelihood(observed: DepthImage, rendered: DepthImage, noise: NoiseParams,
                               model: SceneModel) -> float:
    """Likelihood of an observation given a render, full or windowed per ``model.window``."""
    k = model.intrinsics
    if rendered.count() == 0:
        return -math.inf
    if model.window is None:
        return full_log_likelihood(depth_to_cloud(observed, k), depth_to_cloud(rendered, k), noise,
                                   model.volume, model.sigma_max, model.prefactor)
    return windowed_log_likelihood(observed, rendered, k, noise, model.volume, model.sigma_max,
                                   int(model.window), model.prefactor)


def joint_logpdf(t: Trace, model: SceneModel, include_camera: bool = True) -> float:
    """Scene prior + camera prior + observation likelihood; -inf off the support."""
    lp = scene_prior_logpdf(t.scene, len(model.library))
    if include_camera:
        lp += camera_prior_logpdf(model.camera_prior, t.camera)
    if not math.isfinite(lp) or not t.noise.in_support(model.sigma_max):
        return -math.inf
    if render_depth(t.scene, t.camera, model.intrinsics) != t.rendered:
        return -math.inf
    return lp + observation_log_likelihood(t.observed, t.rendered, t.noise, model)
