"""Strict JSON configuration schemas for the experiment commands.

Every model forbids unknown keys, so a misspelled option is an error
instead of a silently ignored setting. ``defaults(name)`` gives the full
default configuration of a command.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .generative import CameraPrior, SceneModel
from .geometry import CameraIntrinsics
from .inference import Schedule, ScheduleStage
from .likelihood import NoiseParams
from .scene import make_table
from .tracking import TrackSchedule

__all__ = ["ConfigError", "COMMANDS", "load_config", "defaults"]


class ConfigError(ValueError):
    pass


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CameraConfig(Strict):
    width: int = Field(64, ge=1)
    height: int = Field(64, ge=1)
    fov_deg: float = Field(40.0, gt=0, lt=180)
    near: float = Field(0.01, gt=0)
    far: float = Field(5.0, gt=0)

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_fov(self.width, self.height, self.fov_deg, self.near, self.far)


class TableConfig(Strict):
    width: float = Field(0.5, gt=0)
    depth: float = Field(0.5, gt=0)
    thickness: float = Field(0.01, gt=0)


class CameraPriorConfig(Strict):
    distance: tuple[float, float] = (0.5, 1.5)
    azimuth_deg: tuple[float, float] = (0.0, 360.0)
    altitude_deg: tuple[float, float] = (30.0, 60.0)

    def prior(self) -> CameraPrior:
        return CameraPrior(tuple(self.distance), tuple(math.radians(a) for a in self.azimuth_deg),
                           tuple(math.radians(a) for a in self.altitude_deg))


class ModelConfig(Strict):
    sigma_max: float = Field(0.04, gt=0)
    window: Union[int, Literal["auto"], None] = "auto"
    prefactor: Literal["printed", "prior"] = "printed"
    table: TableConfig = TableConfig()
    camera_prior: CameraPriorConfig = CameraPriorConfig()

    @field_validator("window")
    @classmethod
    def _window(cls, v):
        if isinstance(v, int) and v < 0:
            raise ValueError("window must be >= 0")
        return v

    def build(self, library, k: CameraIntrinsics) -> SceneModel:
        t = self.table
        return SceneModel(tuple(library), k, make_table(t.width, t.depth, t.thickness), self.sigma_max,
                          self.camera_prior.prior(), self.window, self.prefactor)


class NoiseConfig(Strict):
    p_outlier: float = Field(0.05, ge=0, le=1)
    sigma_noise: float = Field(0.005, gt=0)

    def params(self) -> NoiseParams:
        return NoiseParams(self.p_outlier, self.sigma_noise)


class NoiseGridConfig(Strict):
    p_outlier: list[float] = [0.05, 0.3, 0.8]
    sigma_scale: list[float] = [0.25, 0.5, 1.0]

    @model_validator(mode="after")
    def _check(self):
        if not self.p_outlier or not self.sigma_scale:
            raise ValueError("noise grid must be non-empty")
        if any(not 0 <= p <= 1 for p in self.p_outlier) or any(not 0 < s <= 1 for s in self.sigma_scale):
            raise ValueError("noise grid values out of support")
        return self

    def grid(self, sigma_max: float) -> tuple[NoiseParams, ...]:
        return tuple(NoiseParams(p, s * sigma_max) for p in self.p_outlier for s in self.sigma_scale)


class ScheduleConfig(Strict):
    stages: list[tuple[int, int, int]] = [(10, 10, 8), (5, 5, 5), (5, 5, 5)]
    temperatures: list[float] = [1.0, 1.0, 1.0]
    spreads: list[Optional[float]] = [100.0, None, None]
    jitter: bool = True
    objects: Optional[list[int]] = None
    faces: Optional[list[int]] = None
    fixed: dict[Literal["dx", "dy", "dtheta"], float] = {}

    @model_validator(mode="after")
    def _check_temperatures(self):
        if len(self.temperatures) != len(self.stages):
            raise ValueError("temperatures must have one entry per stage")
        if not all(0 < t <= 1 for t in self.temperatures):
            raise ValueError("temperatures must lie in (0, 1]")
        if len(self.spreads) != len(self.stages):
            raise ValueError("spreads must have one entry per stage")
        if any(v is not None and not v >= 1 for v in self.spreads):
            raise ValueError("spreads must be null or >= 1")
        return self

    def build(self) -> Schedule:
        stages = tuple(ScheduleStage(tuple(s), i == 0, t, v)
                       for i, (s, t, v) in enumerate(zip(self.stages, self.temperatures, self.spreads)))
        return Schedule(stages, None if self.objects is None else tuple(self.objects),
                        None if self.faces is None else tuple(self.faces), tuple(self.fixed.items()),
                        self.jitter)


class InferenceConfig(Strict):
    particles: int = Field(1000, ge=1)
    resample_threshold: float = Field(0.5, ge=0, le=1)
    schedule: ScheduleConfig = ScheduleConfig()
    noise_grid: NoiseGridConfig = NoiseGridConfig()


class OccluderConfig(Strict):
    size: tuple[float, float, float] = (0.2, 0.02, 0.15)
    dx: float = 0.15
    dy: float = 0.2
    dtheta: float = 0.0


class PoseJitterConfig(Strict):
    translation_sigma: float = Field(0.005, ge=0)
    rotation_sigma_deg: float = Field(5.0, ge=0)


class GenerateConfig(Strict):
    shapes: Optional[list[str]] = ["mug"]
    library: Optional[str] = None
    resolution: float = Field(0.01, gt=0)
    n_scenes: int = Field(10, ge=0)
    n_objects: int = Field(1, ge=1)
    camera: CameraConfig = CameraConfig()
    model: ModelConfig = ModelConfig()
    noise: Optional[NoiseConfig] = None
    occluder: Optional[OccluderConfig] = None
    pose_jitter: Optional[PoseJitterConfig] = None

    @model_validator(mode="after")
    def _source(self):
        if (self.shapes is None) == (self.library is None):
            raise ValueError("give exactly one of 'shapes' and 'library'")
        return self


class LearnFrame(Strict):
    depth: str
    pose: dict


class LearnConfig(Strict):
    frames: list[LearnFrame] = []
    camera: CameraConfig = CameraConfig()
    crop_lo: tuple[float, float, float] = (-0.2, -0.2, 0.002)
    crop_hi: tuple[float, float, float] = (0.2, 0.2, 0.5)
    resolution: float = Field(0.01, gt=0)
    name: str = "object"
    library: Optional[str] = None


class InferConfig(Strict):
    observation: str = "observation.sdpt"
    camera_pose: dict = {"quat_wxyz": [1.0, 0.0, 0.0, 0.0], "translation": [0.0, 0.0, 1.0]}
    library: str = "library.json"
    camera: CameraConfig = CameraConfig()
    model: ModelConfig = ModelConfig()
    n_objects: int = Field(1, ge=1)
    inference: InferenceConfig = InferenceConfig()


class TrackScheduleConfig(Strict):
    distance: float = Field(0.03, gt=0)
    azimuth_deg: float = Field(10.0, gt=0)
    altitude_deg: float = Field(10.0, gt=0)
    points: int = Field(5, ge=1)
    refinements: int = Field(2, ge=0)
    shrink: float = Field(3.0, gt=1)
    keep: int = Field(1, ge=1)

    def build(self) -> TrackSchedule:
        return TrackSchedule(self.distance, math.radians(self.azimuth_deg), math.radians(self.altitude_deg),
                             self.points, self.refinements, self.shrink, self.keep)


class TrackConfig(Strict):
    frames: list[str] = []
    scene: str = "scene.json"
    library: str = "library.json"
    camera: CameraConfig = CameraConfig(width=50, height=50)
    initial_pose: dict = {"quat_wxyz": [1.0, 0.0, 0.0, 0.0], "translation": [0.0, 0.0, 1.0]}
    ground_truth: Optional[str] = None
    noise: NoiseConfig = NoiseConfig()
    sigma_max: float = Field(0.04, gt=0)
    window: Optional[int] = Field(None, ge=0)
    schedule: TrackScheduleConfig = TrackScheduleConfig()
    timing: bool = True


class OrbitConfig(Strict):
    n_frames: int = Field(120, ge=1)
    distance: float = Field(0.6, gt=0)
    altitude_deg: float = Field(35.0, gt=0, lt=90)
    sweep_deg: float = 360.0


class BenchTrackingConfig(Strict):
    shapes: list[str] = ["bottle", "drill", "clamp"]
    resolutions: list[int] = [25, 50, 100, 200]
    fov_deg: float = Field(40.0, gt=0, lt=180)
    orbit: OrbitConfig = OrbitConfig()
    noise: NoiseConfig = NoiseConfig()
    learn_views: int = Field(5, ge=0)
    learn_resolution: int = Field(128, ge=8)
    schedule: TrackScheduleConfig = TrackScheduleConfig()
    timing: bool = True


class PoseBenchmarkConfig(Strict):
    dataset: str = "dataset"
    inference: InferenceConfig = InferenceConfig()
    grid_step_deg: float = Field(1.0, gt=0)
    window: Union[int, Literal["auto", "dataset"], None] = "dataset"


class TypeBenchmarkConfig(Strict):
    dataset: str = "dataset"
    ood_dataset: Optional[str] = None
    inference: InferenceConfig = InferenceConfig()
    window: Union[int, Literal["auto", "dataset"], None] = "dataset"


class ClampedNoise(Strict):
    p_outlier: float = Field(ge=0, le=1)
    sigma_noise: float = Field(gt=0)


class AblateConfig(Strict):
    dataset: str = "dataset"
    inference: InferenceConfig = InferenceConfig()
    clamped: list[ClampedNoise] = [ClampedNoise(p_outlier=0.01, sigma_noise=0.002),
                                   ClampedNoise(p_outlier=0.05, sigma_noise=0.005)]
    window: Union[int, Literal["auto", "dataset"], None] = "dataset"


COMMANDS = {
    "learn": LearnConfig,
    "generate": GenerateConfig,
    "infer": InferConfig,
    "track": TrackConfig,
    "bench-tracking": BenchTrackingConfig,
    "pose-benchmark": PoseBenchmarkConfig,
    "type-benchmark": TypeBenchmarkConfig,
    "ablate": AblateConfig,
}


def _format_errors(e: ValidationError) -> str:
    parts = []
    for err in e.errors():
        loc = ".".join(str(x) for x in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def parse_config(command: str, data: dict):
    try:
        return COMMANDS[command].model_validate(data)
    except ValidationError as e:
        raise ConfigError(_format_errors(e)) from None


def load_config(command: str, path) -> BaseModel:
    """Read and validate a JSON config; missing file or bad JSON are config errors."""
    if path is None:
        return parse_config(command, {})
    p = Path(path)
    try:
        data = json.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return parse_config(command, data)


def defaults(command: str) -> dict:
    return COMMANDS[command]().model_dump(mode="json")
