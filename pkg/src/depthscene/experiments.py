"""Experiment harnesses behind the command-line interface.

Each ``cmd_*`` function takes a validated config, an output directory and a
seed, writes its results atomically and returns the written paths. All
randomness is derived from the one seed: work item i draws from
``default_rng(SeedSequence(seed).spawn(n)[i])``.
"""

from __future__ import annotations

import csv
import io as _io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import io
from .config import (
    AblateConfig,
    BenchTrackingConfig,
    CameraConfig,
    GenerateConfig,
    InferConfig,
    InferenceConfig,
    LearnConfig,
    ModelConfig,
    PoseBenchmarkConfig,
    TrackConfig,
    TypeBenchmarkConfig,
)
from .generative import SceneModel, camera_from_params, sample_camera_prior
from .geometry import CameraIntrinsics, DepthImage, Pose, inverse
from .inference import (
    SMCResult,
    TargetEvaluator,
    fit_von_mises,
    posterior_object_marginal,
    run_smc,
    von_mises_logpdf,
)
from .learning import learn_object, learned_cloud
from .likelihood import NoiseParams, sample_observation
from .render import render_depth, render_mesh_transforms
from .scene import (
    ContactParams,
    ObjectModel,
    SceneGraph,
    load_library,
    sample_child,
    save_library,
    scene_from_json,
    scene_to_json,
)
from .shapes import SHAPES, box, make_library
from .tracking import centered_scene, generate_orbit_sequence, pose_error, track_camera

__all__ = [
    "Dataset",
    "load_dataset",
    "item_rngs",
    "write_csv",
    "render_posed",
    "grid_posterior_dtheta",
    "von_mises_cross_entropy",
    "infer_scene",
    "learn_in_place",
    "cmd_generate",
    "cmd_learn",
    "cmd_infer",
    "cmd_track",
    "cmd_bench_tracking",
    "cmd_pose_benchmark",
    "cmd_type_benchmark",
    "cmd_ablate",
]

OCCLUDER_ID = -2


def item_rngs(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows) -> None:
    """Header plus rows, written atomically; floats keep full precision."""
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    io.atomic_write_text(path, buf.getvalue())


def _write_json(path, obj) -> None:
    io.atomic_write_text(path, io.dumps(obj))


def _noise_json(nz: NoiseParams) -> dict:
    return {"p_outlier": nz.p_outlier, "sigma_noise": nz.sigma_noise}


# -- rendering helpers -------------------------------------------------------------------

def render_posed(parts, camera: Pose, k: CameraIntrinsics) -> DepthImage:
    """Depth of (ObjectModel, world Pose) parts; used when poses leave the contact manifold."""
    view = inverse(camera).matrix()
    depth = np.full((k.height, k.width), k.far)
    for obj, pose in parts:
        depth = render_mesh_transforms(obj.mesh, (view @ pose.matrix())[None], k, base=depth, threads=1)[0]
    return DepthImage(depth, k.far)


def _random_rotation(rng: np.random.Generator, sigma: float) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.normal() * sigma
    half = angle / 2
    return Pose(np.concatenate([[math.cos(half)], math.sin(half) * axis]))


# -- datasets ----------------------------------------------------------------------------

@dataclass
class DatasetItem:
    scene: SceneGraph
    camera: Pose
    noise: NoiseParams
    observed: DepthImage
    n_known: int

    @property
    def known(self) -> SceneGraph:
        return SceneGraph(self.scene.table, self.scene.children[:self.n_known])

    @property
    def n_inferred(self) -> int:
        return len(self.scene.children) - self.n_known


@dataclass
class Dataset:
    library: list
    occluder: ObjectModel | None
    intrinsics: CameraIntrinsics
    model_config: ModelConfig
    items: list

    def model(self, window="dataset") -> SceneModel:
        m = self.model_config.build(self.library, self.intrinsics)
        if window != "dataset":
            m = SceneModel(m.library, m.intrinsics, m.table, m.sigma_max, m.camera_prior, window, m.prefactor)
        return m


def _occluder_model(cfg, resolution: float) -> ObjectModel:
    n = [max(1, int(round(s / resolution))) for s in cfg.size]
    return ObjectModel.from_grid(OCCLUDER_ID, box(*n, resolution=resolution), "occluder")


def _save_model(path: Path, obj: ObjectModel) -> None:
    io.write_voxels(path, obj.grid)


def cmd_generate(cfg: GenerateConfig, out: Path, seed: int) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    if cfg.library is not None:
        library = load_library(cfg.library)
    else:
        unknown = [s for s in cfg.shapes if s not in SHAPES]
        if unknown:
            raise ValueError(f"unknown shapes {unknown}; available: {sorted(SHAPES)}")
        library = make_library(cfg.shapes, cfg.resolution)
    k = cfg.camera.intrinsics()
    model = cfg.model.build(library, k)
    lib_dir = out / "library"
    lib_dir.mkdir(exist_ok=True)
    save_library(lib_dir / "library.json", library)
    written = [lib_dir / "library.json"]
    occluder = None
    if cfg.occluder is not None:
        occluder = _occluder_model(cfg.occluder, cfg.resolution)
        _save_model(lib_dir / "occluder.svox", occluder)
        written.append(lib_dir / "occluder.svox")
    entries = []
    for i, rng in enumerate(item_rngs(seed, cfg.n_scenes)):
        scene = SceneGraph(model.table)
        if occluder is not None:
            o = cfg.occluder
            scene = scene.add_child(occluder, 1, ContactParams(o.dx, o.dy, o.dtheta))
        for _ in range(cfg.n_objects):
            c = sample_child(rng, library, model.table)
            scene = scene.add_child(c.obj, c.face, c.contact)
        camera = sample_camera_prior(model.camera_prior, rng)
        if cfg.noise is not None:
            noise = cfg.noise.params()
        else:
            noise = NoiseParams(float(rng.uniform(0, 1)), model.sigma_max * (1.0 - float(rng.random())))
        if cfg.pose_jitter is None:
            y = render_depth(scene, camera, k)
        else:
            j = cfg.pose_jitter
            n_known = 0 if occluder is None else 1
            parts = [(model.table, Pose())]
            for ci, (c, p) in enumerate(zip(scene.children, scene.object_poses())):
                if ci >= n_known:
                    t = p.translation + rng.normal(size=3) * j.translation_sigma
                    p = Pose((_random_rotation(rng, math.radians(j.rotation_sigma_deg)) @ p).quat, t)
                parts.append((c.obj, p))
            y = render_posed(parts, camera, k)
        if y.count() == 0:
            raise FloatingPointError(f"scene {i} renders no pixels")
        obs = sample_observation(y, k, noise, rng)
        obs_name, scene_name = f"obs_{i:04d}.sdpt", f"scene_{i:04d}.json"
        io.write_depth(out / obs_name, obs)
        _write_json(out / scene_name, {
            "scene": scene_to_json(scene),
            "camera": io.pose_to_json(camera),
            "noise": _noise_json(noise),
            "n_known": 0 if occluder is None else 1,
            "observation": obs_name,
        })
        entries.append({"index": i, "scene": scene_name, "spawn_key": [i]})
        written += [out / obs_name, out / scene_name]
    manifest = {
        "seed": seed,
        "config": cfg.model_dump(mode="json"),
        "library": "library/library.json",
        "occluder": None if occluder is None else "library/occluder.svox",
        "scenes": entries,
    }
    _write_json(out / "manifest.json", manifest)
    return written + [out / "manifest.json"]


def load_dataset(path) -> Dataset:
    path = Path(path)
    mpath = path / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"dataset manifest not found: {mpath}") from None
    cfg = GenerateConfig.model_validate(manifest["config"])
    library = load_library(path / manifest["library"])
    occluder = None
    if manifest.get("occluder"):
        occluder = ObjectModel.from_grid(OCCLUDER_ID, io.read_voxels(path / manifest["occluder"]), "occluder")
    k = cfg.camera.intrinsics()
    lookup = library + ([occluder] if occluder is not None else [])
    items = []
    for e in manifest["scenes"]:
        d = json.loads((path / e["scene"]).read_text())
        items.append(DatasetItem(
            scene_from_json(d["scene"], lookup),
            io.pose_from_json(d["camera"]),
            NoiseParams(d["noise"]["p_outlier"], d["noise"]["sigma_noise"]),
            io.read_depth(path / d["observation"], k.far),
            int(d["n_known"]),
        ))
    return Dataset(library, occluder, k, cfg.model, items)


# -- inference helpers --------------------------------------------------------------------

def infer_scene(obs: DepthImage, camera: Pose, n: int, model: SceneModel, icfg: InferenceConfig,
                rng: np.random.Generator, known: SceneGraph | None = None, noise_grid=None) -> SMCResult:
    grid = noise_grid if noise_grid is not None else icfg.noise_grid.grid(model.sigma_max)
    return run_smc(obs, camera, n, model, icfg.schedule.build(), grid, icfg.particles,
                   icfg.resample_threshold, rng, known)


def grid_posterior_dtheta(obs: DepthImage, camera: Pose, model: SceneModel, known: SceneGraph, obj,
                          face: int, dx: float, dy: float, noise: NoiseParams, step_deg: float = 1.0):
    """Exact posterior over the yaw of one object on a regular grid, other latents held fixed.

    Returns:
        (angles, probabilities summing to 1)
    """
    n = int(round(360.0 / step_deg))
    angles = np.arange(n) * (2 * math.pi / n)
    ev = TargetEvaluator(obs, camera, model, known, [noise], n_known=len(known.children))
    contacts = np.column_stack([np.full(n, dx), np.full(n, dy), angles])
    lt = ev.evaluate(obj, face, contacts)[:, 0]
    if not np.any(np.isfinite(lt)):
        return angles, np.full(n, 1.0 / n)
    return angles, np.exp(lt - logsumexp(lt))


def von_mises_cross_entropy(angles, probs, mu: float, kappa: float) -> float:
    """-sum p(angle) log vM(angle; mu, kappa) over a grid posterior."""
    return float(-np.sum(np.asarray(probs) * von_mises_logpdf(angles, mu, kappa)))


def _particle_json(p) -> dict:
    return {
        "scene": scene_to_json(p.scene),
        "noise": _noise_json(p.noise),
        "log_weight": p.log_weight,
        "log_target": p.log_target,
    }


def _summary(res: SMCResult, library_ids) -> dict:
    w = res.weights()
    n_inferred = len(res.particles[0].inferred)
    fits = []
    for ci in range(n_inferred):
        angles = [p.inferred[ci].contact.dtheta for p in res.particles]
        try:
            f = fit_von_mises(angles, w)
            fits.append({"child": ci, "mu": f.mu, "kappa": f.kappa, "saturated": f.saturated})
        except ValueError:
            fits.append({"child": ci, "mu": float(angles[int(np.argmax(w))]), "kappa": None, "saturated": True})
    return {
        "log_evidence": res.log_evidence,
        "ess_history": res.ess_history,
        "type_marginal": {str(k): v for k, v in sorted(posterior_object_marginal(res.particles, library_ids).items())},
        "von_mises": fits,
        "map": _particle_json(res.map_particle()),
    }


# -- commands -----------------------------------------------------------------------------

def cmd_infer(cfg: InferConfig, out: Path, seed: int) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    library = load_library(cfg.library)
    k = cfg.camera.intrinsics()
    obs = io.read_depth(cfg.observation, k.far)
    camera = io.pose_from_json(cfg.camera_pose)
    model = cfg.model.build(library, k)
    res = infer_scene(obs, camera, cfg.n_objects, model, cfg.inference, item_rngs(seed, 1)[0])
    lines = "".join(json.dumps(_particle_json(p), sort_keys=True) + "\n" for p in res.particles)
    io.atomic_write_text(out / "particles.jsonl", lines)
    _write_json(out / "summary.json", _summary(res, [o.id for o in library]))
    return [out / "particles.jsonl", out / "summary.json"]


def cmd_learn(cfg: LearnConfig, out: Path, seed: int) -> list[Path]:
    if not cfg.frames:
        raise ValueError("learn needs at least one frame")
    out.mkdir(parents=True, exist_ok=True)
    k = cfg.camera.intrinsics()
    frames = [io.read_depth(f.depth, k.far) for f in cfg.frames]
    poses = [io.pose_from_json(f.pose) for f in cfg.frames]
    library = load_library(cfg.library) if cfg.library else []
    new_id = max([o.id for o in library], default=-1) + 1
    obj = learn_object(frames, poses, k, cfg.crop_lo, cfg.crop_hi, cfg.resolution, new_id, cfg.name)
    library = library + [obj]
    save_library(out / "library.json", library)
    return [out / "library.json"] + [out / f"object_{o.id:03d}.svox" for o in library]


def _read_poses(path) -> list[Pose]:
    return [io.pose_from_json(d) for d in json.loads(Path(path).read_text())]


def cmd_track(cfg: TrackConfig, out: Path, seed: int) -> list[Path]:
    if not cfg.frames:
        raise ValueError("track needs at least one frame")
    out.mkdir(parents=True, exist_ok=True)
    k = cfg.camera.intrinsics()
    frames = [io.read_depth(f, k.far) for f in cfg.frames]
    library = load_library(cfg.library)
    scene = scene_from_json(json.loads(Path(cfg.scene).read_text()), library)
    gt = _read_poses(cfg.ground_truth) if cfg.ground_truth else None
    if gt is not None and len(gt) != len(frames):
        raise ValueError(f"{len(gt)} ground-truth poses for {len(frames)} frames")
    st = track_camera(frames, scene, k, io.pose_from_json(cfg.initial_pose), cfg.noise.params(),
                      cfg.schedule.build(), cfg.sigma_max, cfg.window)
    rows = []
    for i, (p, d) in enumerate(zip(st.poses, st.durations)):
        e = pose_error(p, gt[i]) if gt is not None else (math.nan, math.nan)
        rows.append((i, e[0], e[1], 1000.0 * d if cfg.timing else math.nan))
    write_csv(out / "track.csv", ["frame_index", "position_error_cm", "orientation_error_deg", "frame_ms"], rows)
    _write_json(out / "poses.json", [io.pose_to_json(p) for p in st.poses])
    return [out / "track.csv", out / "poses.json"]


def learn_in_place(obj: ObjectModel, k: CameraIntrinsics, n_views: int, distance: float,
                   altitude: float = math.radians(40.0), lo=(-0.2, -0.2, 0.002), hi=(0.2, 0.2, 0.5),
                   resolution: float = 0.01, id: int = 0) -> tuple[ObjectModel, SceneGraph, SceneGraph]:
    """Learn ``obj`` from clean orbit renders of it standing at the table center.

    Returns the learned model, a scene holding the learned model where it
    was observed, and the true scene.
    """
    true_scene = centered_scene(obj)
    cams = [camera_from_params(distance, i * 2 * math.pi / n_views, altitude) for i in range(n_views)]
    frames = [render_depth(true_scene, c, k) for c in cams]
    learned = learn_object(frames, cams, k, lo, hi, resolution, id, obj.name)
    # the model frame sits at the observed cloud's bounding-box center
    pts = learned_cloud(frames, cams, k, lo, hi).points
    center = (pts.min(axis=0) + pts.max(axis=0)) / 2
    w, d, _ = learned.bbox
    table = true_scene.table
    learned_scene = SceneGraph(table).add_child(
        learned, 1, ContactParams(float(center[0] - w / 2 - table.lo[0]), float(center[1] - d / 2 - table.lo[1]), 0.0))
    return learned, learned_scene, true_scene


def cmd_bench_tracking(cfg: BenchTrackingConfig, out: Path, seed: int) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    unknown = [s for s in cfg.shapes if s not in SHAPES]
    if unknown:
        raise ValueError(f"unknown shapes {unknown}")
    rngs = item_rngs(seed, len(cfg.shapes) * len(cfg.resolutions))
    o = cfg.orbit
    rows = []
    for si, name in enumerate(cfg.shapes):
        obj = make_library([name])[0]
        if cfg.learn_views > 0:
            kl = CameraIntrinsics.from_fov(cfg.learn_resolution, cfg.learn_resolution, cfg.fov_deg)
            _, track_scene, true_scene = learn_in_place(obj, kl, cfg.learn_views, o.distance)
        else:
            true_scene = track_scene = centered_scene(obj)
        for ri, res in enumerate(cfg.resolutions):
            k = CameraIntrinsics.from_fov(res, res, cfg.fov_deg)
            rng = rngs[si * len(cfg.resolutions) + ri]
            frames, gt = generate_orbit_sequence(obj, k, o.n_frames, cfg.noise.params(), rng, o.distance,
                                                 math.radians(o.altitude_deg), 0.0, math.radians(o.sweep_deg),
                                                 scene=true_scene)
            st = track_camera(frames, track_scene, k, gt[0], cfg.noise.params(), cfg.schedule.build())
            errs = np.array([pose_error(p, g) for p, g in zip(st.poses, gt)])
            rows.append((name, res, o.n_frames, errs[:, 0].mean(), errs[:, 1].mean(), errs[:, 0].max(),
                         errs[:, 1].max(), st.fps() if cfg.timing else math.nan))
    header = ["object", "resolution", "n_frames", "mean_position_error_cm", "mean_orientation_error_deg",
              "max_position_error_cm", "max_orientation_error_deg", "fps"]
    write_csv(out / "bench_tracking.csv", header, rows)
    return [out / "bench_tracking.csv"]


def cmd_pose_benchmark(cfg: PoseBenchmarkConfig, out: Path, seed: int) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(cfg.dataset)
    model = ds.model(cfg.window)
    rows = []
    for i, (item, rng) in enumerate(zip(ds.items, item_rngs(seed, len(ds.items)))):
        if item.n_inferred != 1:
            raise ValueError("pose benchmark needs single-object scenes")
        res = infer_scene(item.observed, item.camera, 1, model, cfg.inference, rng, item.known)
        w = res.weights()
        angles = [p.inferred[0].contact.dtheta for p in res.particles]
        try:
            fit = fit_von_mises(angles, w)
            mu, kappa, sat = fit.mu, fit.kappa, fit.saturated
        except ValueError:
            mu, kappa, sat = float(angles[int(np.argmax(w))]), math.inf, True
        truth = item.scene.children[item.n_known]
        grid, probs = grid_posterior_dtheta(item.observed, item.camera, model, item.known, truth.obj,
                                            truth.face, truth.contact.dx, truth.contact.dy, item.noise,
                                            cfg.grid_step_deg)
        ce = von_mises_cross_entropy(grid, probs, mu, kappa) if math.isfinite(kappa) else math.inf
        rows.append((i, truth.obj.id, truth.face, truth.contact.dtheta, mu, kappa, int(sat), ce,
                     res.map_particle().inferred[0].contact.dtheta, res.ess_history[-1]))
    header = ["index", "object_id", "face", "true_dtheta", "mu", "kappa", "kappa_saturated", "cross_entropy",
              "map_dtheta", "ess"]
    write_csv(out / "pose_benchmark.csv", header, rows)
    return [out / "pose_benchmark.csv"]


def _marginals(ds: Dataset, model: SceneModel, icfg: InferenceConfig, seed: int, noise_grid=None):
    ids = [o.id for o in ds.library]
    out = []
    for item, rng in zip(ds.items, item_rngs(seed, len(ds.items))):
        if item.n_inferred != 1:
            raise ValueError("type benchmarks need one object to identify per scene")
        res = infer_scene(item.observed, item.camera, 1, model, icfg, rng, item.known, noise_grid)
        m = posterior_object_marginal(res.particles, ids)
        out.append((item.scene.children[item.n_known].obj.id, [m[i] for i in ids]))
    return ids, out


def cmd_type_benchmark(cfg: TypeBenchmarkConfig, out: Path, seed: int) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    splits = [("in_distribution", cfg.dataset)]
    if cfg.ood_dataset:
        splits.append(("out_of_distribution", cfg.ood_dataset))
    rows, summary, header = [], {}, None
    for name, path in splits:
        ds = load_dataset(path)
        ids, margs = _marginals(ds, ds.model(cfg.window), cfg.inference, seed)
        header = header or (["split", "index", "true_object_id"] + [f"p_object_{i}" for i in ids]
                            + ["predicted_object_id", "correct"])
        correct = []
        for j, (true_id, probs) in enumerate(margs):
            pred = ids[int(np.argmax(probs))]
            correct.append(pred == true_id)
            rows.append([name, j, true_id] + probs + [pred, int(pred == true_id)])
        summary[name] = {"n": len(margs), "accuracy": float(np.mean(correct)) if correct else None}
    if header is None:
        header = ["split", "index", "true_object_id", "predicted_object_id", "correct"]
    write_csv(out / "type_benchmark.csv", header, rows)
    _write_json(out / "type_summary.json", summary)
    return [out / "type_benchmark.csv", out / "type_summary.json"]


def confusion_matrix(ids, margs) -> tuple[np.ndarray, np.ndarray]:
    """Row i: mean identity posterior over scenes whose true object is ids[i]; plus row counts."""
    idx = {oid: r for r, oid in enumerate(ids)}
    mat = np.zeros((len(ids), len(ids)))
    counts = np.zeros(len(ids), dtype=int)
    for true_id, probs in margs:
        mat[idx[true_id]] += probs
        counts[idx[true_id]] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        mat = mat / counts[:, None]
    return mat, counts


def cmd_ablate(cfg: AblateConfig, out: Path, seed: int) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(cfg.dataset)
    model = ds.model(cfg.window)
    variants = [("hierarchical", None)]
    variants += [(f"clamped_{i}", (NoiseParams(c.p_outlier, c.sigma_noise),)) for i, c in enumerate(cfg.clamped)]
    for _, grid in variants[1:]:
        if not grid[0].in_support(model.sigma_max):
            raise ValueError(f"clamped noise {grid[0]} outside the prior support")
    written, summary = [], {}
    for name, grid in variants:
        ids, margs = _marginals(ds, model, cfg.inference, seed, grid)
        mat, counts = confusion_matrix(ids, margs)
        rows = [[oid] + list(mat[r]) + [int(counts[r])] for r, oid in enumerate(ids)]
        path = out / f"confusion_{name}.csv"
        write_csv(path, ["true_object_id"] + [f"p_object_{i}" for i in ids] + ["n_scenes"], rows)
        written.append(path)
        diag = np.diag(mat)[counts > 0]
        summary[name] = {
            "noise": None if grid is None else _noise_json(grid[0]),
            "diagonal_mean": float(diag.mean()) if len(diag) else None,
            "diagonal_dominant": bool(all(np.argmax(mat[r]) == r for r in range(len(ids)) if counts[r])),
        }
    _write_json(out / "ablation_summary.json", summary)
    return written + [out / "ablation_summary.json"]
