"""Coarse-to-fine proposals and sequential Monte Carlo over the number of objects.

Stage k of the sampler targets the posterior in which exactly k objects
explain the observation. Each stage proposes one more object with a
coarse-to-fine search: the contact-parameter support is cut into a grid of
cells (jointly with object type, contact face and a discrete noise grid),
each cell is scored by the unnormalized target at its center, one cell is
drawn in proportion to its score, and the search recurses into that cell.
The final point is uniform inside the last cell, so the proposal density is
the product of the categorical choices divided by the final cell volume.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy.optimize import brentq
from scipy.special import i0e, i1e, logsumexp

from .generative import SceneModel
from .geometry import DepthImage, Pose, inverse
from .likelihood import CloudScorer, NoiseParams, WindowScorer
from .render import render_mesh_transforms, scene_mesh
from .scene import (
    FACE_ROTATIONS,
    FACES,
    TWO_PI,
    ContactParams,
    SceneGraph,
    child_prior_logpdf,
    support_extents,
)

__all__ = [
    "ScheduleStage",
    "Schedule",
    "Particle",
    "default_schedule",
    "default_noise_grid",
    "Proposal",
    "ProposalSample",
    "score_cells",
    "coarse_to_fine_propose",
    "smc_init",
    "smc_extend",
    "effective_sample_size",
    "tempered_log_probs",
    "resample_systematic",
    "run_smc",
    "SMCResult",
    "VonMisesFit",
    "fit_von_mises",
    "von_mises_logpdf",
    "posterior_object_marginal",
    "DegenerateWeights",
]

DIMS = ("dx", "dy", "dtheta")


class DegenerateWeights(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleStage:
    """Subdivisions per (dx, dy, dtheta) applied to the current cell.

    Object type and contact face are enumerated only at the first stage.
    Cells are drawn with probability proportional to target**temperature;
    a temperature below 1 flattens the choice among coarse cells whose
    center scores are dominated by discretization error. With ``spread``
    set, the temperature is lowered from ``temperature`` until the choice
    has a perplexity of at least ``spread`` cells, which adapts the
    flattening to the scale of the target.
    """

    splits: tuple[int, int, int] = (1, 1, 1)
    enumerate_discrete: bool = False
    temperature: float = 1.0
    spread: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "splits", tuple(int(s) for s in self.splits))
        if len(self.splits) != 3 or min(self.splits) < 1:
            raise ValueError("need three subdivision counts >= 1")
        if not 0 < self.temperature <= 1:
            raise ValueError("temperature must lie in (0, 1]")
        if self.spread is not None and not self.spread >= 1:
            raise ValueError("spread must be >= 1")


@dataclass(frozen=True)
class Schedule:
    """A coarse-to-fine schedule plus the variables it searches.

    ``objects``/``faces`` restrict and ``fixed`` pins contact dimensions; all
    three condition the target on the restricted values. With ``jitter``
    off the proposal returns cell centers, which makes the latent space the
    finite set of final-stage cell centers.
    """

    stages: tuple[ScheduleStage, ...]
    objects: tuple[int, ...] | None = None
    faces: tuple[int, ...] | None = None
    fixed: tuple[tuple[str, float], ...] = ()
    jitter: bool = True

    def __post_init__(self):
        stages = tuple(self.stages)
        if not stages:
            raise ValueError("schedule needs at least one stage")
        if not stages[0].enumerate_discrete:
            stages = (replace(stages[0], enumerate_discrete=True),) + stages[1:]
        if any(s.enumerate_discrete for s in stages[1:]):
            raise ValueError("discrete variables are enumerated at the first stage only")
        object.__setattr__(self, "stages", stages)
        fixed = tuple(sorted(dict(self.fixed).items()))
        for name, _ in fixed:
            if name not in DIMS:
                raise ValueError(f"unknown contact dimension {name!r}")
        object.__setattr__(self, "fixed", fixed)
        if self.faces is not None:
            object.__setattr__(self, "faces", tuple(int(f) for f in self.faces))
        if self.objects is not None:
            object.__setattr__(self, "objects", tuple(int(o) for o in self.objects))


def default_schedule() -> Schedule:
    # the coarse stage is flattened to ~100 effective cells so a center-scored cell that
    # narrowly misses the mode is not starved; later stages use the raw target
    return Schedule((ScheduleStage((10, 10, 8), True, 1.0, 100.0), ScheduleStage((5, 5, 5)), ScheduleStage((5, 5, 5))))


def default_noise_grid(sigma_max: float) -> tuple[NoiseParams, ...]:
    return tuple(NoiseParams(p, f * sigma_max) for p in (0.05, 0.3, 0.8) for f in (0.25, 0.5, 1.0))


@dataclass(frozen=True, eq=False)
class Particle:
    scene: SceneGraph
    noise: NoiseParams | None
    log_weight: float
    log_target: float = 0.0
    n_known: int = 0

    @property
    def inferred(self):
        return self.scene.children[self.n_known:]


# -- target evaluation ----------------------------------------------------------------

def _rz_stack(theta: np.ndarray) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    r = np.zeros((len(theta), 3, 3))
    r[:, 0, 0] = c
    r[:, 0, 1] = -s
    r[:, 1, 0] = s
    r[:, 1, 1] = c
    r[:, 2, 2] = 1.0
    return r


def contact_matrices(table, obj, face: int, contacts: np.ndarray) -> np.ndarray:
    """Vectorized contact_to_pose for (n, 3) contact parameters; returns (n, 4, 4)."""
    contacts = np.atleast_2d(np.asarray(contacts, dtype=np.float64))
    w, h, t = obj.footprint(face)
    rf = FACE_ROTATIONS[face].rotation
    rot = _rz_stack(contacts[:, 2]) @ rf
    centers = np.stack([
        table.lo[0] + contacts[:, 0] + w / 2,
        table.lo[1] + contacts[:, 1] + h / 2,
        np.full(len(contacts), table.hi[2] + t / 2),
    ], axis=1)
    m = np.zeros((len(contacts), 4, 4))
    m[:, :3, :3] = rot
    m[:, :3, 3] = centers - rot @ obj.center
    m[:, 3, 3] = 1.0
    return m


class TargetEvaluator:
    """Unnormalized log target of "partial scene + one new object" for every noise setting.

    The camera is known, so its prior is a constant and is left out. Prior
    terms of the ``n_known`` leading children (fixed, not inferred) are
    left out as well.
    """

    def __init__(self, obs: DepthImage, camera: Pose, model: SceneModel, partial: SceneGraph,
                 noise_grid, n_known: int = 0, scorer=None):
        self.model = model
        self.partial = partial
        self.noise_grid = tuple(noise_grid)
        self.view = inverse(camera).matrix()
        k = model.intrinsics
        if scorer is None:
            scorer = make_scorer(obs, model, self.noise_grid)
        self.scorer = scorer
        verts, tris = scene_mesh(partial)
        self.base = render_mesh_transforms((verts, tris), self.view[None], k, threads=1)[0]
        self.scorer.prepare_base(self.base)
        self.partial_prior = sum(
            child_prior_logpdf(partial.table, c.obj, c.face, c.contact, len(model.library))
            for c in partial.children[n_known:]
        )

    def evaluate(self, obj, face: int, contacts: np.ndarray) -> np.ndarray:
        """(n, G) log targets for contacts (n, 3) of one new object."""
        contacts = np.atleast_2d(contacts)
        m = self.model
        prior = np.array([
            child_prior_logpdf(m.table, obj, face, ContactParams(*c), len(m.library)) for c in contacts
        ])
        out = np.full((len(contacts), len(self.noise_grid)), -np.inf)
        ok = np.isfinite(prior)
        if not ok.any():
            return out
        tf = self.view[None] @ contact_matrices(m.table, obj, face, contacts[ok])
        depths = render_mesh_transforms(obj.mesh, tf, m.intrinsics, base=self.base)
        ll = np.stack([self.scorer.log_likelihoods_incremental(d, self.noise_grid) for d in depths])
        out[ok] = self.partial_prior + prior[ok, None] + ll
        return out

    def evaluate_partial(self, noise: NoiseParams) -> float:
        """Log target of the partial scene alone under ``noise``."""
        ll = self.scorer.log_likelihoods_incremental(self.base, [noise])[0]
        return self.partial_prior + ll


def make_scorer(obs: DepthImage, model: SceneModel, noise_grid):
    sigmas = [nz.sigma_noise for nz in noise_grid]
    if model.window is None:
        return CloudScorer(obs, model.intrinsics, sigmas, model.volume, model.sigma_max, model.prefactor)
    return WindowScorer(obs, model.intrinsics, sigmas, model.volume, model.sigma_max, int(model.window),
                        model.prefactor)


# -- coarse-to-fine proposal --------------------------------------------------------------

def _subdivide(lo: np.ndarray, hi: np.ndarray, splits, free: np.ndarray):
    """Child boxes of one box in row-major order over (dx, dy, dtheta)."""
    edges = []
    for d in range(3):
        n = splits[d] if free[d] else 1
        edges.append(np.linspace(lo[d], hi[d], n + 1))
    grids = np.meshgrid(*[np.arange(len(e) - 1) for e in edges], indexing="ij")
    idx = np.stack([g.ravel() for g in grids], axis=1)
    clo = np.stack([edges[d][idx[:, d]] for d in range(3)], axis=1)
    chi = np.stack([edges[d][idx[:, d] + 1] for d in range(3)], axis=1)
    # pinned dimensions keep their exact value
    clo[:, ~free] = lo[~free]
    chi[:, ~free] = hi[~free]
    return clo, chi


def _normalized_log_probs(log_scores: np.ndarray) -> np.ndarray:
    if not np.any(np.isfinite(log_scores)):
        return np.full(log_scores.shape, -math.log(log_scores.size))
    return log_scores - logsumexp(log_scores)


def _perplexity(log_p: np.ndarray) -> float:
    p = np.exp(log_p)
    return float(np.exp(-np.sum(p[p > 0] * log_p[p > 0])))


def tempered_log_probs(log_scores: np.ndarray, temperature: float = 1.0, spread: float | None = None,
                       iters: int = 60) -> np.ndarray:
    """Normalized log(score**T) with T <= ``temperature``.

    With ``spread`` given, T is the largest value whose distribution has a
    perplexity of at least ``min(spread, n_finite)``, found by bisection on
    log T. Perplexity falls as T rises, so the search is well posed.
    """
    lp = _normalized_log_probs(log_scores * temperature)
    if spread is None or not np.any(np.isfinite(log_scores)):
        return lp
    want = min(float(spread), float(np.count_nonzero(np.isfinite(log_scores))))
    if _perplexity(lp) >= want * (1 - 1e-9):
        return lp
    lo, hi = math.log(1e-12), math.log(temperature)  # perplexity(lo) >= want > perplexity(hi)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if _perplexity(_normalized_log_probs(log_scores * math.exp(mid))) >= want:
            lo = mid
        else:
            hi = mid
    return _normalized_log_probs(log_scores * math.exp(lo))


def _sample_categorical(rng: np.random.Generator, log_p: np.ndarray) -> int:
    """Inverse-CDF draw from normalized log-probabilities."""
    cdf = np.cumsum(np.exp(log_p))
    i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(i, len(cdf) - 1)


class ProposalSample(NamedTuple):
    obj: object
    face: int
    contact: ContactParams
    noise: NoiseParams
    noise_index: int
    log_q: float
    leaf_lo: np.ndarray
    leaf_hi: np.ndarray
    log_target: float | None  # known when the returned point is a scored cell center


class Proposal:
    """Coarse-to-fine proposal for one new object given a fixed partial scene.

    Cell scores are memoized, so particles sharing a partial scene share all
    rendering work.
    """

    def __init__(self, evaluator: TargetEvaluator, schedule: Schedule, library):
        self.ev = evaluator
        self.schedule = schedule
        table = evaluator.model.table
        fixed = dict(schedule.fixed)
        self.free = np.array([d not in fixed for d in DIMS])
        self.branches = []
        for obj in library:
            if schedule.objects is not None and obj.id not in schedule.objects:
                continue
            for face in (schedule.faces or FACES):
                sx, sy = support_extents(table, obj, face)
                if sx <= 0 or sy <= 0:
                    continue
                lo = np.array([0.0, 0.0, 0.0])
                hi = np.array([sx, sy, TWO_PI])
                for d, name in enumerate(DIMS):
                    if name in fixed:
                        lo[d] = hi[d] = fixed[name]
                self.branches.append((obj, face, lo, hi))
        if not self.branches:
            raise ValueError("proposal support is empty")
        self._cache = {}
        self._logp_cache = {}

    def _score(self, b: int, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        obj, face = self.branches[b][:2]
        return self.ev.evaluate(obj, face, (lo + hi) / 2)

    def children(self, path: tuple) -> tuple:
        """(branch ids, lo, hi, log targets (n, G)) of the cells below ``path``.

        ``()`` is the root; its children are all first-stage cells over
        every branch. Deeper paths alternate no further branching.
        """
        hit = self._cache.get(path)
        if hit is not None:
            return hit
        stages = self.schedule.stages
        if not path:
            bs, los, his, lts = [], [], [], []
            for b, (_, _, lo, hi) in enumerate(self.branches):
                clo, chi = _subdivide(lo, hi, stages[0].splits, self.free)
                bs.append(np.full(len(clo), b))
                los.append(clo)
                his.append(chi)
                lts.append(self._score(b, clo, chi))
            res = (np.concatenate(bs), np.concatenate(los), np.concatenate(his), np.concatenate(lts))
        else:
            parent = self.cell(path)
            b, lo, hi = parent
            clo, chi = _subdivide(lo, hi, stages[len(path)].splits, self.free)
            res = (np.full(len(clo), b), clo, chi, self._score(b, clo, chi))
        self._cache[path] = res
        return res

    def cell(self, path: tuple):
        """(branch, lo, hi) of the cell at ``path`` (non-empty)."""
        bs, lo, hi, _ = self.children(path[:-1])
        i = path[-1]
        return int(bs[i]), lo[i], hi[i]

    def stage_log_probs(self, path: tuple, g: int | None) -> np.ndarray:
        """Selection log-probabilities of the children of ``path``.

        At the root the choice is joint over cells and noise settings and
        the result has shape (n, G); below it the noise index ``g`` is fixed.
        """
        key = (path, g)
        hit = self._logp_cache.get(key)
        if hit is None:
            lt = self.children(path)[3]
            st = self.schedule.stages[len(path)]
            if not path:
                hit = tempered_log_probs(lt.ravel(), st.temperature, st.spread).reshape(lt.shape)
            else:
                hit = tempered_log_probs(lt[:, g], st.temperature, st.spread)
            self._logp_cache[key] = hit
        return hit

    def volume(self, lo, hi) -> float:
        return float(np.prod((hi - lo)[self.free]))

    def sample(self, rng: np.random.Generator) -> ProposalSample:
        lp0 = self.stage_log_probs((), None)
        flat = _sample_categorical(rng, lp0.ravel())
        i, g = divmod(flat, lp0.shape[1])
        log_q = float(lp0[i, g])
        path = (i,)
        for _ in self.schedule.stages[1:]:
            lp = self.stage_log_probs(path, g)
            j = _sample_categorical(rng, lp)
            log_q += float(lp[j])
            path = path + (j,)
        b, lo, hi = self.cell(path)
        obj, face = self.branches[b][:2]
        if self.schedule.jitter:
            x = np.where(self.free, lo + rng.random(3) * (hi - lo), lo)
            log_q -= math.log(self.volume(lo, hi))
            log_t = None
        else:
            x = (lo + hi) / 2
            log_t = float(self.children(path[:-1])[3][path[-1], g])
        x[2] = min(x[2], math.nextafter(TWO_PI, 0.0))
        return ProposalSample(obj, face, ContactParams(*map(float, x)), self.ev.noise_grid[g], g,
                              log_q, lo, hi, log_t)

    def log_density(self, path: tuple, g: int) -> float:
        """log q of any point inside the leaf cell at ``path`` with noise index ``g``."""
        lq = float(self.stage_log_probs((), None)[path[0], g])
        for t in range(1, len(path)):
            lq += float(self.stage_log_probs(path[:t], g)[path[t]])
        if self.schedule.jitter:
            _, lo, hi = self.cell(path)
            lq -= math.log(self.volume(lo, hi))
        return lq

    def leaves(self):
        """Yield (path, branch, lo, hi) for every final-stage cell (exhaustive; small schedules only)."""
        depth = len(self.schedule.stages)

        def walk(path):
            bs, lo, hi, _ = self.children(path)
            for i in range(len(bs)):
                p = path + (i,)
                if len(p) == depth:
                    yield p, int(bs[i]), lo[i], hi[i]
                else:
                    yield from walk(p)

        yield from walk(())


def score_cells(cells, obs: DepthImage, partial: SceneGraph, camera: Pose, noise: NoiseParams,
                model: SceneModel) -> np.ndarray:
    """Normalized positive scores of cells, each scored at its center.

    ``cells`` are (obj, face, lo, hi) tuples. Cells with zero target get
    score 0; if every cell does, scores are uniform.
    """
    cells = list(cells)
    if not cells:
        raise ValueError("no cells to score")
    ev = TargetEvaluator(obs, camera, model, partial, [noise])
    lt = np.array([ev.evaluate(obj, face, (np.asarray(lo) + np.asarray(hi)) / 2)[0, 0]
                   for obj, face, lo, hi in cells])
    return np.exp(_normalized_log_probs(lt))


def coarse_to_fine_propose(obs: DepthImage, partial: SceneGraph, camera: Pose, model: SceneModel,
                           schedule: Schedule, noise_grid, rng: np.random.Generator,
                           n_known: int = 0) -> ProposalSample:
    ev = TargetEvaluator(obs, camera, model, partial, noise_grid, n_known)
    return Proposal(ev, schedule, model.library).sample(rng)


# -- SMC --------------------------------------------------------------------------------

class _ProposalPool:
    """One memoized Proposal per distinct partial scene within an SMC step."""

    def __init__(self, obs, camera, model, schedule, noise_grid, n_known):
        self.args = (obs, camera, model)
        self.schedule = schedule
        self.noise_grid = tuple(noise_grid)
        self.n_known = n_known
        self.scorer = make_scorer(obs, model, self.noise_grid)
        self._pool = {}

    def get(self, partial: SceneGraph) -> Proposal:
        key = partial.key()
        prop = self._pool.get(key)
        if prop is None:
            obs, camera, model = self.args
            # a scorer holds one base render at a time; give each partial scene its own copy
            scorer = self.scorer if not self._pool else make_scorer(obs, model, self.noise_grid)
            ev = TargetEvaluator(obs, camera, model, partial, self.noise_grid, self.n_known, scorer)
            prop = self._pool[key] = Proposal(ev, self.schedule, model.library)
        return prop


def _spawn(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    return rng.spawn(n)


def _propose_particles(partials, pool: _ProposalPool, rngs):
    """Proposals for each partial scene; returns (samples, log targets at the proposed points)."""
    samples = [pool.get(p).sample(r) for p, r in zip(partials, rngs)]
    log_t = np.empty(len(samples))
    groups = {}
    for i, (p, s) in enumerate(zip(partials, samples)):
        if s.log_target is not None:
            log_t[i] = s.log_target
        else:
            groups.setdefault((p.key(), s.obj.id, s.face), []).append(i)
    for (key, _, _), idx in groups.items():
        prop = pool.get(partials[idx[0]])
        s0 = samples[idx[0]]
        contacts = np.array([samples[i].contact.as_tuple() for i in idx])
        lt = prop.ev.evaluate(s0.obj, s0.face, contacts)
        for row, i in enumerate(idx):
            log_t[i] = lt[row, samples[i].noise_index]
    return samples, log_t


def smc_init(obs: DepthImage, camera: Pose, model: SceneModel, schedule: Schedule, noise_grid,
             P: int, rng: np.random.Generator, known: SceneGraph | None = None) -> list[Particle]:
    """P one-object particles weighted by target / proposal density."""
    if P < 1:
        raise ValueError("need at least one particle")
    partial = known if known is not None else SceneGraph(model.table)
    n_known = len(partial.children)
    pool = _ProposalPool(obs, camera, model, schedule, noise_grid, n_known)
    samples, log_t = _propose_particles([partial] * P, pool, _spawn(rng, P))
    return [
        Particle(partial.add_child(s.obj, s.face, s.contact), s.noise, float(lt - s.log_q), float(lt), n_known)
        for s, lt in zip(samples, log_t)
    ]


def smc_extend(particles, obs: DepthImage, camera: Pose, model: SceneModel, schedule: Schedule,
               noise_grid, rng: np.random.Generator) -> list[Particle]:
    """Add one object to every particle; noise parameters are re-proposed, not kept."""
    particles = list(particles)
    arity = {len(p.scene.children) for p in particles}
    if len(arity) != 1:
        raise ValueError("particles must all carry the same number of objects")
    n_known = particles[0].n_known
    pool = _ProposalPool(obs, camera, model, schedule, noise_grid, n_known)
    partials = [p.scene for p in particles]
    samples, log_t = _propose_particles(partials, pool, _spawn(rng, len(particles)))
    out = []
    for p, s, lt in zip(particles, samples, log_t):
        lw = p.log_weight + lt - p.log_target - s.log_q
        out.append(Particle(p.scene.add_child(s.obj, s.face, s.contact), s.noise, float(lw), float(lt), n_known))
    return out


def _log_weights(particles) -> np.ndarray:
    return np.array([p.log_weight for p in particles])


def normalized_weights(particles) -> np.ndarray:
    lw = _log_weights(particles)
    if not np.any(np.isfinite(lw)):
        raise DegenerateWeights("all particle weights are zero")
    return np.exp(lw - logsumexp(lw))


def effective_sample_size(particles) -> float:
    w = normalized_weights(particles)
    return float(1.0 / np.sum(w ** 2))


def resample_systematic(particles, rng: np.random.Generator) -> list[Particle]:
    """Systematic resampling; offspring share the total weight equally."""
    particles = list(particles)
    lw = _log_weights(particles)
    w = normalized_weights(particles)
    n = len(particles)
    log_total = float(logsumexp(lw))
    positions = (rng.random() + np.arange(n)) / n
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    idx = np.searchsorted(cdf, positions, side="right")
    new_lw = log_total - math.log(n)
    return [replace(particles[i], log_weight=new_lw) for i in idx]


@dataclass
class SMCResult:
    particles: list
    log_evidence: float
    ess_history: list = field(default_factory=list)
    resampled: list = field(default_factory=list)
    noise_history: list = field(default_factory=list)

    def weights(self) -> np.ndarray:
        return normalized_weights(self.particles)

    def map_particle(self) -> Particle:
        return max(self.particles, key=lambda p: p.log_target)


def _log_mean_weight(particles) -> float:
    lw = _log_weights(particles)
    return float(logsumexp(lw) - math.log(len(lw)))


def _mean_noise(particles):
    w = normalized_weights(particles)
    p = sum(wi * pt.noise.p_outlier for wi, pt in zip(w, particles))
    s = sum(wi * pt.noise.sigma_noise for wi, pt in zip(w, particles))
    return float(p), float(s)


def run_smc(obs: DepthImage, camera: Pose, n: int, model: SceneModel, schedule: Schedule | None = None,
            noise_grid=None, P: int = 1000, resample_threshold: float = 0.5,
            rng: np.random.Generator | None = None, known: SceneGraph | None = None,
            final_resample: bool = False) -> SMCResult:
    """Infer ``n`` objects one at a time.

    The evidence estimate is the mean unnormalized weight of the final
    particles; resampling preserves the weight total, so the estimate is
    unbiased.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    schedule = schedule or default_schedule()
    noise_grid = tuple(noise_grid or default_noise_grid(model.sigma_max))
    rng = rng if rng is not None else np.random.default_rng()
    particles = smc_init(obs, camera, model, schedule, noise_grid, P, rng, known)
    res = SMCResult(particles, 0.0)
    for stage in range(1, n + 1):
        ess = effective_sample_size(particles)
        res.ess_history.append(ess)
        res.noise_history.append(_mean_noise(particles))
        last = stage == n
        do_resample = (not last and ess < resample_threshold * P) or (last and final_resample)
        res.resampled.append(do_resample)
        if do_resample:
            particles = resample_systematic(particles, rng)
        if not last:
            particles = smc_extend(particles, obs, camera, model, schedule, noise_grid, rng)
    res.particles = particles
    res.log_evidence = _log_mean_weight(particles)
    return res


# -- posterior summaries ----------------------------------------------------------------

class VonMisesFit(NamedTuple):
    mu: float
    kappa: float
    saturated: bool  # True when the concentration hit the root-finding bracket


KAPPA_MAX = 1e6


def _mean_resultant_ratio(kappa: float) -> float:
    return float(i1e(kappa) / i0e(kappa))


def fit_von_mises(angles, weights=None) -> VonMisesFit:
    """Weighted maximum-likelihood von Mises location and concentration."""
    angles = np.asarray(angles, dtype=np.float64)
    w = np.ones_like(angles) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.sum() <= 0:
        raise ValueError("weights must have a positive sum")
    w = w / w.sum()
    c, s = float(np.sum(w * np.cos(angles))), float(np.sum(w * np.sin(angles)))
    r = math.hypot(c, s)
    mu = math.atan2(s, c) % TWO_PI
    if r >= 1.0:
        raise ValueError("all angles coincide; concentration is unbounded")
    if r == 0.0:
        return VonMisesFit(mu, 0.0, False)
    if _mean_resultant_ratio(KAPPA_MAX) < r:
        return VonMisesFit(mu, KAPPA_MAX, True)
    kappa = brentq(lambda k: _mean_resultant_ratio(k) - r, 0.0, KAPPA_MAX, xtol=1e-8, rtol=1e-12)
    return VonMisesFit(mu, float(kappa), False)


def von_mises_logpdf(x, mu: float, kappa: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return kappa * (np.cos(x - mu) - 1.0) - np.log(TWO_PI * i0e(kappa))


def posterior_object_marginal(particles, library_ids=None, child: int = 0) -> dict:
    """Weight-normalized probability of each object id for one inferred child."""
    particles = list(particles)
    if not particles:
        raise ValueError("no particles")
    w = normalized_weights(particles)
    out = {int(i): 0.0 for i in (library_ids or [])}
    for wi, p in zip(w, particles):
        oid = p.inferred[child].obj.id
        out[oid] = out.get(oid, 0.0) + float(wi)
    return out
