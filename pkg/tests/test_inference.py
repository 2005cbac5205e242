import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize, stats
from scipy.special import logsumexp

from depthscene import render, shapes
from depthscene.generative import CameraPrior, SceneModel, camera_from_params, observation_log_likelihood
from depthscene.geometry import CameraIntrinsics
from depthscene.inference import (
    DegenerateWeights,
    Particle,
    Proposal,
    Schedule,
    SMCResult,
    ScheduleStage,
    TargetEvaluator,
    _subdivide,
    coarse_to_fine_propose,
    contact_matrices,
    default_noise_grid,
    default_schedule,
    effective_sample_size,
    fit_von_mises,
    posterior_object_marginal,
    resample_systematic,
    run_smc,
    score_cells,
    smc_init,
    tempered_log_probs,
    von_mises_logpdf,
)
from depthscene.likelihood import NoiseParams, sample_observation
from depthscene.render import render_depth
from depthscene.scene import TWO_PI, ContactParams, SceneGraph, contact_to_pose, scene_prior_logpdf

K = CameraIntrinsics.from_fov(16, 16, 40.0)
CAMERA = camera_from_params(0.6, 0.3, 0.8)


@pytest.fixture(scope="module")
def problem():
    lib = shapes.make_library(["l_block", "cube"])
    model = SceneModel(lib, K, camera_prior=CameraPrior((0.6, 0.6)))
    scene = SceneGraph(model.table).add_child(lib[0], 1, ContactParams(0.22, 0.2, 1.0))
    obs = sample_observation(render_depth(scene, CAMERA, K), K, NoiseParams(0.05, 0.005),
                             np.random.default_rng(0))
    return model, scene, obs


def small_schedule(jitter=True, **kw):
    return Schedule((ScheduleStage((2, 2, 3)), ScheduleStage((2, 1, 2))), jitter=jitter, **kw)


def particles_with(log_weights, objs=None):
    lib = shapes.make_library(["cube", "mug"])
    table = SceneGraph(SceneModel(lib, K).table)
    objs = objs or [0] * len(log_weights)
    return [Particle(table.add_child(lib[o], 1, ContactParams(0.1, 0.1, 0.0)), None, lw) for lw, o in
            zip(log_weights, objs)]


# ---------------------------------------------------------------- schedules


def test_schedule_validation():
    with pytest.raises(ValueError):
        ScheduleStage((0, 1, 1))
    with pytest.raises(ValueError):
        ScheduleStage((1, 1), True)
    with pytest.raises(ValueError):
        ScheduleStage((1, 1, 1), temperature=0.0)
    with pytest.raises(ValueError):
        Schedule(())
    with pytest.raises(ValueError):
        Schedule((ScheduleStage(), ScheduleStage(enumerate_discrete=True)))
    with pytest.raises(ValueError):
        Schedule((ScheduleStage(),), fixed=(("dz", 0.0),))
    s = Schedule((ScheduleStage((2, 2, 2)),))
    assert s.stages[0].enumerate_discrete


def test_default_schedule_and_grid():
    s = default_schedule()
    assert [st.splits for st in s.stages] == [(10, 10, 8), (5, 5, 5), (5, 5, 5)]
    assert [st.temperature for st in s.stages] == [1.0, 1.0, 1.0]
    assert [st.spread for st in s.stages] == [100.0, None, None]
    g = default_noise_grid(0.04)
    assert len(g) == 9
    assert {n.p_outlier for n in g} == {0.05, 0.3, 0.8}
    assert {round(n.sigma_noise, 12) for n in g} == {0.01, 0.02, 0.04}


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=3, max_size=3), st.lists(st.floats(0.01, 1), min_size=3, max_size=3),
       st.lists(st.integers(1, 5), min_size=3, max_size=3), st.lists(st.booleans(), min_size=3, max_size=3))
def test_subdivision_tiles_parent(lo, size, splits, free):
    lo = np.array(lo)
    hi = lo + np.array(size)
    free = np.array(free)
    hi[~free] = lo[~free]
    clo, chi = _subdivide(lo, hi, splits, free)
    assert len(clo) == np.prod([s if f else 1 for s, f in zip(splits, free)])
    vol = lambda a, b: np.prod((b - a)[..., free], axis=-1)
    assert abs(vol(clo, chi).sum() - vol(lo, hi)) <= 1e-12 * max(1.0, vol(lo, hi))
    assert np.all(clo >= lo - 1e-15) and np.all(chi <= hi + 1e-15)
    np.testing.assert_array_equal(clo[:, ~free], np.broadcast_to(lo[~free], clo[:, ~free].shape))
    # cells are disjoint: distinct lower corners on the free axes
    assert len({tuple(r) for r in clo[:, free]}) == len(clo)


def test_contact_matrices_match_scalar_pose(problem):
    model, _, _ = problem
    obj = model.library[0]
    rng = np.random.default_rng(1)
    for face in (1, 3, 6):
        sx, sy = 0.5 - np.array(obj.footprint(face)[:2])
        c = np.stack([rng.uniform(0, sx, 5), rng.uniform(0, sy, 5), rng.uniform(0, TWO_PI, 5)], 1)
        m = contact_matrices(model.table, obj, face, c)
        for ci, mi in zip(c, m):
            np.testing.assert_allclose(mi, contact_to_pose(model.table, obj, face, ContactParams(*ci)).matrix(),
                                       atol=1e-12)


# ---------------------------------------------------------------- proposal


def test_target_evaluator_matches_joint(problem):
    model, scene, obs = problem
    grid = default_noise_grid(model.sigma_max)
    ev = TargetEvaluator(obs, CAMERA, model, SceneGraph(model.table), grid)
    c = scene.children[0]
    lt = ev.evaluate(c.obj, c.face, np.array([c.contact.as_tuple()]))[0]
    ren = render_depth(scene, CAMERA, K)
    for g, nz in enumerate(grid):
        ref = scene_prior_logpdf(scene, 2) + observation_log_likelihood(obs, ren, nz, model)
        assert lt[g] == pytest.approx(ref, rel=1e-12)
    # out of support contacts score -inf
    assert np.all(ev.evaluate(c.obj, c.face, np.array([[5.0, 0.1, 0.0]])) == -np.inf)


@pytest.mark.parametrize("jitter", [True, False])
def test_proposal_normalizes(problem, jitter):
    model, _, obs = problem
    grid = default_noise_grid(model.sigma_max)[:3]
    ev = TargetEvaluator(obs, CAMERA, model, SceneGraph(model.table), grid)
    prop = Proposal(ev, small_schedule(jitter, faces=(1, 3)), model.library)
    branch_mass = np.zeros(len(prop.branches))
    total = 0.0
    for path, b, lo, hi in prop.leaves():
        for g in range(len(grid)):
            q = math.exp(prop.log_density(path, g))
            mass = q * (prop.volume(lo, hi) if jitter else 1.0)
            total += mass
            branch_mass[b] += mass
    assert total == pytest.approx(1.0, abs=1e-9)
    # per-branch mass equals that branch's first-stage probability
    lp0 = prop.stage_log_probs((), None)
    bs = prop.children(())[0]
    for b in range(len(prop.branches)):
        assert branch_mass[b] == pytest.approx(np.exp(lp0[bs == b]).sum(), abs=1e-12)


def test_proposal_sample_density_consistent(problem):
    model, _, obs = problem
    grid = default_noise_grid(model.sigma_max)[:2]
    ev = TargetEvaluator(obs, CAMERA, model, SceneGraph(model.table), grid)
    prop = Proposal(ev, small_schedule(True, faces=(1,)), model.library)
    rng = np.random.default_rng(2)
    leaves = {tuple(np.round(lo, 12)) + tuple(np.round(hi, 12)): p for p, _, lo, hi in prop.leaves()}
    for _ in range(20):
        s = prop.sample(rng)
        path = leaves[tuple(np.round(s.leaf_lo, 12)) + tuple(np.round(s.leaf_hi, 12))]
        assert s.log_q == pytest.approx(prop.log_density(path, s.noise_index), abs=1e-12)
        x = np.array(s.contact.as_tuple())
        assert np.all(x >= s.leaf_lo) and np.all(x <= s.leaf_hi)


def test_temperature_flattens_first_stage(problem):
    model, _, obs = problem
    grid = default_noise_grid(model.sigma_max)
    ev = TargetEvaluator(obs, CAMERA, model, SceneGraph(model.table), grid)
    hot = Proposal(ev, Schedule((ScheduleStage((3, 3, 4), temperature=0.1),)), model.library)
    cold = Proposal(ev, Schedule((ScheduleStage((3, 3, 4)),)), model.library)
    ent = lambda lp: -float(np.sum(np.exp(lp[np.isfinite(lp)]) * lp[np.isfinite(lp)]))
    assert ent(hot.stage_log_probs((), None)) > ent(cold.stage_log_probs((), None))


def perplexity(lp):
    lp = lp[np.exp(lp) > 0]
    return float(np.exp(-np.sum(np.exp(lp) * lp)))


def test_spread_matches_root_finder():
    rng = np.random.default_rng(11)
    scores = rng.normal(0, 400, size=500)
    for spread in (5.0, 50.0, 300.0):
        lp = tempered_log_probs(scores, 1.0, spread)
        t = optimize.brentq(lambda t: perplexity(scores * t - logsumexp(scores * t)) - spread, 1e-9, 1.0,
                            xtol=1e-14)
        np.testing.assert_allclose(lp, scores * t - logsumexp(scores * t), atol=1e-6)
        assert perplexity(lp) >= spread * (1 - 1e-9)


def test_spread_edge_cases():
    scores = np.array([0.0, -1.0, -np.inf, -2.0])
    # already spread enough at the cap: the cap is used
    np.testing.assert_allclose(tempered_log_probs(scores, 0.5, 1.5), 0.5 * scores - logsumexp(0.5 * scores))
    # more spread than finite cells asks for the uniform limit over the finite ones
    lp = tempered_log_probs(scores, 1.0, 10.0)
    assert lp[2] == -np.inf
    np.testing.assert_allclose(np.exp(lp[[0, 1, 3]]), 1 / 3, atol=1e-9)
    np.testing.assert_allclose(tempered_log_probs(np.full(3, -np.inf), 1.0, 2.0), -math.log(3))
    with pytest.raises(ValueError):
        ScheduleStage((2, 2, 2), spread=0.5)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=2, max_size=60), st.floats(1.0, 80.0), st.floats(1.0, 80.0))
def test_spread_is_monotone(scores, a, b):
    scores = np.array(scores)
    lo, hi = sorted((a, b))
    assert perplexity(tempered_log_probs(scores, 1.0, hi)) >= perplexity(tempered_log_probs(scores, 1.0, lo)) - 1e-6
    assert np.exp(tempered_log_probs(scores, 1.0, hi)).sum() == pytest.approx(1.0)


def test_spread_stage_density_is_normalized(problem):
    model, _, obs = problem
    ev = TargetEvaluator(obs, CAMERA, model, SceneGraph(model.table), [NoiseParams(0.05, 0.01)])
    sched = Schedule((ScheduleStage((2, 2, 3), spread=4.0), ScheduleStage((2, 1, 2), spread=2.0)), faces=(1, 3))
    prop = Proposal(ev, sched, model.library)
    assert perplexity(prop.stage_log_probs((), None).ravel()) >= 4.0 * (1 - 1e-9)
    total = sum(math.exp(prop.log_density(path, 0)) * prop.volume(lo, hi) for path, _, lo, hi in prop.leaves())
    assert total == pytest.approx(1.0, abs=1e-9)


def test_fixed_dims_are_pinned(problem):
    model, _, obs = problem
    sched = Schedule((ScheduleStage((3, 3, 4)),), faces=(1,), objects=(1,), fixed=(("dx", 0.1), ("dtheta", 0.5)))
    s = coarse_to_fine_propose(obs, SceneGraph(model.table), CAMERA, model, sched,
                               default_noise_grid(0.04), np.random.default_rng(3))
    assert s.obj.id == 1 and s.face == 1
    assert s.contact.dx == 0.1 and s.contact.dtheta == 0.5
    assert s.leaf_hi[1] - s.leaf_lo[1] == pytest.approx((0.5 - s.obj.footprint(1)[1]) / 3)


def test_empty_support_rejected(problem):
    model, _, obs = problem
    ev = TargetEvaluator(obs, CAMERA, model, SceneGraph(model.table), [NoiseParams(0.1, 0.01)])
    with pytest.raises(ValueError):
        Proposal(ev, Schedule((ScheduleStage(),), objects=(7,)), model.library)


def test_score_cells(problem):
    model, scene, obs = problem
    c = scene.children[0]
    lo = np.array(c.contact.as_tuple()) - 0.01
    hi = lo + 0.02
    far_lo = np.array([0.0, 0.0, 3.0])
    cells = [(c.obj, 1, lo, hi), (c.obj, 1, far_lo, far_lo + 0.02), (c.obj, 1, [9.0, 0, 0], [9.1, 0.1, 0.1])]
    s = score_cells(cells, obs, SceneGraph(model.table), CAMERA, NoiseParams(0.05, 0.01), model)
    assert s.sum() == pytest.approx(1.0) and s[0] > s[1] and s[2] == 0.0
    with pytest.raises(ValueError):
        score_cells([], obs, SceneGraph(model.table), CAMERA, NoiseParams(0.05, 0.01), model)


# ---------------------------------------------------------------- weights and resampling


def test_effective_sample_size():
    assert effective_sample_size(particles_with([0.0] * 8)) == pytest.approx(8.0)
    assert effective_sample_size(particles_with([0.0, -np.inf, -np.inf])) == pytest.approx(1.0)
    lw = np.log([1.0, 2.0, 3.0])
    w = np.array([1, 2, 3]) / 6
    assert effective_sample_size(particles_with(lw)) == pytest.approx(1 / np.sum(w ** 2))
    with pytest.raises(DegenerateWeights):
        effective_sample_size(particles_with([-np.inf, -np.inf]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-20, 5), min_size=1, max_size=40), st.integers(0, 2**31))
def test_systematic_resampling_counts(lw, seed):
    ps = particles_with(lw)
    out = resample_systematic(ps, np.random.default_rng(seed))
    n = len(ps)
    w = np.exp(np.array(lw) - logsumexp(lw))
    counts = np.array([sum(o.scene is p.scene for o in out) for p in ps])
    assert counts.sum() == n
    # systematic resampling keeps each count within one of its expectation
    assert np.all(np.abs(counts - n * w) < 1 + 1e-9)
    assert logsumexp([o.log_weight for o in out]) == pytest.approx(logsumexp(lw), abs=1e-9)
    assert len({o.log_weight for o in out}) == 1


def test_object_marginal():
    assert posterior_object_marginal(particles_with([0.0, 1.0, 2.0])) == {0: pytest.approx(1.0)}
    m = posterior_object_marginal(particles_with([0.0, math.log(3), math.log(2)], [0, 1, 1]), [0, 1])
    assert m == {0: pytest.approx(1 / 6), 1: pytest.approx(5 / 6)}
    m = posterior_object_marginal(particles_with([0.0, 0.0], [0, 1]))
    assert m[0] == pytest.approx(0.5) and m[1] == pytest.approx(0.5)
    with pytest.raises(ValueError):
        posterior_object_marginal([])


def test_object_marginal_matches_enumeration(problem):
    # weighting every enumerated state by its exact target reproduces the exact marginal
    model, _, obs = problem
    grid = [NoiseParams(0.05, 0.01)]
    ev = TargetEvaluator(obs, CAMERA, model, SceneGraph(model.table), grid)
    prop = Proposal(ev, Schedule((ScheduleStage((2, 2, 4)),), jitter=False, faces=(1, 2)), model.library)
    bs, lo, hi, lt = prop.children(())
    table = SceneGraph(model.table)
    ps = []
    for b, l, h, t in zip(bs, lo, hi, lt[:, 0]):
        obj, face = prop.branches[b][:2]
        ps.append(Particle(table.add_child(obj, face, ContactParams(*((l + h) / 2))), grid[0], float(t)))
    ids = np.array([prop.branches[b][0].id for b in bs])
    exact = {i: float(np.exp(logsumexp(lt[ids == i, 0]) - logsumexp(lt[:, 0]))) for i in (0, 1)}
    got = posterior_object_marginal(ps, [0, 1])
    for i in (0, 1):
        assert got[i] == pytest.approx(exact[i], abs=1e-6)


# ---------------------------------------------------------------- SMC


def test_smc_matches_enumerated_posterior(problem):
    model, _, obs = problem
    full = SceneModel(model.library, K, camera_prior=model.camera_prior, window=None)
    # a tempered first stage keeps every coarse branch populated
    sched = Schedule((ScheduleStage((1, 1, 6), temperature=0.3), ScheduleStage((1, 1, 3))), objects=(0,), faces=(1,),
                     fixed=(("dx", 0.22), ("dy", 0.2)), jitter=False)
    grid = [NoiseParams(0.05, 0.01)]
    ev = TargetEvaluator(obs, CAMERA, full, SceneGraph(full.table), grid)
    prop = Proposal(ev, sched, full.library)
    leaves = list(prop.leaves())
    exact_lt = np.array([ev.evaluate(full.library[0], 1, (lo + hi) / 2)[0, 0] for _, _, lo, hi in leaves])
    exact = np.exp(exact_lt - logsumexp(exact_lt))
    thetas = np.array([((lo + hi) / 2)[2] for _, _, lo, hi in leaves])
    res = run_smc(obs, CAMERA, 1, full, sched, grid, P=4000, rng=np.random.default_rng(4))
    w = res.weights()
    got = np.array([w[[abs(p.scene.children[0].contact.dtheta - t) < 1e-9 for p in res.particles]].sum()
                    for t in thetas])
    assert 0.5 * np.abs(got - exact).sum() < 0.02
    # the weights are exactly target / q, so their mean is unbiased for the sum of targets;
    # over 20 seeds at P=1000 the log estimate had std 0.1, so 0.2 at P=4000 is about 4 sd
    assert res.log_evidence == pytest.approx(logsumexp(exact_lt), abs=0.2)


def test_weight_invariance_to_target_scale(problem):
    model, _, obs = problem
    nz = [NoiseParams(0.05, 0.01)]
    # with one noise setting the two prefactors differ by the constant log(sigma)
    a_model = SceneModel(model.library, K, camera_prior=model.camera_prior, prefactor="printed")
    b_model = SceneModel(model.library, K, camera_prior=model.camera_prior, prefactor="prior")
    sched = small_schedule(True, faces=(1,))
    a = smc_init(obs, CAMERA, a_model, sched, nz, 30, np.random.default_rng(5))
    b = smc_init(obs, CAMERA, b_model, sched, nz, 30, np.random.default_rng(5))
    assert [p.scene.key() for p in a] == [p.scene.key() for p in b]
    shift = np.array([p.log_weight for p in a]) - np.array([p.log_weight for p in b])
    np.testing.assert_allclose(shift, math.log(0.01), atol=1e-9)
    ra = resample_systematic(a, np.random.default_rng(6))
    rb = resample_systematic(b, np.random.default_rng(6))
    assert [p.scene.key() for p in ra] == [p.scene.key() for p in rb]


def test_smc_deterministic_across_threads(problem):
    model, _, obs = problem
    sched = small_schedule(True)
    runs = []
    for t in (1, 4):
        render.set_threads(t)
        try:
            res = run_smc(obs, CAMERA, 2, model, sched, P=20, rng=np.random.default_rng(7))
        finally:
            render.set_threads(1)
        runs.append(([p.scene.key() for p in res.particles], [p.log_weight for p in res.particles],
                     res.log_evidence))
    assert runs[0] == runs[1]


def test_smc_two_objects_and_known(problem):
    model, scene, obs = problem
    res = run_smc(obs, CAMERA, 2, model, small_schedule(True), P=10, rng=np.random.default_rng(8))
    assert all(len(p.scene.children) == 2 for p in res.particles)
    assert len(res.ess_history) == 2 and res.resampled[-1] is False
    known = run_smc(obs, CAMERA, 1, model, small_schedule(True), P=10, rng=np.random.default_rng(8),
                    known=scene)
    for p in known.particles:
        assert p.n_known == 1 and len(p.inferred) == 1
        assert p.scene.children[0] == scene.children[0]
    with pytest.raises(ValueError):
        run_smc(obs, CAMERA, 0, model)
    with pytest.raises(ValueError):
        smc_init(obs, CAMERA, model, small_schedule(), [NoiseParams(0.1, 0.01)], 0, np.random.default_rng(0))


def test_map_particle_is_highest_target():
    ps = particles_with([0.0, 0.0, 0.0])
    ps = [Particle(p.scene, None, p.log_weight, lt) for p, lt in zip(ps, (1.0, 5.0, 2.0))]
    assert SMCResult(ps, 0.0).map_particle() is ps[1]


# ---------------------------------------------------------------- von Mises


def test_von_mises_fit_matches_scipy_mle():
    for kappa, loc in ((0.5, 0.3), (4.0, 5.0), (40.0, 2.0)):
        x = stats.vonmises(kappa, loc=loc).rvs(2000, random_state=9) % TWO_PI
        fit = fit_von_mises(x)
        k_ref, loc_ref, _ = stats.vonmises.fit(x, fscale=1)
        assert fit.kappa == pytest.approx(k_ref, rel=1e-4)
        assert math.cos(fit.mu - loc_ref) == pytest.approx(1.0, abs=1e-8)
        assert not fit.saturated


def test_von_mises_weighted_equals_repeated():
    x = np.array([0.1, 0.5, 6.0, 0.3])
    w = np.array([1, 3, 2, 1])
    a = fit_von_mises(x, w)
    b = fit_von_mises(np.repeat(x, w))
    assert a.kappa == pytest.approx(b.kappa, rel=1e-9) and a.mu == pytest.approx(b.mu, abs=1e-12)


def test_von_mises_edge_cases():
    assert fit_von_mises([0.0, math.pi]).kappa == 0.0
    with pytest.raises(ValueError):
        fit_von_mises([1.0, 1.0])
    with pytest.raises(ValueError):
        fit_von_mises([1.0, 2.0], [0.0, 0.0])
    sat = fit_von_mises([0.0, 1e-5])
    assert sat.saturated and sat.kappa == 1e6
    uniform = np.linspace(0, TWO_PI, 360, endpoint=False)
    assert fit_von_mises(uniform + 1e-3 * np.sin(uniform)).kappa < 0.1


def test_von_mises_logpdf_matches_scipy():
    x = np.linspace(0, TWO_PI, 13)
    for kappa in (0.0, 0.7, 25.0, 900.0):
        np.testing.assert_allclose(von_mises_logpdf(x, 1.2, kappa), stats.vonmises(kappa, loc=1.2).logpdf(x),
                                   rtol=1e-9, atol=1e-9)
