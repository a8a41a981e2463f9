import json

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from casdrl.evaluator import EvalMetrics, objective
from casdrl.surrogate_tuner import (GpHyper, LedgerMismatchError, TunerConfig, TuningIteration,
                                    TuningLedger, expected_improvement, fit_from_ledger, gp_fit,
                                    latin_hypercube, linear_sweep, local_lhs, recommend,
                                    replicate_seeds, score_replicates, select_next, to_box,
                                    to_unit, tune, init_design)

IT50 = (-5.9669e-4, -0.8324, -0.1128)
IT52 = (-1.3570e-5, -0.6253, -0.1018)
SWEEP_ROWS = [(-5.1339e-4, -0.8028, -0.1112), (-4.3008e-4, -0.7732, -0.1097),
          (-3.4678e-4, -0.7436, -0.1081), (-2.6348e-4, -0.7140, -0.1065),
          (-1.8018e-4, -0.6844, -0.1049), (-9.6873e-5, -0.6549, -0.1034)]


def strata_ok(col, n):
    return sorted(np.floor(np.asarray(col) * n).astype(int)) == list(range(n))


# ---------------------------------------------------------------- designs

def test_lhs_quartiles():
    u = latin_hypercube(4, 3, np.random.default_rng(0))
    assert u.shape == (4, 3)
    assert all(strata_ok(u[:, d], 4) for d in range(3))


def test_lhs_single_point():
    u = latin_hypercube(1, 3, np.random.default_rng(0))
    assert u.shape == (1, 3) and np.all((u >= 0) & (u < 1))


def test_lhs_rejects_bad_sizes():
    with pytest.raises(ValueError):
        latin_hypercube(0, 3, np.random.default_rng(0))


def test_lhs_uniform_within_strata_and_independent_dims():
    n, designs = 10, 1000
    u = np.stack([latin_hypercube(n, 3, np.random.default_rng(s)) for s in range(designs)])
    # position inside the stratum is uniform
    frac = (u * n) % 1.0
    counts = np.histogram(frac.ravel(), bins=20, range=(0, 1))[0]
    assert stats.chisquare(counts).pvalue > 1e-3
    # the joint strata of two dimensions are uniformly occupied (independent permutations)
    cells = (np.floor(u[..., 0] * n) * n + np.floor(u[..., 1] * n)).astype(int).ravel()
    assert stats.chisquare(np.bincount(cells, minlength=n * n)).pvalue > 1e-3


def test_box_maps_invert():
    x = np.array([[-1.0, -0.5, 0.0]])
    assert np.allclose(to_box(to_unit(x)), x)
    assert np.allclose(to_unit(x), [[0.0, 0.5, 1.0]])


WARP = (1000.0, 0.0, 20.0)


def test_warp_endpoints_and_linear_default():
    ends = np.array([[-1.0, -1.0, -1.0], [0.0, 0.0, 0.0]])
    assert np.array_equal(to_unit(ends, warp=WARP), [[0, 0, 0], [1, 1, 1]])
    back = to_box(np.array([[0.0] * 3, [1.0] * 3]), warp=WARP)
    assert np.all((back >= -1) & (back <= 0)) and np.allclose(back, ends, rtol=0, atol=1e-12)
    x = np.random.default_rng(3).uniform(-1, 0, (50, 3))
    assert np.array_equal(to_unit(x, warp=(0.0, 0.0, 0.0)), to_unit(x))
    assert np.array_equal(to_box(x + 1, warp=(0.0, 0.0, 0.0)), to_box(x + 1))
    # half the unit axis covers only the last few percent of the alert-cost range
    assert -0.04 < to_box(np.array([0.5, 0.5, 0.5]), warp=WARP)[0] < -0.02


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1e4), st.integers(0, 2**31))
@example(5e-324, 0).via("subnormal stretch")
@example(2e-12, 0).via("just above the linear cutoff")
def test_warp_round_trip_and_monotone(k, seed):
    warp = (k, 0.0, k / 2)
    u = np.sort(np.random.default_rng(seed).random((40, 3)), axis=0)
    x = to_box(u, warp=warp)
    assert np.all(np.diff(x, axis=0) >= 0)
    assert np.all((x >= -1) & (x <= 0))
    assert np.allclose(to_unit(x, warp=warp), u, atol=1e-9)


def test_warped_init_design_stratified_in_warped_coordinates():
    cfg = TunerConfig(n_init=8, budget=0, warp=WARP)
    pts = init_design(cfg)
    assert np.all((pts >= -1) & (pts <= 0))
    u = to_unit(pts, warp=WARP)
    for d in range(3):
        assert strata_ok(u[:, d], 8)
    # the unwarped design is the same unit design mapped linearly
    lin = init_design(TunerConfig(n_init=8, budget=0))
    assert np.allclose(u, to_unit(lin), atol=1e-12)


def test_warped_gp_equals_linear_gp_on_transformed_inputs():
    rng = np.random.default_rng(5)
    x = rng.uniform(-1, 0, (7, 3))
    y = rng.uniform(1, 50, 7)
    warped = gp_fit(x, y, warp=WARP)
    plain = gp_fit(to_box(to_unit(x, warp=WARP)), y)
    q = rng.uniform(-1, 0, (20, 3))
    m1, s1 = warped.predict_box(q, True)
    m2, s2 = plain.predict(to_unit(q, warp=WARP), True)
    assert np.allclose(m1, m2) and np.allclose(s1, s2)


@pytest.mark.parametrize("warp", [(1.0, 2.0), (-1.0, 0.0, 0.0), (float("nan"), 0.0, 0.0)])
def test_tuner_config_rejects_bad_warp(warp):
    with pytest.raises(ValueError, match="warp"):
        TunerConfig(warp=warp)


def test_linear_sweep_reference_rows():
    pts = linear_sweep(IT50, IT52, 6)
    # one unit in the last printed digit: the endpoints are themselves rounded
    tol = np.array([1e-8, 1e-4, 1e-4])
    for got, want in zip(pts, SWEEP_ROWS):
        assert np.all(np.abs(got - np.array(want)) <= tol)


def test_linear_sweep_degenerate():
    assert np.array_equal(linear_sweep(IT50, IT50, 4), np.tile(IT50, (4, 1)))
    with pytest.raises(ValueError):
        linear_sweep(IT50, IT52, 0)


coord = st.floats(-1.0, 0.0)


@given(st.lists(coord, min_size=3, max_size=3), st.lists(coord, min_size=3, max_size=3),
       st.integers(1, 12), st.integers(0, 2**31))
def test_linear_sweep_is_affine(a, b, n, seed):
    rng = np.random.default_rng(seed)
    A, c = rng.normal(size=(3, 3)), rng.normal(size=3)
    lhs = linear_sweep(A @ np.array(a) + c, A @ np.array(b) + c, n)
    rhs = linear_sweep(a, b, n) @ A.T + c
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_local_lhs_inside_radius_and_stratified():
    pts = local_lhs((-0.5, -0.5, -0.5), 0.1, 5, np.random.default_rng(2))
    assert np.all(np.abs(pts + 0.5) <= 0.1)
    unscaled = (pts - (-0.6)) / 0.2
    assert all(strata_ok(unscaled[:, d], 5) for d in range(3))


def test_local_lhs_corner_clamp():
    pts = local_lhs((0.0, 0.0, 0.0), 0.2, 8, np.random.default_rng(3))
    assert np.all((pts >= -0.2) & (pts <= 0.0))
    unscaled = (pts + 0.2) / 0.2
    assert all(strata_ok(unscaled[:, d], 8) for d in range(3))


def test_local_lhs_errors():
    with pytest.raises(ValueError):
        local_lhs((-0.5, -0.5, -0.5), 0.0, 3, np.random.default_rng(0))
    with pytest.raises(ValueError, match="zero width"):
        local_lhs((0.5, -0.5, -0.5), 0.2, 3, np.random.default_rng(0))  # outside the box


# ---------------------------------------------------------------- GP

def test_gp_interpolates_without_noise():
    pts = [(-0.2, -0.4, -0.6), (-0.8, -0.3, -0.1)]
    gp = gp_fit(pts, [1.5, -2.0], GpHyper(noise_var=0.0))
    mean, std = gp.predict_box(np.array(pts))
    assert np.allclose(mean, [1.5, -2.0], atol=1e-8)
    assert np.all(std < 1e-4)


def test_gp_far_from_data_returns_prior():
    rng = np.random.default_rng(0)
    pts = to_box(rng.random((6, 3)))
    y = rng.normal(size=6)
    gp = gp_fit(pts, y)
    mean, std = gp.predict(np.array([[50.0, 50.0, 50.0]]))
    assert mean[0] == pytest.approx(np.mean(y), abs=1e-12)
    assert std[0] == pytest.approx(np.std(y), rel=1e-12)  # unit signal variance after z-scoring


def test_gp_matches_dense_oracle_1d():
    x = np.array([[-0.9], [-0.7], [-0.45], [-0.3], [-0.05]])
    y = np.sin(6 * x[:, 0]) + x[:, 0]
    hyp = GpHyper(length_scale=0.3, signal_var=1.0, noise_var=1e-2)
    gp = gp_fit(x, y, hyp)
    # oracle: plain dense solves on the same z-scored targets
    u = x[:, 0] + 1.0
    mu, sd = y.mean(), y.std()
    z = (y - mu) / sd

    def k(a, b):
        return np.exp(-0.5 * (a[:, None] - b[None, :]) ** 2 / 0.3**2)

    K = k(u, u) + 1e-2 * np.eye(5)
    q = np.linspace(0, 1, 41)
    Ks = k(q, u)
    mean = mu + sd * Ks @ np.linalg.solve(K, z)
    var = sd**2 * (1.0 - np.einsum("ij,ji->i", Ks, np.linalg.solve(K, Ks.T)))
    m, s = gp.predict(q[:, None])
    assert np.max(np.abs(m - mean)) < 1e-8
    assert np.max(np.abs(s**2 - var)) < 1e-8


def test_gp_merges_duplicates():
    pts = [(-0.1, -0.1, -0.1), (-0.1, -0.1, -0.1), (-0.9, -0.9, -0.9)]
    gp = gp_fit(pts, [1.0, 3.0, 0.0])
    assert len(gp.x) == 2
    assert sorted(gp.y) == [0.0, 2.0]
    with pytest.raises(ValueError):
        gp_fit(pts[:2], [1.0, 2.0])


def test_gp_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    gp = gp_fit(to_box(rng.random((8, 3))), rng.normal(size=8))
    u = np.array([0.3, 0.6, 0.45])
    m, s, dm, ds = gp.predict_with_grad(u)
    h = 1e-6
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        mp, sp = gp.predict(u + e)
        mm, sm = gp.predict(u - e)
        assert (mp[0] - mm[0]) / (2 * h) == pytest.approx(dm[i], rel=1e-5, abs=1e-8)
        assert (sp[0] - sm[0]) / (2 * h) == pytest.approx(ds[i], rel=1e-5, abs=1e-8)


# ---------------------------------------------------------------- EI

def test_ei_examples():
    assert expected_improvement(2.0, 0.0, 2.0) == 0.0
    assert expected_improvement(1.0, 0.0, 2.0) == 1.0
    ei = float(expected_improvement(-1.0, 1.0, 0.0))
    oracle = integrate.quad(lambda y: max(0.0 - y, 0.0) * stats.norm.pdf(y, -1.0, 1.0),
                            -40, 0.0)[0]
    assert ei == pytest.approx(oracle, abs=1e-9)
    assert ei == pytest.approx(1.0833, abs=1e-4)


@given(st.floats(-10, 10), st.floats(0, 5), st.floats(-10, 10), st.floats(-100, 100))
def test_ei_translation_invariant_and_nonnegative(mean, std, best, c):
    a = float(expected_improvement(mean, std, best))
    b = float(expected_improvement(mean + c, std, best + c))
    assert a >= 0
    assert a == pytest.approx(b, rel=1e-6, abs=1e-9)
    if std == 0 and mean >= best:
        assert a == 0


def outlier_surrogate():
    rng = np.random.default_rng(11)
    pts = list(to_box(latin_hypercube(30, 3, rng)))
    pts.append(np.array([-0.3, -0.7, -0.5]))
    y = [1.0] * 30 + [0.0]
    return gp_fit(pts, y)


def test_select_next_finds_outlier_like_grid_search():
    gp = outlier_surrogate()
    sel = select_next(gp, np.random.default_rng(0))
    g = (np.arange(50) + 0.5) / 50
    grid = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    mean, std = gp.predict(grid)
    ei = expected_improvement(mean, std, gp.best)
    top = to_box(grid[np.argmax(ei)])
    assert sel.ei >= ei.max() - 1e-9
    assert np.max(np.abs(np.array(sel.point) - top)) <= 0.05
    # and the training point closest to the selection is the low outlier
    d = np.linalg.norm(gp.x - to_unit(np.array(sel.point)), axis=1)
    assert np.argmin(d) == 30


def test_select_next_deterministic_and_in_box():
    a = select_next(outlier_surrogate(), np.random.default_rng(4))
    b = select_next(outlier_surrogate(), np.random.default_rng(4))
    assert a == b
    assert all(-1.0 <= v <= 0.0 for v in a.point)


def test_select_next_flags_vanished_ei():
    pts = to_box(latin_hypercube(6, 3, np.random.default_rng(0)))
    gp = gp_fit(pts, np.arange(6.0))
    # a posterior that is certain and nowhere below the incumbent
    gp.predict = lambda u, return_std=True: (np.full(len(u), 5.0), np.zeros(len(u)))
    sel = select_next(gp, np.random.default_rng(0), n_candidates=50)
    assert sel.converged and sel.ei == 0.0
    assert all(-1.0 <= v <= 0.0 for v in sel.point)


# ---------------------------------------------------------------- loop

def bowl(center):
    c = np.asarray(center)

    def f(point, seeds):
        return [float(np.sum((np.array(point) - c) ** 2))]
    return f


FAST = dict(n_candidates=200, n_starts=4)


def test_budget_zero_gives_init_design():
    led = tune(TunerConfig(n_init=5, budget=0, **FAST), bowl((-0.5, -0.5, -0.5)))
    assert len(led) == 5
    assert all(it.provenance == "LHS_INIT" and it.ok for it in led.iterations)
    u = to_unit(np.array([it.point for it in led.iterations]))
    assert all(strata_ok(u[:, d], 5) for d in range(3))


class Crash(Exception):
    pass


def test_resume_is_bit_identical(tmp_path):
    cfg = TunerConfig(n_init=5, budget=5, master_seed=3, **FAST)
    f = bowl((-0.2, -0.6, -0.4))
    full = tune(cfg, f, tmp_path / "full.jsonl")
    calls = {"n": 0}

    def crashing(point, seeds):
        calls["n"] += 1
        if calls["n"] > 7:
            raise Crash()
        return f(point, seeds)

    path = tmp_path / "part.jsonl"
    with pytest.raises(Crash):
        tune(cfg, crashing, path)
    part = path.read_text()
    assert len(TuningLedger.load(path)) == 7
    resumed = tune(cfg, f, path)
    assert [it.iteration for it in resumed.iterations] == list(range(10))
    assert path.read_text().startswith(part)
    assert path.read_text() == (tmp_path / "full.jsonl").read_text()
    with pytest.raises(LedgerMismatchError):
        tune(TunerConfig(n_init=5, budget=6, master_seed=3, **FAST), f, path)
    assert full.best().objective == resumed.best().objective


def test_failed_points_are_recorded_and_skipped():
    f = bowl((-0.5, -0.5, -0.5))

    def sometimes(point, seeds):
        if point[0] < -0.5:
            raise RuntimeError("diverged")
        return f(point, seeds)

    led = tune(TunerConfig(n_init=6, budget=3, **FAST), sometimes)
    failed = [it for it in led.iterations if not it.ok]
    assert failed and all(it.status == "FAILED" and "diverged" in it.error for it in failed)
    assert len(led) == 9
    gp = fit_from_ledger(led, TunerConfig())
    assert len(gp.x) == len(led.completed())


@settings(max_examples=40)
@given(st.lists(st.tuples(st.integers(0, 1000), st.integers(0, 1000), st.integers(0, 1000)),
                min_size=3, max_size=3))
def test_best_of_three_exhaustive(counts):
    ms = [EvalMetrics.from_counts(1000, *c) for c in counts]
    rec = score_replicates(ms, TunerConfig())
    objs = [objective(m).total for m in ms]
    assert rec["objective"] == min(objs)
    assert rec["model_objectives"][rec["best_model"]] == min(objs)
    assert rec["metrics"] == ms[rec["best_model"]].to_dict()
    assert rec["alert_variance"] == pytest.approx(np.var([m.p_alert for m in ms]))


def test_ledger_append_only(tmp_path):
    path = tmp_path / "l.jsonl"
    led = TuningLedger({"format": "x"}, path=path)
    snapshots = []
    for k in range(4):
        led.append(TuningIteration(k, (-0.1 * k, -0.5, -0.5), "MANUAL", objective=float(k)))
        snapshots.append(path.read_text())
    assert all(b.startswith(a) for a, b in zip(snapshots, snapshots[1:]))
    with pytest.raises(ValueError):
        led.append(TuningIteration(7, (-0.1, -0.1, -0.1), "MANUAL"))
    back = TuningLedger.load(path)
    assert back.entries() == led.entries()
    first = json.loads(path.read_text().splitlines()[0])
    assert first["type"] == "header"


def test_iteration_validation():
    with pytest.raises(ValueError):
        TuningIteration(0, (0.1, -0.5, -0.5), "EI")
    with pytest.raises(ValueError):
        TuningIteration(0, (-0.1, -0.5, -0.5), "GUESS")


def test_replicate_seeds_distinct_and_stable():
    s = replicate_seeds(0, 4)
    assert len(set(s)) == 3 and s == replicate_seeds(0, 4)
    assert s != replicate_seeds(0, 5) and s != replicate_seeds(1, 4)


@pytest.mark.parametrize("seed", range(10))
def test_synthetic_bowl_minimum_found(seed):
    rng = np.random.default_rng(1000 + seed)
    c = -rng.uniform(0.1, 0.9, 3)
    led = tune(TunerConfig(n_init=5, budget=20, master_seed=seed), bowl(c))
    rec = recommend(led, TunerConfig())
    assert np.max(np.abs(np.array(led.best().point) - c)) <= 0.05 or \
        np.max(np.abs(np.array(rec["surrogate_minimizer"]) - c)) <= 0.05
