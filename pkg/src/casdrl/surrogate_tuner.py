"""Surrogate search over the three tunable reward costs.

A Gaussian-process model of the objective is refit every iteration and the
next point is the expected-improvement maximiser. Each point is trained three
times; the best replicate's metrics are kept and the spread of the three
alert rates decides whether the point is trusted.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import linalg, optimize
from scipy.stats import norm, qmc

from .container import atomic_write, dump_json
from .evaluator import (STABILITY_THRESHOLD, EvalMetrics, MetricTargets, ObjectiveWeights,
                        alert_variance, is_stable, objective)

log = logging.getLogger(__name__)

BOX_LOW, BOX_HIGH = -1.0, 0.0
DIMS = 3
PARAM_NAMES = ("alert_cost", "reversal_cost", "cease_alert_cost")
PROVENANCE = ("LHS_INIT", "EI", "LINEAR_SWEEP", "LOCAL_LHS", "MANUAL")
LEDGER_FORMAT = "casdrl-tuning-ledger/1"
_BASELINE_TAG = 1_000_000


class GpFitError(np.linalg.LinAlgError):
    pass


class LedgerMismatchError(ValueError):
    """An existing ledger was written under a different configuration."""


# ----------------------------------------------------------------------------
# designs

def latin_hypercube(n: int, dims: int, rng) -> np.ndarray:
    """n points in [0, 1)^dims with one sample per stratum in every dimension."""
    if n < 1 or dims < 1:
        raise ValueError("latin_hypercube needs n >= 1 and dims >= 1")
    return qmc.LatinHypercube(d=dims, rng=rng).random(n)


WARP_MIN = 1e-12  # below this the stretch equals the linear map to double precision


def _warped(warp) -> bool:
    return warp is not None and any(k > WARP_MIN for k in warp)


def to_box(u, low=BOX_LOW, high=BOX_HIGH, warp=None) -> np.ndarray:
    """Unit cube to box.

    ``warp[d] = k > 0`` stretches dimension d logarithmically near ``high``:
    the unit coordinate is 1 - log1p(k * t) / log1p(k), with t the linear
    distance from ``high`` as a share of the box width.
    """
    u = np.asarray(u, dtype=np.float64)
    if _warped(warp):
        u = u.copy()
        for d, k in enumerate(warp):
            if k > WARP_MIN:
                t = np.expm1((1.0 - u[..., d]) * np.log1p(k)) / k
                u[..., d] = np.clip(1.0 - t, 0.0, 1.0)
    return low + u * (high - low)


def to_unit(x, low=BOX_LOW, high=BOX_HIGH, warp=None) -> np.ndarray:
    u = (np.asarray(x, dtype=np.float64) - low) / (high - low)
    if _warped(warp):
        u = u.copy()
        for d, k in enumerate(warp):
            if k > WARP_MIN:
                t = np.clip(1.0 - u[..., d], 0.0, 1.0)
                u[..., d] = 1.0 - np.log1p(k * t) / np.log1p(k)
    return u


def check_warp(warp) -> None:
    if len(warp) != DIMS or not all(math.isfinite(k) and k >= 0 for k in warp):
        raise ValueError(f"warp needs {DIMS} finite non-negative values, got {warp}")


def linear_sweep(a, b, n: int) -> np.ndarray:
    """n interior points of n + 1 equal steps from a to b (endpoints excluded)."""
    if n < 1:
        raise ValueError("linear_sweep needs n >= 1")
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    k = np.arange(1, n + 1)[:, None]
    return a + k * (b - a) / (n + 1)


def local_lhs(center, radius, n: int, rng) -> np.ndarray:
    """LHS design over [center - radius, center + radius] clipped to the box."""
    center = np.asarray(center, dtype=np.float64)
    radius = np.broadcast_to(np.asarray(radius, dtype=np.float64), center.shape)
    if np.any(radius <= 0):
        raise ValueError("local_lhs radius must be positive")
    lo = np.maximum(center - radius, BOX_LOW)
    hi = np.minimum(center + radius, BOX_HIGH)
    if np.any(hi - lo <= 0):
        raise ValueError(f"local region [{lo}, {hi}] has zero width after clipping to the box")
    return lo + latin_hypercube(n, len(center), rng) * (hi - lo)


# ----------------------------------------------------------------------------
# Gaussian process

@dataclass(frozen=True)
class GpHyper:
    length_scale: float | tuple = 0.3
    signal_var: float = 1.0
    noise_var: float = 1e-2

    def __post_init__(self):
        ls = np.atleast_1d(self.length_scale)
        if np.any(ls <= 0) or self.signal_var <= 0 or self.noise_var < 0:
            raise ValueError("GP length-scales and signal variance must be > 0, noise >= 0")


def se_kernel(a, b, length_scale, signal_var) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64) / length_scale
    b = np.asarray(b, dtype=np.float64) / length_scale
    d2 = (np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * a @ b.T)
    return signal_var * np.exp(-0.5 * np.maximum(d2, 0.0))


class GpSurrogate:
    """Exact GP regression with fixed hyperparameters on box-normalised inputs.

    Objectives are z-scored before fitting; predictions are returned in the
    original units. ``noise_scale`` multiplies the noise variance per point.
    """

    def __init__(self, x_unit, y, noise, hyper: GpHyper, warp=None):
        self.x, self.hyper, self.warp = x_unit, hyper, warp
        self.y_mean = float(np.mean(y))
        sd = float(np.std(y))
        self.y_std = sd if sd > 0 else 1.0
        z = (y - self.y_mean) / self.y_std
        k = se_kernel(x_unit, x_unit, hyper.length_scale, hyper.signal_var)
        k[np.diag_indices_from(k)] += noise
        jitter = 0.0
        for attempt in range(8):
            try:
                self.chol = linalg.cho_factor(k + jitter * np.eye(len(k)), lower=True)
                break
            except linalg.LinAlgError:
                jitter = 1e-10 * 10.0**attempt
        else:
            raise GpFitError("kernel matrix not positive definite after jitter escalation")
        self.alpha = linalg.cho_solve(self.chol, z)
        self.y = np.asarray(y, dtype=np.float64)

    def predict(self, x_unit, return_std: bool = True):
        x_unit = np.atleast_2d(np.asarray(x_unit, dtype=np.float64))
        ks = se_kernel(x_unit, self.x, self.hyper.length_scale, self.hyper.signal_var)
        mean = self.y_mean + self.y_std * (ks @ self.alpha)
        if not return_std:
            return mean
        v = linalg.cho_solve(self.chol, ks.T)
        var = self.hyper.signal_var - np.sum(ks * v.T, axis=1)
        return mean, self.y_std * np.sqrt(np.maximum(var, 0.0))

    def predict_box(self, x_box, return_std: bool = True):
        return self.predict(to_unit(x_box, warp=self.warp), return_std)

    def predict_with_grad(self, u):
        """Mean, std and their gradients at one unit-cube point."""
        u = np.asarray(u, dtype=np.float64)
        ls = np.broadcast_to(np.asarray(self.hyper.length_scale, dtype=np.float64), u.shape)
        ks = se_kernel(u[None, :], self.x, ls, self.hyper.signal_var)[0]
        dk = -ks[:, None] * (u[None, :] - self.x) / (ls * ls)  # (n, d)
        mean = self.y_mean + self.y_std * (ks @ self.alpha)
        dmean = self.y_std * (dk.T @ self.alpha)
        w = linalg.cho_solve(self.chol, ks)
        var = self.hyper.signal_var - ks @ w
        if var <= 1e-300:
            return mean, 0.0, dmean, np.zeros_like(u)
        sd = math.sqrt(var)
        dsd = self.y_std * (-(dk.T @ w)) / sd
        return mean, self.y_std * sd, dmean, dsd

    @property
    def best(self) -> float:
        return float(np.min(self.y))


def gp_fit(points, objectives, hyper: GpHyper | None = None, noise_scale=None,
           warp=None) -> GpSurrogate:
    """Fit the surrogate on box points; exact duplicates are merged by averaging.

    ``warp`` selects the unit-cube coordinates the kernel sees (see :func:`to_box`).
    """
    hyper = hyper or GpHyper()
    x = np.atleast_2d(np.asarray(points, dtype=np.float64))
    y = np.asarray(objectives, dtype=np.float64)
    scale = np.ones(len(y)) if noise_scale is None else np.asarray(noise_scale, dtype=np.float64)
    uniq, inv = np.unique(x, axis=0, return_inverse=True)
    inv = inv.ravel()
    if len(uniq) < len(x):
        log.info("merging %d duplicate surrogate points", len(x) - len(uniq))
        cnt = np.bincount(inv).astype(np.float64)
        y = np.bincount(inv, weights=y) / cnt
        scale = np.bincount(inv, weights=scale) / cnt / cnt
        x = uniq
    if len(x) < 2:
        raise ValueError("gp_fit needs at least two distinct points")
    return GpSurrogate(to_unit(x, warp=warp), y, hyper.noise_var * scale, hyper, warp)


def expected_improvement(mean, std, best) -> np.ndarray:
    """EI for minimisation; reduces to max(best - mean, 0) where std is 0."""
    mean, std = np.broadcast_arrays(np.asarray(mean, dtype=np.float64),
                                    np.asarray(std, dtype=np.float64))
    gain = np.asarray(best - mean, dtype=np.float64)
    out = np.array(np.maximum(gain, 0.0), dtype=np.float64)
    pos = std > 0
    if np.any(pos):
        with np.errstate(over="ignore"):  # huge |z|: cdf saturates and pdf underflows to 0, both right
            z = gain[pos] / std[pos]
            out[pos] = gain[pos] * norm.cdf(z) + std[pos] * norm.pdf(z)
    return np.maximum(out, 0.0)


@dataclass(frozen=True)
class Selection:
    point: tuple
    ei: float
    converged: bool = False


def select_next(surrogate: GpSurrogate, rng, n_candidates: int = 1000,
                n_starts: int = 8) -> Selection:
    """Maximise EI over the box: LHS candidate screen, then L-BFGS-B polish."""
    best = surrogate.best
    cand = latin_hypercube(n_candidates, DIMS, rng)
    mean, std = surrogate.predict(cand)
    ei = expected_improvement(mean, std, best)
    if not np.max(ei) > 1e-12:
        i = int(np.argmax(std))
        log.warning("expected improvement vanished everywhere; taking the most uncertain candidate")
        return Selection(tuple(float(v) for v in to_box(cand[i], warp=surrogate.warp)), 0.0, True)

    def neg_ei(u):
        m, s, dm, ds = surrogate.predict_with_grad(u)
        if s <= 0:
            return -max(best - m, 0.0), (dm if best > m else np.zeros_like(u))
        z = (best - m) / s
        ei = (best - m) * norm.cdf(z) + s * norm.pdf(z)
        return -ei, -(-norm.cdf(z) * dm + norm.pdf(z) * ds)

    order = np.argsort(-ei, kind="stable")[:n_starts]
    top_u, top_ei = cand[order[0]], float(ei[order[0]])
    for j in order:
        res = optimize.minimize(neg_ei, cand[j], jac=True, method="L-BFGS-B",
                                bounds=[(0.0, 1.0)] * DIMS)
        if np.isfinite(res.fun) and -res.fun > top_ei:
            top_u, top_ei = np.clip(res.x, 0.0, 1.0), float(-res.fun)
    return Selection(tuple(float(v) for v in to_box(top_u, warp=surrogate.warp)), top_ei, False)


def surrogate_minimizer(surrogate: GpSurrogate) -> tuple[tuple, float]:
    """Box point minimising the posterior mean, polished from every training point."""
    def mean_and_grad(u):
        m, _, dm, _ = surrogate.predict_with_grad(u)
        return m, dm

    best_u, best_m = None, math.inf
    for start in surrogate.x:
        res = optimize.minimize(mean_and_grad, start, jac=True, method="L-BFGS-B",
                                bounds=[(0.0, 1.0)] * DIMS)
        if res.fun < best_m:
            best_u, best_m = np.clip(res.x, 0.0, 1.0), float(res.fun)
    return tuple(float(v) for v in to_box(best_u, warp=surrogate.warp)), best_m


# ----------------------------------------------------------------------------
# ledger

@dataclass
class TuningIteration:
    iteration: int
    point: tuple
    provenance: str
    status: str = "OK"
    model_metrics: list = field(default_factory=list)
    model_objectives: list = field(default_factory=list)
    best_model: int | None = None
    metrics: dict | None = None
    alert_variance: float | None = None
    stable: bool | None = None
    objective: float | None = None
    seeds: list = field(default_factory=list)
    ei: float | None = None
    error: str | None = None

    def __post_init__(self):
        if self.provenance not in PROVENANCE:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        self.point = tuple(float(v) for v in self.point)
        if any(not BOX_LOW <= v <= BOX_HIGH for v in self.point):
            raise ValueError(f"point {self.point} outside [-1, 0]^3")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["point"] = list(self.point)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TuningIteration":
        return cls(**d)

    @property
    def ok(self) -> bool:
        return self.status == "OK"


# V >= -0.5 whenever the weights sum to at most 1, so log1p is always defined
TRANSFORMS = {"none": (lambda v: v, lambda v: v), "log1p": (np.log1p, np.expm1)}


@dataclass(frozen=True)
class TunerConfig:
    n_init: int = 5
    budget: int = 15
    master_seed: int = 0
    stability_threshold: float = STABILITY_THRESHOLD
    gp: GpHyper = field(default_factory=GpHyper)
    n_candidates: int = 1000
    n_starts: int = 8
    targets: MetricTargets = field(default_factory=MetricTargets)
    weights: ObjectiveWeights = field(default_factory=ObjectiveWeights)
    objective_transform: str = "log1p"  # applied to V before the GP's z-scoring
    warp: tuple = (0.0, 0.0, 0.0)  # per-dimension log stretch toward 0, see to_box

    def __post_init__(self):
        if self.objective_transform not in TRANSFORMS:
            raise ValueError(f"objective_transform must be one of {sorted(TRANSFORMS)}")
        if self.n_init < 2 or self.budget < 0:
            raise ValueError("tuner needs n_init >= 2 and budget >= 0")
        if self.stability_threshold <= 0 or self.n_candidates < 1 or self.n_starts < 1:
            raise ValueError("tuner stability_threshold, n_candidates and n_starts must be positive")
        check_warp(self.warp)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gp"]["length_scale"] = list(np.atleast_1d(self.gp.length_scale).astype(float))
        return d


class TuningLedger:
    """Append-only record of tuner iterations, persisted as JSON lines."""

    def __init__(self, header: dict, iterations=None, path=None):
        self.header = header
        self.iterations: list[TuningIteration] = list(iterations or [])
        self.path = Path(path) if path else None

    def __len__(self):
        return len(self.iterations)

    def append(self, it: TuningIteration) -> None:
        if it.iteration != len(self.iterations):
            raise ValueError(f"iteration ids must be dense: expected {len(self.iterations)}, "
                             f"got {it.iteration}")
        self.iterations.append(it)
        if self.path:
            self.save(self.path)

    def dumps(self) -> str:
        lines = [dump_json({"type": "header", **self.header})]
        lines += [dump_json({"type": "iteration", **it.to_dict()}) for it in self.iterations]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        atomic_write(path, self.dumps())

    @classmethod
    def load(cls, path) -> "TuningLedger":
        header, its = None, []
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = rec.pop("type", None)
            if kind == "header":
                header = rec
            elif kind == "iteration":
                its.append(TuningIteration.from_dict(rec))
            else:
                raise ValueError(f"unrecognised ledger record type {kind!r}")
        if header is None:
            raise ValueError(f"{path}: ledger has no header line")
        return cls(header, its, path)

    def completed(self) -> list[TuningIteration]:
        return [it for it in self.iterations if it.ok]

    def best(self) -> TuningIteration | None:
        done = self.completed()
        return min(done, key=lambda it: it.objective) if done else None

    def entries(self) -> list[dict]:
        return [it.to_dict() for it in self.iterations]


# ----------------------------------------------------------------------------
# the loop

PointEvaluator = Callable[[tuple, Sequence[int]], list]


def replicate_seeds(master_seed: int, iteration: int, n: int = 3) -> list[int]:
    return [int(np.random.SeedSequence([master_seed, iteration, r]).generate_state(1)[0])
            for r in range(n)]


def baseline_seeds(master_seed: int, n: int = 3) -> list[int]:
    return replicate_seeds(master_seed, _BASELINE_TAG, n)


def score_replicates(results, config: TunerConfig) -> dict:
    """Best-of-three bookkeeping for one point.

    ``results`` are EvalMetrics (a trained-and-evaluated replicate each) or
    plain floats (an objective with no metrics, used for synthetic runs).
    """
    if all(isinstance(r, EvalMetrics) for r in results):
        objs = [objective(m, config.targets, config.weights).total for m in results]
        best = int(np.argmin(objs))
        var = alert_variance([m.p_alert for m in results]) if len(results) == 3 else 0.0
        return {"model_metrics": [m.to_dict() for m in results], "model_objectives": objs,
                "best_model": best, "metrics": results[best].to_dict(), "alert_variance": var,
                "stable": is_stable(var, config.stability_threshold), "objective": objs[best]}
    objs = [float(r) for r in results]
    best = int(np.argmin(objs))
    return {"model_objectives": objs, "best_model": best, "alert_variance": 0.0,
            "stable": True, "objective": objs[best]}


def run_point(point, iteration: int, provenance: str, evaluate_point: PointEvaluator,
              config: TunerConfig, ei: float | None = None) -> TuningIteration:
    seeds = replicate_seeds(config.master_seed, iteration)
    it = TuningIteration(iteration, point, provenance, seeds=seeds, ei=ei)
    try:
        results = evaluate_point(it.point, seeds)
    except (ArithmeticError, ValueError, RuntimeError) as exc:
        log.warning("iteration %d at %s failed: %s", iteration, it.point, exc)
        it.status, it.error = "FAILED", f"{type(exc).__name__}: {exc}"
        return it
    for k, v in score_replicates(results, config).items():
        setattr(it, k, v)
    return it


def fit_from_ledger(ledger: TuningLedger, config: TunerConfig) -> GpSurrogate:
    """Surrogate on completed points; unstable ones get inflated noise."""
    done = ledger.completed()
    pts = np.array([it.point for it in done])
    y = TRANSFORMS[config.objective_transform][0](np.array([it.objective for it in done]))
    scale = np.array([1.0 if it.stable else 1.0 + it.alert_variance / config.stability_threshold
                      for it in done])
    return gp_fit(pts, y, config.gp, scale, config.warp)


def init_design(config: TunerConfig) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([config.master_seed, 0xD0E]))
    return to_box(latin_hypercube(config.n_init, DIMS, rng), warp=config.warp)


def open_ledger(config: TunerConfig, path=None, extra_header: dict | None = None) -> TuningLedger:
    header = {"format": LEDGER_FORMAT, "tuner": config.to_dict(), **(extra_header or {})}
    if path and Path(path).exists():
        ledger = TuningLedger.load(path)
        if json.loads(dump_json(header)) != ledger.header:
            raise LedgerMismatchError(f"{path} was written with a different configuration")
        return ledger
    ledger = TuningLedger(json.loads(dump_json(header)), path=path)
    if path:
        ledger.save(path)
    return ledger


def tune(config: TunerConfig, evaluate_point: PointEvaluator, ledger_path=None,
         extra_header: dict | None = None, on_iteration=None) -> TuningLedger:
    """LHS initialisation followed by ``budget`` expected-improvement iterations.

    Resumes from ``ledger_path`` when it exists. Every selection uses an rng
    seeded from (master seed, iteration), so a resumed run continues exactly
    as an uninterrupted one would.
    """
    ledger = open_ledger(config, ledger_path, extra_header)
    design = init_design(config)
    total = config.n_init + config.budget
    while len(ledger) < total:
        k = len(ledger)
        if k < config.n_init:
            it = run_point(design[k], k, "LHS_INIT", evaluate_point, config)
        else:
            rng = np.random.default_rng(np.random.SeedSequence([config.master_seed, k, 0x5E1]))
            try:
                surrogate = fit_from_ledger(ledger, config)
                sel = select_next(surrogate, rng, config.n_candidates, config.n_starts)
                point, ei = sel.point, sel.ei
            except ValueError:
                # fewer than two usable points so far: keep exploring at random
                point, ei = tuple(to_box(rng.random(DIMS), warp=config.warp)), None
            it = run_point(point, k, "EI", evaluate_point, config, ei)
        ledger.append(it)
        log.info("iteration %d %s point=%s V=%s", it.iteration, it.status, it.point, it.objective)
        if on_iteration:
            on_iteration(it)
    return ledger


def recommend(ledger: TuningLedger, config: TunerConfig) -> dict:
    """Best evaluated point plus the surrogate's estimate of the minimiser."""
    best = ledger.best()
    out = {"best_iteration": best.iteration if best else None,
           "best_point": list(best.point) if best else None,
           "best_objective": best.objective if best else None,
           "surrogate_minimizer": None, "surrogate_min_mean": None}
    try:
        point, mean = surrogate_minimizer(fit_from_ledger(ledger, config))
    except ValueError:
        return out
    out["surrogate_minimizer"] = list(point)
    out["surrogate_min_mean"] = float(TRANSFORMS[config.objective_transform][1](mean))
    return out


def append_points(ledger: TuningLedger, points, provenance: str, evaluate_point: PointEvaluator,
                  config: TunerConfig) -> TuningLedger:
    """Manual overrides (sweeps, local designs) appended after the automatic loop."""
    for p in np.atleast_2d(points):
        ledger.append(run_point(p, len(ledger), provenance, evaluate_point, config))
    return ledger


class DqnPointEvaluator:
    """Train three replicates at a reward point, then evaluate them one after another.

    Training may fan out over ``workers`` processes; evaluations always run in
    series on the frozen set. With ``weights_dir`` each replicate's weights are
    saved as ``<tag>_r<k>.bin``.
    """

    def __init__(self, dqn_config, encounter_set, sim=None, encounter_config=None,
                 workers: int = 1, weights_dir=None, lookahead: bool = False):
        self.dqn_config = dqn_config
        self.encounter_set = encounter_set
        self.sim = sim
        self.encounter_config = encounter_config
        self.workers = workers
        self.weights_dir = Path(weights_dir) if weights_dir else None
        self.lookahead = lookahead
        self.calls = 0

    def __call__(self, point, seeds, tag: str | None = None) -> list:
        from dataclasses import replace

        from .dqn_trainer import SampledEncounters, train_triplicate
        from .evaluator import evaluate
        from .neural_net import QNetworkPolicy, save_weights
        from .simulator import RewardParams

        reward = RewardParams(*point)
        cfg = replace(self.dqn_config, reward_params=reward)
        factory = None
        if self.encounter_config is not None:
            ec = self.encounter_config
            factory = lambda s: SampledEncounters(  # noqa: E731
                ec, int(np.random.SeedSequence([s, 1]).generate_state(1)[0]))
        results = train_triplicate(cfg, seeds, factory, self.sim, self.workers)
        tag = tag or f"point{self.calls:04d}"
        self.calls += 1
        metrics = []
        for k, res in enumerate(results):
            if self.weights_dir is not None:
                save_weights(res.weights, self.weights_dir / f"{tag}_r{k}.bin",
                             extra={"reward": list(point), "seed": res.seed})
            metrics.append(evaluate(QNetworkPolicy(res.weights), self.encounter_set, reward,
                                    self.lookahead, self.sim))
        return metrics


def evaluate_baseline(evaluate_point, config: TunerConfig, point=(-0.01, -0.05, -0.05)) -> dict:
    """The untuned reference point, scored exactly like a tuner iteration."""
    seeds = baseline_seeds(config.master_seed)
    results = evaluate_point(tuple(point), seeds)
    out = {"point": list(point), "seeds": seeds}
    out.update(score_replicates(results, config))
    return out
