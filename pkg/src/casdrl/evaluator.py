"""Policy evaluation, metric scoring, timing harness and the stability screen."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .container import atomic_write, dump_json
from .encounters import EncounterSet
from .simulator import RewardParams, SimConfig, simulate_batch

log = logging.getLogger(__name__)

# Shard size is fixed so that results never depend on how many workers run.
EVAL_CHUNK = 256
STABILITY_THRESHOLD = 0.01


class EvaluationError(RuntimeError):
    def __init__(self, encounter_ids, cause):
        self.encounter_ids = list(encounter_ids)
        super().__init__(f"simulation failed in encounters {self.encounter_ids[0]}.."
                         f"{self.encounter_ids[-1]}: {cause}")


@dataclass(frozen=True)
class EvalMetrics:
    p_nmac: float
    p_alert: float
    p_reversal: float
    encounter_count: int
    n_nmac: int
    n_alert: int
    n_reversal: int

    def __post_init__(self):
        if self.encounter_count < 1:
            raise ValueError("metrics need at least one encounter")
        for name in ("nmac", "alert", "reversal"):
            p, k = getattr(self, "p_" + name), getattr(self, "n_" + name)
            if not 0 <= k <= self.encounter_count or p != k / self.encounter_count:
                raise ValueError(f"inconsistent {name} count/ratio")

    @classmethod
    def from_counts(cls, n: int, n_nmac: int, n_alert: int, n_reversal: int) -> "EvalMetrics":
        if n < 1:
            raise ValueError("metrics need at least one encounter")
        return cls(n_nmac / n, n_alert / n, n_reversal / n, n, n_nmac, n_alert, n_reversal)

    def rates(self) -> tuple[float, float, float]:
        return (self.p_nmac, self.p_alert, self.p_reversal)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalMetrics":
        return cls.from_counts(int(d["encounter_count"]), int(d["n_nmac"]), int(d["n_alert"]),
                               int(d["n_reversal"]))


@dataclass(frozen=True)
class MetricRates:
    """Bare metric triple (e.g. reported rates that come without counts)."""

    p_nmac: float
    p_alert: float
    p_reversal: float

    def rates(self) -> tuple[float, float, float]:
        return (self.p_nmac, self.p_alert, self.p_reversal)


@dataclass(frozen=True)
class MetricTargets:
    p_nmac_target: float = 9.8268e-4
    p_alert_target: float = 0.1946
    p_reversal_target: float = 0.00290

    def __post_init__(self):
        if not all(v > 0 and math.isfinite(v) for v in self.as_tuple()):
            raise ValueError("metric targets must be positive")

    def as_tuple(self):
        return (self.p_nmac_target, self.p_alert_target, self.p_reversal_target)


@dataclass(frozen=True)
class ObjectiveWeights:
    w_nmac: float = 0.05
    w_alert: float = 0.80
    w_reversal: float = 0.15

    def __post_init__(self):
        if not all(v >= 0 and math.isfinite(v) for v in self.as_tuple()):
            raise ValueError("objective weights must be non-negative")

    def as_tuple(self):
        return (self.w_nmac, self.w_alert, self.w_reversal)

    def __add__(self, other: "ObjectiveWeights") -> "ObjectiveWeights":
        return ObjectiveWeights(*(a + b for a, b in zip(self.as_tuple(), other.as_tuple())))


METRIC_NAMES = ("p_nmac", "p_alert", "p_reversal")


@dataclass(frozen=True)
class ObjectiveReport:
    ratios: tuple
    scores: tuple
    contributions: tuple
    total: float

    def to_dict(self) -> dict:
        return {"V": self.total,
                **{f"{k}_{m}": v for m, r, s, c in zip(METRIC_NAMES, self.ratios, self.scores,
                                                        self.contributions)
                   for k, v in (("R", r), ("S", s), ("contribution", c))}}


def metric_score(m: float, m_target: float) -> tuple[float, float]:
    """Ratio to target and its quadratic score ``R**2 / 2 - 1/2``."""
    if not m_target > 0:
        raise ValueError(f"metric target must be positive, got {m_target}")
    if m < 0:
        raise ValueError(f"metric must be non-negative, got {m}")
    r = m / m_target
    return r, r * r / 2.0 - 0.5


def objective(metrics, targets: MetricTargets | None = None,
              weights: ObjectiveWeights | None = None) -> ObjectiveReport:
    """Weighted sum of per-metric scores (lower is better, 0 means on target)."""
    targets = targets or MetricTargets()
    weights = weights or ObjectiveWeights()
    ratios, scores, contrib = [], [], []
    for m, t, w in zip(metrics.rates(), targets.as_tuple(), weights.as_tuple()):
        r, s = metric_score(m, t)
        ratios.append(r)
        scores.append(s)
        contrib.append(w * s)
    return ObjectiveReport(tuple(ratios), tuple(scores), tuple(contrib), math.fsum(contrib))


# ----------------------------------------------------------------------------
# evaluation

def _eval_chunk(args):
    specs, chain, policy, params, sim, lookahead = args
    try:
        outs, _ = simulate_batch(specs, chain, policy, params, sim, lookahead)
    except Exception as exc:
        raise EvaluationError([s.id for s in specs], exc) from exc
    return (sum(o.any_nmac for o in outs), sum(o.any_alert for o in outs),
            sum(o.any_reversal for o in outs))


def evaluate(policy, encounter_set: EncounterSet, reward_params: RewardParams | None = None,
             lookahead: bool = False, sim: SimConfig | None = None, workers: int = 1,
             chunk: int = EVAL_CHUNK) -> EvalMetrics:
    """Per-encounter incidence of NMAC, alert and reversal over the whole set."""
    specs = encounter_set.specs
    if not specs:
        raise ValueError("cannot evaluate on an empty encounter set")
    params = reward_params or RewardParams()
    sim = sim or SimConfig()
    jobs = [(specs[i:i + chunk], encounter_set.chain, policy, params, sim, lookahead)
            for i in range(0, len(specs), chunk)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            counts = list(ex.map(_eval_chunk, jobs))
    else:
        counts = [_eval_chunk(j) for j in jobs]
    tot = np.sum(np.array(counts, dtype=np.int64), axis=0)
    return EvalMetrics.from_counts(len(specs), *(int(c) for c in tot))


def alert_variance(rates) -> float:
    """Population variance of the three replicate alert rates."""
    rates = [float(r) for r in rates]
    if len(rates) != 3:
        raise ValueError("alert_variance takes exactly three rates")
    if not all(0.0 <= r <= 1.0 for r in rates):
        raise ValueError("alert rates must lie in [0, 1]")
    return float(np.var(rates))


def is_stable(variance: float, threshold: float = STABILITY_THRESHOLD) -> bool:
    return variance <= threshold


def rescore_ledger(entries, weights: ObjectiveWeights,
                   targets: MetricTargets | None = None) -> list[dict]:
    """Recompute V (and its contributions) for ledger entries under new weights.

    ``entries`` are dicts with a ``metrics`` mapping; metrics are copied
    untouched. The result is sorted by the new V (entries without metrics,
    e.g. failed points, go last in their original order).
    """
    out = []
    for e in entries:
        e = json.loads(json.dumps(e))
        if e.get("metrics"):
            rep = objective(EvalMetrics.from_dict(e["metrics"]), targets, weights)
            e["objective"] = rep.total
            e["objective_report"] = rep.to_dict()
        out.append(e)
    scored = sorted((e for e in out if e.get("metrics")), key=lambda e: e["objective"])
    return scored + [e for e in out if not e.get("metrics")]


def write_metrics_json(metrics: EvalMetrics, path, report: ObjectiveReport | None = None,
                       extra: dict | None = None) -> None:
    doc = {"metrics": metrics.to_dict()}
    if report is not None:
        doc["objective"] = report.to_dict()
    if extra:
        doc.update(extra)
    atomic_write(path, dump_json(doc) + "\n")


# ----------------------------------------------------------------------------
# timing harness

def timing_per_encounter(t_n: float, t_1: float, n: int) -> float:
    """Per-encounter dynamics time with the fixed framework overhead removed."""
    if n < 2:
        raise ValueError("timing needs n >= 2 encounters")
    return (t_n - t_1) / (n - 1)


def average_repetitions(times) -> float:
    times = [float(t) for t in times]
    if not times:
        raise ValueError("no repetitions")
    return math.fsum(times) / len(times)


def speedup(baseline: float, improved: float) -> float:
    if not improved > 0:
        raise ValueError("improved time must be positive")
    return baseline / improved


@dataclass(frozen=True)
class TimingRow:
    name: str
    repetitions: tuple
    average: float
    speedup: float | None = None


def timing_table(reps_by_name: dict, baseline: str | None = None) -> list[TimingRow]:
    """Average each variant's repetitions; speedups are relative to ``baseline``."""
    rows = []
    base = average_repetitions(reps_by_name[baseline]) if baseline else None
    for name, reps in reps_by_name.items():
        avg = average_repetitions(reps)
        sp = speedup(base, avg) if baseline and name != baseline else None
        rows.append(TimingRow(name, tuple(float(r) for r in reps), avg, sp))
    return rows


@dataclass
class BenchVariant:
    name: str
    policy: object
    lookahead: bool = False


def measure_variant(variant: BenchVariant, encounter_set: EncounterSet, n: int,
                    repetitions: int = 3, params: RewardParams | None = None,
                    sim: SimConfig | None = None, clock=time.perf_counter) -> list[float]:
    """One warm-up, then ``repetitions`` measurements of T over the first n encounters."""
    if n < 2 or n > len(encounter_set):
        raise ValueError(f"bench n must be in [2, {len(encounter_set)}]")
    params = params or RewardParams()
    specs = encounter_set.specs[:n]
    chain = encounter_set.chain

    def wall(sub):
        t0 = clock()
        simulate_batch(sub, chain, variant.policy, params, sim, variant.lookahead)
        return clock() - t0

    wall(specs)
    wall(specs[:1])
    out = []
    for _ in range(repetitions):
        t_n = wall(specs)
        t_1 = wall(specs[:1])
        out.append(timing_per_encounter(t_n, t_1, n))
    return out


def run_bench(variants, encounter_set: EncounterSet, n: int, repetitions: int = 3,
              params: RewardParams | None = None, sim: SimConfig | None = None) -> list[TimingRow]:
    reps = {v.name: measure_variant(v, encounter_set, n, repetitions, params, sim) for v in variants}
    return timing_table(reps, baseline=variants[0].name)


def write_bench_csv(rows: list[TimingRow], path) -> None:
    width = max((len(r.repetitions) for r in rows), default=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant"] + [f"rep{i + 1}_s" for i in range(width)] + ["avg_s", "speedup"])
        for r in rows:
            w.writerow([r.name] + [repr(t) for t in r.repetitions] + [repr(r.average),
                                                                      "" if r.speedup is None else repr(r.speedup)])


def plot_bench(rows: list[TimingRow], path) -> None:
    """Bar chart of the averaged per-encounter times."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    names = [r.name for r in rows]
    ax.bar(names, [r.average for r in rows], color="#4c72b0")
    for i, r in enumerate(rows):
        if r.speedup is not None:
            ax.annotate(f"{r.speedup:.2f}x", (i, r.average), ha="center", va="bottom")
    ax.set_ylabel("time per encounter (s)")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
