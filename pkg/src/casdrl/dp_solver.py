"""Tabular value-iteration baseline on a discretised encounter MDP.

The desk-scale tables decompose the encounter into a horizontal table
(bearing, range, relative heading) and a vertical one (relative altitude,
vertical closure, time to closest approach). Each table also carries the
previous advisory so alert, reversal and cease-alert costs are well defined,
plus one absorbing state. The policy sums the two tables' Q rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from .actions import N_ACTIONS
from .container import FormatError, atomic_write, dump_json, pack, unpack
from .encounters import EncounterConfig
from .kinematics import ALT, HDG, SPD, STATE_WIDTH, VRATE, X, Y, propagate_batch
from .simulator import (ALT_SCALE, ONE_HOT, POS_SCALE, TCPA_SCALE, VRATE_SCALE, RewardParams,
                        SimConfig, classify_batch, observe_batch, reward_batch)

QTABLE_MAGIC = b"CASQTAB\x00"
QTABLE_VERSION = 1
MAX_STATES = 1_000_000


class StateBudgetError(ValueError):
    pass


# ----------------------------------------------------------------------------
# grids

@dataclass(frozen=True)
class Axis:
    """Ordered bin centers; ``period`` makes the axis wrap (angles)."""

    name: str
    centers: tuple
    period: float | None = None

    def __post_init__(self):
        c = tuple(float(v) for v in self.centers)
        if len(c) < 1 or any(b <= a for a, b in zip(c, c[1:])):
            raise ValueError(f"axis {self.name}: centers must be strictly increasing")
        if self.period is not None and not (self.period > 0 and c[-1] - c[0] < self.period):
            raise ValueError(f"axis {self.name}: centers must fit inside one period")
        object.__setattr__(self, "centers", c)

    @classmethod
    def uniform(cls, name, lo, hi, bins, periodic=False) -> "Axis":
        if periodic:
            step = (hi - lo) / bins
            return cls(name, tuple(lo + step * np.arange(bins)), hi - lo)
        return cls(name, tuple(np.linspace(lo, hi, bins)))

    def __len__(self):
        return len(self.centers)

    def index(self, values) -> np.ndarray:
        """Nearest center; exact midpoints go to the lower bin; clamp outside."""
        c = np.asarray(self.centers)
        v = np.asarray(values, dtype=np.float64)
        if self.period is None:
            mids = 0.5 * (c[1:] + c[:-1])
            return np.searchsorted(mids, v, side="left").astype(np.int64)
        p, n = self.period, len(c)
        v = c[0] + np.mod(v - c[0], p)
        ext = np.append(c, c[0] + p)
        mids = 0.5 * (ext[1:] + ext[:-1])
        return (np.searchsorted(mids, v, side="left") % n).astype(np.int64)

    def to_dict(self) -> dict:
        return {"name": self.name, "centers": list(self.centers), "period": self.period}


@dataclass(frozen=True)
class Grid:
    axes: tuple

    def __post_init__(self):
        object.__setattr__(self, "axes", tuple(self.axes))

    @property
    def shape(self) -> tuple:
        return tuple(len(a) for a in self.axes)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.shape))

    def discretize(self, values) -> np.ndarray:
        """Row-major flat cell index for an (n, dims) array of feature values."""
        v = np.atleast_2d(np.asarray(values, dtype=np.float64))
        idx = [ax.index(v[:, i]) for i, ax in enumerate(self.axes)]
        return np.ravel_multi_index(idx, self.shape)

    def centers(self) -> np.ndarray:
        mesh = np.meshgrid(*[np.asarray(a.centers) for a in self.axes], indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def half_widths(self) -> np.ndarray:
        """Per-cell, per-axis jitter half-width (half the gap to the nearest neighbor)."""
        cols = []
        for ax in self.axes:
            c = np.asarray(ax.centers)
            if len(c) == 1:
                w = np.zeros(1)
            elif ax.period is not None:
                ext = np.concatenate([[c[-1] - ax.period], c, [c[0] + ax.period]])
                w = 0.5 * np.minimum(np.diff(ext)[:-1], np.diff(ext)[1:])
            else:
                d = np.diff(c)
                w = 0.5 * np.minimum(np.append(d, d[-1]), np.insert(d, 0, d[0]))
            cols.append(w)
        mesh = np.meshgrid(*cols, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def to_dict(self) -> dict:
        return {"axes": [a.to_dict() for a in self.axes]}

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        return cls(tuple(Axis(a["name"], tuple(a["centers"]), a["period"]) for a in d["axes"]))


def discretize(values, grid: Grid) -> np.ndarray:
    return grid.discretize(values)


RANGE_CENTERS = (0.0, 500.0, 1000.0, 2000.0, 3000.0, 4500.0, 6000.0, 8000.0, 10000.0, 13000.0,
                 16000.0, 20000.0, 25000.0, 32000.0, 40000.0)


def horizontal_grid(bins=(15, 15, 12)) -> Grid:
    nb, nr, nh = bins
    rng = RANGE_CENTERS if nr == len(RANGE_CENTERS) else tuple(np.geomspace(250, 40000, nr) - 250)
    return Grid((Axis.uniform("bearing", -math.pi, math.pi, nb, periodic=True),
                 Axis("range", rng),
                 Axis.uniform("rel_heading", -math.pi, math.pi, nh, periodic=True)))


def vertical_grid(bins=(15, 15, 12)) -> Grid:
    na, nc, nt = bins
    return Grid((Axis.uniform("rel_alt", -1500.0, 1500.0, na),
                 Axis.uniform("v_closure", -4000.0 / 60, 4000.0 / 60, nc),
                 Axis.uniform("tcpa", 0.0, 60.0, nt)))


def joint_grid(bins=(4, 4, 3)) -> Grid:
    nr, nb, na = bins
    return Grid((Axis.uniform("range", 0.0, 6000.0, nr),
                 Axis.uniform("bearing", -math.pi, math.pi, nb, periodic=True),
                 Axis.uniform("rel_alt", -600.0, 600.0, na)))


GRIDS = {"horizontal": horizontal_grid, "vertical": vertical_grid, "joint": joint_grid}


def features(obs: np.ndarray, mode: str) -> np.ndarray:
    """Table coordinates (physical units) read back from 25-wide observations."""
    obs = np.atleast_2d(obs)
    fwd, right = obs[:, 0] * POS_SCALE, obs[:, 1] * POS_SCALE
    bearing = np.arctan2(right, fwd)
    rng = obs[:, 9] * POS_SCALE
    if mode == "horizontal":
        return np.stack([bearing, rng, np.arctan2(obs[:, 3], obs[:, 4])], axis=1)
    if mode == "vertical":
        return np.stack([obs[:, 2] * ALT_SCALE, obs[:, 11] * VRATE_SCALE, obs[:, 12] * TCPA_SCALE],
                        axis=1)
    if mode == "joint":
        return np.stack([rng, bearing, obs[:, 2] * ALT_SCALE], axis=1)
    raise ValueError(f"unknown table mode {mode!r}")


def previous_action(obs: np.ndarray) -> np.ndarray:
    return np.argmax(np.atleast_2d(obs)[:, ONE_HOT:ONE_HOT + N_ACTIONS], axis=1)


# ----------------------------------------------------------------------------
# MDP and value iteration

@dataclass
class DiscreteMdp:
    """``transition[a]`` is an (n, n) row-stochastic CSR matrix."""

    n_states: int
    transition: list
    reward: np.ndarray
    gamma: float

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie strictly inside (0, 1)")
        self.reward = np.asarray(self.reward, dtype=np.float64)
        if self.reward.shape != (self.n_states, len(self.transition)):
            raise ValueError(f"reward must be ({self.n_states}, {len(self.transition)})")
        mats = []
        for p in self.transition:
            p = sparse.csr_matrix(p, dtype=np.float64)
            if p.shape != (self.n_states, self.n_states):
                raise ValueError("transition matrices must be (n_states, n_states)")
            if p.nnz and p.data.min() < 0:
                raise ValueError("negative transition probability")
            sums = np.asarray(p.sum(axis=1)).ravel()
            if np.max(np.abs(sums - 1.0)) > 1e-9:
                raise ValueError("every (s, a) row must sum to 1")
            mats.append(p)
        self.transition = mats

    @property
    def n_actions(self) -> int:
        return len(self.transition)

    @classmethod
    def from_dense(cls, p, r, gamma) -> "DiscreteMdp":
        """From a dense (A, S, S) tensor and (S, A) reward table."""
        p = np.asarray(p, dtype=np.float64)
        return cls(p.shape[1], [sparse.csr_matrix(p[a]) for a in range(p.shape[0])], r, gamma)


@dataclass
class ValueTable:
    values: np.ndarray
    iteration_count: int
    residual: float
    converged: bool
    residuals: list = field(default_factory=list)


def bellman_q(mdp: DiscreteMdp, v: np.ndarray) -> np.ndarray:
    ev = np.stack([p @ v for p in mdp.transition], axis=1)
    return mdp.reward + mdp.gamma * ev


def value_iteration(mdp: DiscreteMdp, tol: float = 1e-9, max_sweeps: int = 10_000) -> ValueTable:
    """Synchronous sweeps from V = 0 until the max-norm change drops below tol."""
    v = np.zeros(mdp.n_states)
    hist = []
    for sweep in range(1, max_sweeps + 1):
        nv = bellman_q(mdp, v).max(axis=1)
        res = float(np.max(np.abs(nv - v))) if len(v) else 0.0
        hist.append(res)
        v = nv
        if res < tol:
            return ValueTable(v, sweep, res, True, hist)
    return ValueTable(v, max_sweeps, hist[-1] if hist else 0.0, False, hist)


@dataclass
class QTable:
    q: np.ndarray
    grid: Grid | None = None
    mode: str = "custom"
    meta: dict = field(default_factory=dict)

    @property
    def n_states(self) -> int:
        return self.q.shape[0]


def q_from_v(mdp: DiscreteMdp, v, grid: Grid | None = None, mode: str = "custom") -> QTable:
    return QTable(bellman_q(mdp, np.asarray(v, dtype=np.float64)), grid, mode)


def greedy_policy(qtable: QTable):
    """State index -> action with the largest Q (lowest index on ties)."""
    table = np.argmax(qtable.q, axis=1)

    def policy(states):
        return table[np.asarray(states, dtype=np.int64)]

    policy.table = table
    return policy


# ----------------------------------------------------------------------------
# building the encounter MDP

def _sample_pairs(cells: np.ndarray, mode: str, enc: EncounterConfig, rng) -> tuple:
    """Own/intruder states realising given feature values; hidden variables random."""
    n = len(cells)
    lo_v, hi_v = enc.vrate_min, enc.vrate_max
    spd = rng.uniform(enc.speed_min, enc.speed_max, size=(2, n))
    own = np.zeros((n, STATE_WIDTH))
    intr = np.zeros((n, STATE_WIDTH))
    own[:, SPD], intr[:, SPD] = spd
    own[:, ALT] = 5000.0
    if mode == "horizontal":
        bearing, rng_ft, rel_h = cells.T
        alt_off = np.zeros(n)
        own[:, VRATE] = intr[:, VRATE] = 0.0
    elif mode == "vertical":
        alt_off, closure, tcpa = cells.T
        own[:, VRATE] = np.clip(rng.uniform(lo_v, hi_v, n) / 60.0, -1500 / 60.0, 1500 / 60.0)
        intr[:, VRATE] = own[:, VRATE] + closure
        # head-on geometry timed so closest approach is tcpa seconds away
        rel_h = np.full(n, math.pi)
        bearing = np.zeros(n)
        rng_ft = np.maximum(tcpa, 0.0) * (spd[0] + spd[1])
    else:
        rng_ft, bearing, alt_off = cells.T
        rel_h = rng.uniform(-math.pi, math.pi, n)
        own[:, VRATE] = rng.uniform(lo_v, hi_v, n) / 60.0 / 2
        intr[:, VRATE] = rng.uniform(lo_v, hi_v, n) / 60.0 / 2
    intr[:, X] = rng_ft * np.cos(bearing)
    intr[:, Y] = rng_ft * np.sin(bearing)
    intr[:, ALT] = own[:, ALT] + alt_off
    intr[:, HDG] = np.mod(rel_h, 2 * math.pi)
    return own, intr


def build_mdp_from_simulator(grid: Grid, mode: str, params: RewardParams | None = None,
                             sim: SimConfig | None = None, samples_per_cell: int = 16,
                             rng=None, gamma: float = 0.95,
                             enc: EncounterConfig | None = None) -> DiscreteMdp:
    """Monte Carlo estimate of the tabular encounter MDP.

    States are (cell, previous advisory) plus one absorbing state reached on
    NMAC (or, in the vertical table, once closest approach has passed).
    Samples start at jittered cell centers, the ownship flies each action for
    one step and the intruder draws its action from the chain's stationary
    distribution.
    """
    params = params or RewardParams()
    sim = sim or SimConfig()
    enc = enc or EncounterConfig()
    rng = np.random.default_rng(rng)
    g = grid.n_cells
    n_states = g * N_ACTIONS + 1
    if n_states > MAX_STATES:
        raise StateBudgetError(f"grid needs {n_states} states, budget is {MAX_STATES}")
    if samples_per_cell < 1:
        raise ValueError("samples_per_cell must be >= 1")
    k = samples_per_cell
    stationary = enc.chain().stationary()
    centers = np.repeat(grid.centers(), k, axis=0)
    width = np.repeat(grid.half_widths(), k, axis=0)
    jitter = rng.uniform(-1.0, 1.0, size=centers.shape) * width if k > 1 else 0.0
    pts = centers + jitter
    src = np.repeat(np.arange(g), k)
    absorb = n_states - 1
    prev_all = np.arange(N_ACTIONS)

    mats = []
    reward = np.zeros((n_states, N_ACTIONS))
    for a in range(N_ACTIONS):
        own, intr = _sample_pairs(pts, mode, enc, rng)
        intr_act = rng.choice(N_ACTIONS, size=len(pts), p=stationary)
        both = propagate_batch(np.concatenate([own, intr]),
                               np.concatenate([np.full(len(pts), a), intr_act]), sim.dt, sim.kinematics)
        own2, intr2 = both[:len(pts)], both[len(pts):]
        obs = observe_batch(own2, intr2, np.full(len(pts), a))
        feat = features(obs, mode)
        dh = np.abs(intr2[:, ALT] - own2[:, ALT])
        hr = np.hypot(intr2[:, X] - own2[:, X], intr2[:, Y] - own2[:, Y])
        kin = sim.kinematics
        if mode == "horizontal":
            nmac = hr < kin.nmac_horizontal
            done = nmac
        elif mode == "vertical":
            nmac = (dh < kin.nmac_vertical) & (np.abs(feat[:, 2]) <= sim.dt)
            done = nmac | (feat[:, 2] < -sim.dt)
        else:
            nmac = (hr < kin.nmac_horizontal) & (dh < kin.nmac_vertical)
            done = nmac
        dst = grid.discretize(feat)
        p_nmac = np.bincount(src, weights=nmac, minlength=g) / k
        # geometry transition counts: (cell -> cell') and (cell -> absorbing)
        live = ~done
        key = src[live] * g + dst[live]
        uk, cnt = np.unique(key, return_counts=True)
        r_geo, c_geo = uk // g, uk % g
        p_abs = np.bincount(src[done], minlength=g) / k
        rows = (r_geo[:, None] * N_ACTIONS + prev_all[None, :]).ravel()
        cols = np.repeat(c_geo * N_ACTIONS + a, N_ACTIONS)
        vals = np.repeat(cnt / k, N_ACTIONS)
        has_abs = np.flatnonzero(p_abs > 0)
        rows = np.concatenate([rows, (has_abs[:, None] * N_ACTIONS + prev_all[None, :]).ravel(),
                               [absorb]])
        cols = np.concatenate([cols, np.full(len(has_abs) * N_ACTIONS, absorb), [absorb]])
        vals = np.concatenate([vals, np.repeat(p_abs[has_abs], N_ACTIONS), [1.0]])
        mats.append(sparse.csr_matrix((vals, (rows, cols)), shape=(n_states, n_states)))
        ev = classify_batch(prev_all, np.full(N_ACTIONS, a), np.zeros(N_ACTIONS, dtype=bool))
        op_cost = reward_batch(ev, params)
        reward[:absorb, a] = (op_cost[None, :] + params.nmac_cost * p_nmac[:, None]).ravel()
    return DiscreteMdp(n_states, mats, reward, gamma)


def solve_table(mode: str, params: RewardParams | None = None, bins=None, samples_per_cell=16,
                seed: int = 0, gamma: float = 0.95, tol: float = 1e-8, max_sweeps: int = 10_000,
                sim: SimConfig | None = None) -> tuple[QTable, ValueTable]:
    grid = GRIDS[mode](bins) if bins else GRIDS[mode]()
    mdp = build_mdp_from_simulator(grid, mode, params, sim, samples_per_cell,
                                   np.random.SeedSequence([seed, list(GRIDS).index(mode)]), gamma)
    vt = value_iteration(mdp, tol, max_sweeps)
    qt = q_from_v(mdp, vt.values, grid, mode)
    qt.meta = {"iterations": vt.iteration_count, "residual": vt.residual,
               "converged": vt.converged, "gamma": gamma, "samples_per_cell": samples_per_cell,
               "seed": seed, "reward_params": (params or RewardParams()).to_dict()}
    return qt, vt


class TablePolicy:
    """Greedy advisory from the summed Q rows of one or more tables."""

    def __init__(self, tables):
        self.tables = list(tables)
        for t in self.tables:
            if t.grid is None or t.n_states != t.grid.n_cells * N_ACTIONS + 1:
                raise ValueError("table policy needs grid-backed encounter tables")

    def state_index(self, table: QTable, obs) -> np.ndarray:
        return table.grid.discretize(features(obs, table.mode)) * N_ACTIONS + previous_action(obs)

    def q_values(self, obs) -> np.ndarray:
        obs = np.atleast_2d(obs)
        return sum(t.q[self.state_index(t, obs)] for t in self.tables)

    def __call__(self, obs) -> np.ndarray:
        return np.argmax(self.q_values(obs), axis=1)


# ----------------------------------------------------------------------------
# files

def encode_tables(tables) -> bytes:
    header = {"tables": [], "dtype": "<f8"}
    body = []
    for t in tables:
        header["tables"].append({"mode": t.mode, "grid": t.grid.to_dict() if t.grid else None,
                                 "shape": list(t.q.shape)})
        body.append(np.ascontiguousarray(t.q, dtype="<f8").tobytes())
    return pack(QTABLE_MAGIC, QTABLE_VERSION, header, b"".join(body))


def decode_tables(blob: bytes) -> list[QTable]:
    header, body = unpack(blob, QTABLE_MAGIC, QTABLE_VERSION)
    out, pos = [], 0
    for t in header["tables"]:
        n = int(np.prod(t["shape"])) * 8
        if pos + n > len(body):
            raise FormatError("table body shorter than its declared shape")
        q = np.frombuffer(body[pos:pos + n], dtype="<f8").reshape(t["shape"]).astype(np.float64)
        pos += n
        out.append(QTable(q, Grid.from_dict(t["grid"]) if t["grid"] else None, t["mode"]))
    if pos != len(body):
        raise FormatError("trailing bytes after the last table")
    return out


def save_tables(tables, path) -> None:
    path = Path(path)
    atomic_write(path, encode_tables(tables))
    meta = {"format": "casdrl-qtable", "version": QTABLE_VERSION,
            "tables": [{"mode": t.mode, "n_states": t.n_states, **t.meta} for t in tables]}
    atomic_write(path.with_name(path.name + ".json"), dump_json(meta) + "\n")


def load_tables(path) -> list[QTable]:
    return decode_tables(Path(path).read_bytes())
