"""1 Hz encounter simulation: advisories in, rewards and observations out."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .actions import CLEAR_INDEX, N_ACTIONS, CombinedAction, Horizontal, Vertical
from .encounters import EncounterSpec, IntruderChain
from .kinematics import (ALT, HDG, SPD, STATE_WIDTH, TURN, VRATE, X, Y, AircraftState,
                         Kinematics, nmac_batch, propagate_batch)

OBS_WIDTH = 25
ONE_HOT = 16  # first slot of the previous-action block

# normalisers for the observation layout
POS_SCALE = 10_000.0
ALT_SCALE = 1_000.0
SPEED_SCALE = 500.0
VRATE_SCALE = 2_000.0
TCPA_SCALE = 60.0
TURN_SCALE = 0.05
ALERT_STEPS_SCALE = 20.0

Policy = Callable[[np.ndarray], np.ndarray]


class PolicyContractError(ValueError):
    """A policy returned something other than one action index in 0..8 per row."""


@dataclass(frozen=True)
class RewardParams:
    alert_cost: float = -0.01
    reversal_cost: float = -0.05
    cease_alert_cost: float = -0.05
    nmac_cost: float = -1.0

    def __post_init__(self):
        for name in ("alert_cost", "reversal_cost", "cease_alert_cost"):
            v = getattr(self, name)
            if not (math.isfinite(v) and -1.0 <= v <= 0.0):
                raise ValueError(f"{name} must lie in the domain [-1, 0], got {v}")
        if self.nmac_cost != -1.0:
            raise ValueError("nmac_cost is fixed at -1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_point(cls, point) -> "RewardParams":
        a, r, c = (float(v) for v in point)
        return cls(a, r, c)

    def as_point(self) -> tuple[float, float, float]:
        return (self.alert_cost, self.reversal_cost, self.cease_alert_cost)


@dataclass(frozen=True)
class StepEvents:
    nmac: bool = False
    alert: bool = False
    reversal_v: bool = False
    reversal_h: bool = False
    cease_alert: bool = False

    @property
    def reversal(self) -> bool:
        return self.reversal_v or self.reversal_h


@dataclass(frozen=True)
class Transition:
    obs: np.ndarray
    action: int
    reward: float
    next_obs: np.ndarray
    terminal: bool


@dataclass
class EncounterOutcome:
    """Per-encounter aggregate used by the metrics."""

    any_nmac: bool = False
    any_alert: bool = False
    any_reversal: bool = False
    any_cease_alert: bool = False
    nmac_steps: int = 0
    alert_steps: int = 0
    reversal_steps: int = 0
    steps: int = 0
    total_reward: float = 0.0


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1.0
    terminate_on_nmac: bool = True
    lookahead_steps: int = 10
    kinematics: Kinematics = field(default_factory=Kinematics)


# ----------------------------------------------------------------------------
# events and rewards

def classify_batch(prev, curr, nmac) -> dict[str, np.ndarray]:
    prev = np.asarray(prev)
    curr = np.asarray(curr)
    pv, ph = prev // 3, prev % 3
    cv, ch = curr // 3, curr % 3
    return {
        "nmac": np.asarray(nmac, dtype=bool),
        "alert": curr != CLEAR_INDEX,
        # CLIMB=0 / DESCEND=2 and LEFT=0 / RIGHT=2 are the opposed pairs
        "reversal_v": (pv != 1) & (cv != 1) & (pv != cv),
        "reversal_h": (ph != 1) & (ch != 1) & (ph != ch),
        "cease_alert": (prev != CLEAR_INDEX) & (curr == CLEAR_INDEX),
    }


def classify_events(prev: CombinedAction, curr: CombinedAction, nmac: bool) -> StepEvents:
    ev = classify_batch(np.array([prev.index]), np.array([curr.index]), [nmac])
    return StepEvents(**{k: bool(v[0]) for k, v in ev.items()})


def reward_batch(ev: dict, params: RewardParams) -> np.ndarray:
    # reversal is one cost category even when both axes flip
    return (params.nmac_cost * ev["nmac"]
            + params.alert_cost * ev["alert"]
            + params.reversal_cost * (ev["reversal_v"] | ev["reversal_h"])
            + params.cease_alert_cost * ev["cease_alert"])


def reward(events: StepEvents, params: RewardParams) -> float:
    ev = {k: np.array([v]) for k, v in asdict(events).items()}
    return float(reward_batch(ev, params)[0])


# ----------------------------------------------------------------------------
# observations

def observe_batch(own: np.ndarray, intr: np.ndarray, prev, alert_steps=None) -> np.ndarray:
    """25-wide observations, intruder expressed in the ownship body frame."""
    n = len(own)
    prev = np.asarray(prev, dtype=np.int64)
    alert_steps = np.zeros(n) if alert_steps is None else np.asarray(alert_steps, dtype=np.float64)
    c, s = np.cos(own[:, HDG]), np.sin(own[:, HDG])
    dx = intr[:, X] - own[:, X]
    dy = intr[:, Y] - own[:, Y]
    fwd = dx * c + dy * s
    right = -dx * s + dy * c
    vx = intr[:, SPD] * np.cos(intr[:, HDG]) - own[:, SPD] * c
    vy = intr[:, SPD] * np.sin(intr[:, HDG]) - own[:, SPD] * s
    vf = vx * c + vy * s
    vr = -vx * s + vy * c
    rng = np.hypot(fwd, right)
    v2 = vf * vf + vr * vr
    closing = fwd * vf + right * vr
    range_rate = np.where(rng > 1e-9, closing / np.where(rng > 1e-9, rng, 1.0), 0.0)
    moving = v2 > 1e-12
    tcpa = np.where(moving, -closing / np.where(moving, v2, 1.0), 0.0)
    miss = np.where(moving, (fwd * vr - right * vf) / np.sqrt(np.where(moving, v2, 1.0)), rng)
    rel_h = intr[:, HDG] - own[:, HDG]

    obs = np.zeros((n, OBS_WIDTH))
    obs[:, 0] = fwd / POS_SCALE
    obs[:, 1] = right / POS_SCALE
    obs[:, 2] = (intr[:, ALT] - own[:, ALT]) / ALT_SCALE
    obs[:, 3] = np.sin(rel_h)
    obs[:, 4] = np.cos(rel_h)
    obs[:, 5] = own[:, SPD] / SPEED_SCALE
    obs[:, 6] = intr[:, SPD] / SPEED_SCALE
    obs[:, 7] = own[:, VRATE] / VRATE_SCALE
    obs[:, 8] = intr[:, VRATE] / VRATE_SCALE
    obs[:, 9] = rng / POS_SCALE
    obs[:, 10] = range_rate / SPEED_SCALE
    obs[:, 11] = (intr[:, VRATE] - own[:, VRATE]) / VRATE_SCALE
    obs[:, 12] = np.clip(tcpa, -TCPA_SCALE, TCPA_SCALE) / TCPA_SCALE
    obs[:, 13] = own[:, TURN] / TURN_SCALE
    obs[:, 14] = miss / POS_SCALE
    obs[:, 15] = np.minimum(alert_steps, ALERT_STEPS_SCALE) / ALERT_STEPS_SCALE
    obs[np.arange(n), ONE_HOT + prev] = 1.0
    return obs


def observe(own: AircraftState, intr: AircraftState, prev_action: CombinedAction | int,
            alert_steps: int = 0) -> np.ndarray:
    prev = prev_action.index if isinstance(prev_action, CombinedAction) else int(prev_action)
    return observe_batch(own.as_array()[None], intr.as_array()[None], [prev], [alert_steps])[0]


# ----------------------------------------------------------------------------
# stepping

def check_actions(actions, n: int) -> np.ndarray:
    a = np.asarray(actions)
    if a.shape != (n,) or not np.issubdtype(a.dtype, np.integer):
        if a.shape == (n,) and np.issubdtype(a.dtype, np.floating) and np.all(a == np.round(a)):
            a = a.astype(np.int64)
        else:
            raise PolicyContractError(f"policy must return {n} integer action indices, got {a!r}")
    if np.any((a < 0) | (a >= N_ACTIONS)):
        raise PolicyContractError(f"action index outside 0..8: {a[(a < 0) | (a >= N_ACTIONS)]}")
    return a.astype(np.int64)


class BatchEncounter:
    """Lock-step simulation of ``n`` encounters.

    Finished encounters stay in the arrays but are frozen; ``active`` marks
    the rows still flying. Every call to :meth:`step` is one tick for all
    active rows.
    """

    def __init__(self, own, intr, intruder_actions, durations, params: RewardParams,
                 sim: SimConfig):
        self.own = np.array(own, dtype=np.float64).reshape(-1, STATE_WIDTH)
        self.intr = np.array(intr, dtype=np.float64).reshape(-1, STATE_WIDTH)
        n = len(self.own)
        self.seqs = np.asarray(intruder_actions, dtype=np.int64).reshape(n, -1)
        self.durations = np.broadcast_to(np.asarray(durations, dtype=np.int64), (n,)).copy()
        self.params = params
        self.sim = sim
        self.t = 0
        self.prev = np.full(n, CLEAR_INDEX, dtype=np.int64)
        self.alert_steps = np.zeros(n, dtype=np.int64)
        self.active = self.durations > 0

    @classmethod
    def from_specs(cls, specs, chain: IntruderChain, params: RewardParams,
                   sim: SimConfig) -> "BatchEncounter":
        specs = list(specs)
        own = np.array([s.ownship_init.as_array() for s in specs])
        intr = np.array([s.intruder_init.as_array() for s in specs])
        length = max(s.duration for s in specs)
        seqs = chain.sample_sequences([s.intruder_seed for s in specs], length)
        return cls(own, intr, seqs, [s.duration for s in specs], params, sim)

    def __len__(self):
        return len(self.own)

    @property
    def done(self) -> bool:
        return not bool(self.active.any())

    def observe(self, rows=None) -> np.ndarray:
        rows = slice(None) if rows is None else rows
        return observe_batch(self.own[rows], self.intr[rows], self.prev[rows], self.alert_steps[rows])

    def intruder_actions_now(self, rows) -> np.ndarray:
        return self.seqs[rows, min(self.t, self.seqs.shape[1] - 1)]

    def query(self, policy: Policy, rows, obs=None, lookahead: bool = False) -> np.ndarray:
        """Ask ``policy`` for actions on ``rows``.

        With lookahead, a CLEAR answer is re-checked on the geometry projected
        ``sim.lookahead_steps`` ahead (ownship CLEAR, intruder holding its
        current maneuver) so the ownship may alert early.
        """
        rows = np.asarray(rows, dtype=np.int64)
        obs = self.observe(rows) if obs is None else obs
        act = check_actions(policy(obs), len(obs))
        k = self.sim.lookahead_steps
        if lookahead and k > 0:
            quiet = act == CLEAR_INDEX
            if np.any(quiet):
                sub = rows[quiet]
                own, intr = self.own[sub], self.intr[sub]
                hold = self.intruder_actions_now(sub)
                clear = np.full(len(sub), CLEAR_INDEX)
                m = len(sub)
                both, acts = np.concatenate([own, intr]), np.concatenate([clear, hold])
                for _ in range(k):
                    both = propagate_batch(both, acts, self.sim.dt, self.sim.kinematics)
                own, intr = both[:m], both[m:]
                ahead = observe_batch(own, intr, self.prev[sub], self.alert_steps[sub])
                act = act.copy()
                act[quiet] = check_actions(policy(ahead), len(sub))
        return act

    def step(self, rows, actions) -> dict:
        """Apply ``actions`` to the active ``rows`` and advance the clock."""
        rows = np.asarray(rows, dtype=np.int64)
        actions = np.asarray(actions, dtype=np.int64)
        kin = self.sim.kinematics
        n = len(rows)
        both = propagate_batch(np.concatenate([self.own[rows], self.intr[rows]]),
                               np.concatenate([actions, self.intruder_actions_now(rows)]),
                               self.sim.dt, kin)
        own, intr = both[:n], both[n:]
        nmac = nmac_batch(own, intr, kin)
        ev = classify_batch(self.prev[rows], actions, nmac)
        ev["reward"] = reward_batch(ev, self.params)
        self.own[rows] = own
        self.intr[rows] = intr
        self.prev[rows] = actions
        self.alert_steps[rows] = np.where(actions != CLEAR_INDEX, self.alert_steps[rows] + 1, 0)
        terminal = self.t + 1 >= self.durations[rows]
        if self.sim.terminate_on_nmac:
            terminal = terminal | nmac
        self.active[rows[terminal]] = False
        ev["terminal"] = terminal
        self.t += 1
        return ev


def simulate_batch(specs, chain: IntruderChain, policy: Policy, params: RewardParams,
                   sim: SimConfig | None = None, lookahead: bool = False,
                   record: bool = False):
    """Run every spec to completion in lock-step.

    Returns ``(outcomes, transitions)``; ``transitions`` is a per-encounter
    list of :class:`Transition` when ``record`` is set, else None.
    """
    sim = sim or SimConfig()
    be = BatchEncounter.from_specs(specs, chain, params, sim)
    n = len(be)
    trans = [[] for _ in range(n)] if record else None
    agg = {k: np.zeros(n, dtype=np.int64) for k in ("nmac", "alert", "rev", "cease", "steps")}
    total = np.zeros(n)
    obs = be.observe()
    while not be.done:
        rows = np.flatnonzero(be.active)
        cur = obs[rows]
        act = be.query(policy, rows, cur, lookahead)
        ev = be.step(rows, act)
        nxt = be.observe(rows)
        obs[rows] = nxt
        agg["nmac"][rows] += ev["nmac"]
        agg["alert"][rows] += ev["alert"]
        agg["rev"][rows] += ev["reversal_v"] | ev["reversal_h"]
        agg["cease"][rows] += ev["cease_alert"]
        agg["steps"][rows] += 1
        total[rows] += ev["reward"]
        if record:
            for j, i in enumerate(rows):
                trans[i].append(Transition(cur[j].copy(), int(act[j]), float(ev["reward"][j]),
                                           nxt[j].copy(), bool(ev["terminal"][j])))
    outs = []
    for i in range(n):
        outs.append(EncounterOutcome(
            any_nmac=bool(agg["nmac"][i]), any_alert=bool(agg["alert"][i]),
            any_reversal=bool(agg["rev"][i]), any_cease_alert=bool(agg["cease"][i]),
            nmac_steps=int(agg["nmac"][i]), alert_steps=int(agg["alert"][i]),
            reversal_steps=int(agg["rev"][i]), steps=int(agg["steps"][i]),
            total_reward=float(total[i])))
    return outs, trans


def run_encounter(spec: EncounterSpec, policy: Policy, params: RewardParams,
                  chain: IntruderChain, sim: SimConfig | None = None,
                  lookahead: bool = False) -> tuple[list[Transition], EncounterOutcome]:
    outs, trans = simulate_batch([spec], chain, policy, params, sim, lookahead, record=True)
    return trans[0], outs[0]


def trace_encounter(spec: EncounterSpec, policy: Policy, params: RewardParams,
                    chain: IntruderChain, sim: SimConfig | None = None,
                    lookahead: bool = False) -> list[dict]:
    """Per-step rows (state of both aircraft after the step, action, events)."""
    sim = sim or SimConfig()
    be = BatchEncounter.from_specs([spec], chain, params, sim)
    rows_out = []
    names = ("x", "y", "alt", "heading", "speed", "vrate", "turn")
    while not be.done:
        rows = np.array([0])
        act = be.query(policy, rows, None, lookahead)
        intr_act = int(be.intruder_actions_now(rows)[0])
        ev = be.step(rows, act)
        row = {"step": be.t, "action": int(act[0]), "intruder_action": intr_act}
        row.update({f"own_{k}": float(v) for k, v in zip(names, be.own[0])})
        row.update({f"intr_{k}": float(v) for k, v in zip(names, be.intr[0])})
        row.update({k: int(ev[k][0]) for k in ("nmac", "alert", "reversal_v", "reversal_h",
                                               "cease_alert")})
        row["reward"] = float(ev["reward"][0])
        rows_out.append(row)
    return rows_out


def write_trace_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["step"])
        w.writeheader()
        w.writerows(rows)


# ----------------------------------------------------------------------------
# simple policies

class ConstantPolicy:
    def __init__(self, action: CombinedAction | int):
        self.index = action.index if isinstance(action, CombinedAction) else int(action)

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        return np.full(len(obs), self.index, dtype=np.int64)


CLEAR_POLICY = ConstantPolicy(CLEAR_INDEX)
LEFT_POLICY = ConstantPolicy(CombinedAction(Vertical.CLEAR, Horizontal.LEFT))


def scalar_policy(fn: Callable[[np.ndarray], CombinedAction | int]) -> Policy:
    """Adapt a one-observation policy to the batched interface."""
    def batched(obs):
        return np.array([a.index if isinstance(a, CombinedAction) else int(a) for a in map(fn, obs)],
                        dtype=np.int64)
    return batched
