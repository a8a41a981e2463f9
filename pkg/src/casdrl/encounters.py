"""Reproducible pairwise encounters and stratified encounter-set files.

Initial headings, speeds and vertical rates are uniform; the intruder is
then placed relative to the ownship so that a configurable fraction of
encounters are on a collision course if the ownship never maneuvers. The
intruder flies a 9-state Markov chain over the combined advisories.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .actions import CLEAR_INDEX, N_ACTIONS
from .container import FormatError, TruncatedFileError, atomic_write, pack, unpack
from .kinematics import (ALT, HDG, SPD, STATE_WIDTH, TWO_PI, VRATE, X, Y, AircraftState,
                         Kinematics, nmac_batch, propagate_batch)

GENERATOR_TAG = "parametric-uniform-markov/1"
SET_MAGIC = b"CASENCS\x00"
SET_VERSION = 1
CHUNK = 2048


class GenerationExhaustedError(RuntimeError):
    """Rejection sampling ran out of draws before a stratum was filled."""


@dataclass(frozen=True)
class IntruderChain:
    transition_matrix: np.ndarray
    avg_action_len: float
    avg_clear_len: float

    def __post_init__(self):
        p = np.asarray(self.transition_matrix, dtype=np.float64)
        if p.shape != (N_ACTIONS, N_ACTIONS) or np.any(p < 0):
            raise ValueError("transition matrix must be 9x9 and non-negative")
        if np.max(np.abs(p.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("transition matrix rows must sum to 1")
        p.setflags(write=False)
        object.__setattr__(self, "transition_matrix", p)

    def __eq__(self, other):
        return (isinstance(other, IntruderChain)
                and self.avg_action_len == other.avg_action_len
                and self.avg_clear_len == other.avg_clear_len
                and np.array_equal(self.transition_matrix, other.transition_matrix))

    __hash__ = None

    def sample_sequences(self, seeds, length: int, start: int = CLEAR_INDEX) -> np.ndarray:
        """Intruder action sequences, one row per seed.

        Row ``i`` depends only on ``seeds[i]``: a fresh generator per seed
        supplies one uniform per step, inverted through the cumulative rows.
        """
        seeds = np.asarray(seeds, dtype=np.uint64).ravel()
        u = np.empty((len(seeds), length))
        for i, s in enumerate(seeds):
            u[i] = np.random.default_rng(int(s)).random(length)
        cum = np.cumsum(self.transition_matrix, axis=1)[:, :-1]
        out = np.empty((len(seeds), length), dtype=np.int64)
        prev = np.full(len(seeds), start, dtype=np.int64)
        for t in range(length):
            prev = (u[:, t, None] >= cum[prev]).sum(axis=1)
            out[:, t] = prev
        return out

    def sample_sequence(self, seed: int, length: int) -> np.ndarray:
        return self.sample_sequences([seed], length)[0]

    def stationary(self) -> np.ndarray:
        w, v = np.linalg.eig(self.transition_matrix.T)
        pi = np.real(v[:, np.argmin(np.abs(w - 1.0))])
        return pi / pi.sum()


def build_markov_chain(avg_action_len: float, avg_clear_len: float) -> IntruderChain:
    """Sticky chain: mean dwell ``avg_action_len`` in maneuvers and
    ``avg_clear_len`` in CLEAR/CLEAR, leaving mass spread evenly."""
    if not (avg_action_len > 1 and avg_clear_len > 1):
        raise ValueError(
            f"average lengths must be > 1 step, got {avg_action_len}, {avg_clear_len}")
    p = np.empty((N_ACTIONS, N_ACTIONS))
    for a in range(N_ACTIONS):
        stay = 1.0 - 1.0 / (avg_clear_len if a == CLEAR_INDEX else avg_action_len)
        p[a, :] = (1.0 - stay) / (N_ACTIONS - 1)
        p[a, a] = stay
    return IntruderChain(p, float(avg_action_len), float(avg_clear_len))


@dataclass(frozen=True)
class EncounterConfig:
    speed_min: float = 100.0  # ft/s
    speed_max: float = 500.0
    vrate_min: float = -2000.0  # ft/min
    vrate_max: float = 2000.0
    alt_min: float = 1000.0  # ft
    alt_max: float = 10000.0
    duration: int = 80  # steps
    dt: float = 1.0  # s
    nmac_fraction: float = 0.40
    cpa_time_min: float = 20.0  # s
    cpa_time_max: float = 60.0
    nmac_placement_scale: float = 0.9  # collision-course CPA stays inside this share of the cylinder
    miss_scale_min: float = 1.2  # annulus, in multiples of the NMAC radii
    miss_scale_max: float = 6.0
    avg_action_len: float = 10.0
    avg_clear_len: float = 20.0
    kinematics: Kinematics = field(default_factory=Kinematics)

    def __post_init__(self):
        for lo, hi in (("speed_min", "speed_max"), ("vrate_min", "vrate_max"),
                       ("alt_min", "alt_max"), ("cpa_time_min", "cpa_time_max"),
                       ("miss_scale_min", "miss_scale_max")):
            if not getattr(self, lo) <= getattr(self, hi):
                raise ValueError(f"encounters.{lo} must be <= encounters.{hi}")
        if self.speed_min < 0:
            raise ValueError("encounters.speed_min must be >= 0")
        if not 0.0 <= self.nmac_fraction <= 1.0:
            raise ValueError("encounters.nmac_fraction must be in [0, 1]")
        if self.duration < 1 or not self.dt > 0:
            raise ValueError("encounters.duration must be >= 1 and dt > 0")
        if self.cpa_time_max / self.dt > self.duration:
            raise ValueError("encounters.cpa_time_max must fall inside the encounter duration")
        if not 0 < self.nmac_placement_scale < 1 or self.miss_scale_min <= 1:
            raise ValueError("collision-course placement must sit inside the NMAC cylinder "
                             "and the miss annulus outside it")

    def chain(self) -> IntruderChain:
        return build_markov_chain(self.avg_action_len, self.avg_clear_len)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kinematics"] = self.kinematics.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncounterConfig":
        d = dict(d)
        if "kinematics" in d and isinstance(d["kinematics"], dict):
            d["kinematics"] = Kinematics(**d["kinematics"])
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown encounter config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class EncounterSpec:
    id: int
    ownship_init: AircraftState
    intruder_init: AircraftState
    intruder_seed: int
    nominal_nmac: bool
    duration: int

    def intruder_actions(self, chain: IntruderChain) -> np.ndarray:
        return chain.sample_sequence(self.intruder_seed, self.duration)


@dataclass(frozen=True)
class EncounterSet:
    specs: tuple
    chain: IntruderChain
    generator_config: EncounterConfig
    format_version: int = SET_VERSION
    generator: str = GENERATOR_TAG

    def __post_init__(self):
        object.__setattr__(self, "specs", tuple(self.specs))
        ids = [s.id for s in self.specs]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValueError("encounter ids must be unique and ascending")

    def __len__(self):
        return len(self.specs)

    @property
    def n_nominal_nmac(self) -> int:
        return sum(1 for s in self.specs if s.nominal_nmac)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(own states, intruder states, intruder action sequences) for batch runs."""
        own = np.array([s.ownship_init.as_array() for s in self.specs]).reshape(-1, STATE_WIDTH)
        intr = np.array([s.intruder_init.as_array() for s in self.specs]).reshape(-1, STATE_WIDTH)
        length = max((s.duration for s in self.specs), default=0)
        seqs = self.chain.sample_sequences([s.intruder_seed for s in self.specs], length)
        return own, intr, seqs

    def subset(self, idx) -> "EncounterSet":
        return replace(self, specs=tuple(self.specs[i] for i in idx))


def _sub_seed(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def nominal_nmac_batch(own, intr, seqs, duration: int, dt: float, kin: Kinematics) -> np.ndarray:
    """Fly every encounter with the ownship holding CLEAR/CLEAR; True where an NMAC occurs."""
    hit = np.zeros(len(own), dtype=bool)
    clear = np.full(len(own), CLEAR_INDEX)
    for t in range(duration):
        own = propagate_batch(own, clear, dt, kin)
        intr = propagate_batch(intr, seqs[:, t], dt, kin)
        hit |= nmac_batch(own, intr, kin)
    return hit


def _draw_chunk(config: EncounterConfig, chain: IntruderChain, seed: int, ids):
    n = len(ids)
    kin = config.kinematics
    steps_max = int(round(config.cpa_time_max / config.dt))
    draws = np.empty((n, 18))
    iseeds = np.empty(n, dtype=np.uint64)
    for i, k in enumerate(ids):
        rng = _sub_seed(seed, k)
        draws[i] = rng.random(18)
        iseeds[i] = rng.integers(0, 2**63, dtype=np.int64)

    def uni(col, lo, hi):
        return lo + (hi - lo) * draws[:, col]

    own = np.zeros((n, STATE_WIDTH))
    intr = np.zeros((n, STATE_WIDTH))
    for st, off in ((own, 0), (intr, 3)):
        st[:, HDG] = TWO_PI * draws[:, off]
        st[:, SPD] = uni(off + 1, config.speed_min, config.speed_max)
        st[:, VRATE] = uni(off + 2, config.vrate_min, config.vrate_max)
    own[:, ALT] = uni(6, config.alt_min, config.alt_max)
    intr[:, ALT] = own[:, ALT]
    collision = draws[:, 7] < config.nmac_fraction
    lo_step = int(math.ceil(config.cpa_time_min / config.dt - 1e-9))
    t_cpa = lo_step + np.minimum((draws[:, 8] * (steps_max - lo_step + 1)).astype(np.int64),
                                 steps_max - lo_step)

    seqs = chain.sample_sequences(iseeds, config.duration)

    # fly with a co-located intruder to learn the relative displacement at CPA time
    o, s = own.copy(), intr.copy()
    disp = np.zeros((n, 3))
    rel_v = np.zeros((n, 2))
    clear = np.full(n, CLEAR_INDEX)
    for t in range(1, steps_max + 1):
        o = propagate_batch(o, clear, config.dt, kin)
        s = propagate_batch(s, seqs[:, t - 1], config.dt, kin)
        at = t_cpa == t
        if np.any(at):
            disp[at] = s[at][:, [X, Y, ALT]] - o[at][:, [X, Y, ALT]]
            rel_v[at, 0] = (s[at, SPD] * np.cos(s[at, HDG]) - o[at, SPD] * np.cos(o[at, HDG]))
            rel_v[at, 1] = (s[at, SPD] * np.sin(s[at, HDG]) - o[at, SPD] * np.sin(o[at, HDG]))

    speed = np.hypot(rel_v[:, 0], rel_v[:, 1])
    ang = TWO_PI * draws[:, 13]
    perp = np.where(speed[:, None] > 1e-9,
                    np.stack([-rel_v[:, 1], rel_v[:, 0]], axis=1) / np.maximum(speed, 1e-9)[:, None],
                    np.stack([np.cos(ang), np.sin(ang)], axis=1))
    side = np.where(draws[:, 9] < 0.5, -1.0, 1.0)
    rh, rv = kin.nmac_horizontal, kin.nmac_vertical

    # collision course: CPA uniform inside the scaled cylinder
    f = config.nmac_placement_scale
    r_in = f * rh * np.sqrt(draws[:, 10])
    hit_xy = np.stack([r_in * np.cos(ang), r_in * np.sin(ang)], axis=1)
    hit_z = f * rv * (2.0 * draws[:, 11] - 1.0)

    # miss: normalized separation rho in the annulus, binding on one axis
    rho = uni(12, config.miss_scale_min, config.miss_scale_max)
    horiz_binds = draws[:, 14] < 0.5
    miss_h = np.where(horiz_binds, rho, rho * draws[:, 15]) * rh
    miss_v = np.where(horiz_binds, rho * (2.0 * draws[:, 16] - 1.0),
                      rho * np.where(draws[:, 16] < 0.5, -1.0, 1.0)) * rv
    miss_xy = (side * miss_h)[:, None] * perp

    target_xy = np.where(collision[:, None], hit_xy, miss_xy)
    target_z = np.where(collision, hit_z, miss_v)
    intr[:, X] = own[:, X] + target_xy[:, 0] - disp[:, 0]
    intr[:, Y] = own[:, Y] + target_xy[:, 1] - disp[:, 1]
    intr[:, ALT] = own[:, ALT] + target_z - disp[:, 2]

    labels = nominal_nmac_batch(own, intr, seqs, config.duration, config.dt, kin)
    return own, intr, iseeds, labels


def sample_encounters(config: EncounterConfig, seed: int, ids) -> list[EncounterSpec]:
    """Encounters for candidate indices ``ids``; each is a pure function of
    ``(config, seed, id)`` so chunking and worker count never matter."""
    chain = config.chain()
    ids = list(ids)
    out = []
    for start in range(0, len(ids), CHUNK):
        part = ids[start:start + CHUNK]
        own, intr, iseeds, labels = _draw_chunk(config, chain, seed, part)
        for k, o, s, q, lab in zip(part, own, intr, iseeds, labels):
            out.append(EncounterSpec(int(k), AircraftState.from_array(o), AircraftState.from_array(s),
                                     int(q), bool(lab), config.duration))
    return out


def sample_encounter(config: EncounterConfig, seed: int, index: int = 0) -> EncounterSpec:
    return sample_encounters(config, seed, [index])[0]


def _interleave(n: int, k: int) -> list[bool]:
    # evenly spread k True slots among n
    return [((i + 1) * k) // n > (i * k) // n for i in range(n)]


def generate_stratified_set(n: int, nmac_fraction: float, config: EncounterConfig | None = None,
                            seed: int = 0, max_draws: int | None = None) -> EncounterSet:
    """Exactly ``round(n * nmac_fraction)`` nominal-NMAC encounters, by rejection."""
    config = config or EncounterConfig()
    if n < 1 or not 0.0 <= nmac_fraction <= 1.0:
        raise ValueError("need n >= 1 and nmac_fraction in [0, 1]")
    want_hit = int(round(n * nmac_fraction))
    want_miss = n - want_hit
    max_draws = max_draws if max_draws is not None else 50 * n + 1000
    hits, misses = [], []
    drawn = 0
    while (len(hits) < want_hit or len(misses) < want_miss) and drawn < max_draws:
        batch = min(CHUNK, max_draws - drawn)
        for spec in sample_encounters(config, seed, range(drawn, drawn + batch)):
            if spec.nominal_nmac and len(hits) < want_hit:
                hits.append(spec)
            elif not spec.nominal_nmac and len(misses) < want_miss:
                misses.append(spec)
        drawn += batch
    if len(hits) < want_hit:
        raise GenerationExhaustedError(
            f"nominal-NMAC stratum short: {len(hits)}/{want_hit} after {drawn} draws")
    if len(misses) < want_miss:
        raise GenerationExhaustedError(
            f"non-NMAC stratum short: {len(misses)}/{want_miss} after {drawn} draws")
    specs = []
    hi = mi = 0
    for i, is_hit in enumerate(_interleave(n, want_hit)):
        src = hits[hi] if is_hit else misses[mi]
        hi, mi = hi + is_hit, mi + (not is_hit)
        specs.append(replace(src, id=i))
    return EncounterSet(tuple(specs), config.chain(), config)


# ----------------------------------------------------------------------------
# files

_RECORD = np.dtype([("id", "<u8"), ("own", "<f8", (STATE_WIDTH,)), ("intr", "<f8", (STATE_WIDTH,)),
                    ("seed", "<u8"), ("nmac", "u1"), ("duration", "<u4")])


def _set_header(es: EncounterSet) -> dict:
    return {
        "generator": es.generator,
        "count": len(es),
        "n_nominal_nmac": es.n_nominal_nmac,
        "config": es.generator_config.to_dict(),
        "chain": {"avg_action_len": es.chain.avg_action_len,
                  "avg_clear_len": es.chain.avg_clear_len,
                  "transition_matrix": es.chain.transition_matrix.tolist()},
    }


def encode_set(es: EncounterSet) -> bytes:
    rec = np.zeros(len(es), dtype=_RECORD)
    for i, s in enumerate(es.specs):
        rec[i] = (s.id, s.ownship_init.as_array(), s.intruder_init.as_array(),
                  s.intruder_seed, int(s.nominal_nmac), s.duration)
    return pack(SET_MAGIC, SET_VERSION, _set_header(es), rec.tobytes())


def _set_from_parts(header: dict, records) -> EncounterSet:
    chain = IntruderChain(np.array(header["chain"]["transition_matrix"]),
                          header["chain"]["avg_action_len"], header["chain"]["avg_clear_len"])
    config = EncounterConfig.from_dict(header["config"])
    specs = tuple(
        EncounterSpec(int(r["id"]), AircraftState.from_array(r["own"]),
                      AircraftState.from_array(r["intr"]), int(r["seed"]), bool(r["nmac"]),
                      int(r["duration"]))
        for r in records)
    es = EncounterSet(specs, chain, config, SET_VERSION, header["generator"])
    if es.n_nominal_nmac != header["n_nominal_nmac"]:
        raise FormatError("stratification count in header does not match records")
    return es


def decode_set(blob: bytes) -> EncounterSet:
    header, body = unpack(blob, SET_MAGIC, SET_VERSION)
    count = int(header["count"])
    if len(body) != count * _RECORD.itemsize:
        raise TruncatedFileError(
            f"header declares {count} encounters, body holds {len(body) / _RECORD.itemsize:g}")
    records = np.frombuffer(body, dtype=_RECORD)
    return _set_from_parts(header, records)


def write_set(es: EncounterSet, path) -> None:
    atomic_write(path, encode_set(es))


def read_set(path) -> EncounterSet:
    return decode_set(Path(path).read_bytes())


def export_json(es: EncounterSet, path) -> None:
    """Lossless JSON view (floats are written with round-trip repr)."""
    doc = _set_header(es)
    doc["format_version"] = es.format_version
    doc["encounters"] = [
        {"id": s.id, "ownship_init": list(s.ownship_init.as_array()),
         "intruder_init": list(s.intruder_init.as_array()),
         "intruder_seed": s.intruder_seed, "nominal_nmac": s.nominal_nmac,
         "duration": s.duration}
        for s in es.specs]
    atomic_write(path, json.dumps(doc, indent=1, sort_keys=True))


def import_json(path) -> EncounterSet:
    doc = json.loads(Path(path).read_text())
    records = [{"id": e["id"], "own": e["ownship_init"], "intr": e["intruder_init"],
                "seed": e["intruder_seed"], "nmac": e["nominal_nmac"], "duration": e["duration"]}
               for e in doc["encounters"]]
    return _set_from_parts(doc, records)
