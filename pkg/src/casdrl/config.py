"""Run configuration: one JSON document with a section per module.

Unknown keys are rejected and every value is validated when loaded, with
errors naming the offending path (``dqn.gamma``, ``reward.alert_cost``...).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from typing import Any

from .dqn_trainer import DqnConfig
from .encounters import EncounterConfig
from .evaluator import STABILITY_THRESHOLD, MetricTargets, ObjectiveWeights
from .policy_viz import PlotSpec
from .simulator import RewardParams, SimConfig
from .surrogate_tuner import GpHyper, TunerConfig, check_warp


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SetConfig:
    """The frozen evaluation set."""

    size: int = 2000
    nmac_fraction: float = 0.5
    seed: int = 20_000

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("size must be >= 1")
        if not 0.0 <= self.nmac_fraction <= 1.0:
            raise ValueError("nmac_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class DpConfig:
    modes: tuple = ("horizontal", "vertical")
    bins: tuple = (15, 15, 12)
    samples_per_cell: int = 16
    gamma: float = 0.95
    tol: float = 1e-8
    max_sweeps: int = 10_000

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(self.modes))
        object.__setattr__(self, "bins", tuple(int(b) for b in self.bins))
        if not self.modes or any(m not in ("horizontal", "vertical", "joint") for m in self.modes):
            raise ValueError("modes must be a non-empty subset of horizontal/vertical/joint")
        if len(self.bins) != 3 or min(self.bins) < 1:
            raise ValueError("bins needs three positive counts")
        if not 0 < self.gamma < 1 or self.tol <= 0 or self.max_sweeps < 1 or self.samples_per_cell < 1:
            raise ValueError("need 0 < gamma < 1, tol > 0, max_sweeps >= 1, samples_per_cell >= 1")


@dataclass(frozen=True)
class EvalConfig:
    targets: MetricTargets = field(default_factory=MetricTargets)
    weights: ObjectiveWeights = field(default_factory=ObjectiveWeights)
    stability_threshold: float = STABILITY_THRESHOLD
    lookahead: bool = False

    def __post_init__(self):
        if not self.stability_threshold > 0:
            raise ValueError("stability_threshold must be > 0")


@dataclass(frozen=True)
class DqnSection:
    """DqnConfig without the per-run seed and reward (those come from elsewhere)."""

    episodes: int = 3000
    batch_size: int = 64
    gamma: float = 0.95
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_steps: int = 50_000
    target_sync_interval: int = 1000
    replay_capacity: int = 100_000
    min_fill: int = 5000
    learning_rate: float = 1e-4
    hidden_layers: tuple = (64, 64, 64)

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(self.hidden_layers))
        self.build(0, RewardParams())  # reuse DqnConfig's checks

    def build(self, seed: int, reward: RewardParams) -> DqnConfig:
        return DqnConfig(**asdict(self), seed=seed, reward_params=reward)


@dataclass(frozen=True)
class TunerSection:
    n_init: int = 5
    budget: int = 15
    gp: GpHyper = field(default_factory=GpHyper)
    n_candidates: int = 1000
    n_starts: int = 8
    # alert cost is paid every alerting step, so its useful range hugs 0
    warp: tuple = (1000.0, 0.0, 0.0)

    def __post_init__(self):
        check_warp(self.warp)


@dataclass(frozen=True)
class RunConfig:
    master_seed: int = 0
    workers: int = 1
    encounters: EncounterConfig = field(default_factory=EncounterConfig)
    eval_set: SetConfig = field(default_factory=SetConfig)
    simulator: SimConfig = field(default_factory=SimConfig)
    reward: RewardParams = field(default_factory=RewardParams)
    dqn: DqnSection = field(default_factory=DqnSection)
    dp: DpConfig = field(default_factory=DpConfig)
    evaluator: EvalConfig = field(default_factory=EvalConfig)
    tuner: TunerSection = field(default_factory=TunerSection)
    plotting: PlotSpec = field(default_factory=PlotSpec)

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.master_seed < 0:
            raise ValueError("master_seed must be >= 0")

    def tuner_config(self) -> TunerConfig:
        t = self.tuner
        return TunerConfig(n_init=t.n_init, budget=t.budget, master_seed=self.master_seed,
                           stability_threshold=self.evaluator.stability_threshold, gp=t.gp,
                           n_candidates=t.n_candidates, n_starts=t.n_starts,
                           targets=self.evaluator.targets, weights=self.evaluator.weights,
                           warp=t.warp)


# ----------------------------------------------------------------------------
# (de)serialisation

def _plain(value):
    if is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if hasattr(value, "value") and isinstance(getattr(value, "value"), str):  # enums
        return value.value
    return value


def to_dict(cfg: RunConfig) -> dict:
    return _plain(cfg)


def _check_scalar(path: str, default, value):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        if not math.isfinite(value):
            raise ConfigError(f"{path}: must be finite")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        if default:
            return tuple(_check_scalar(f"{path}[{i}]", default[0], v) for i, v in enumerate(value))
        return tuple(value)
    if default is None:
        return value
    return value


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    proto = cls()
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown key {where}{unknown[0]}")
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        default = getattr(proto, name)
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, sub)
        elif hasattr(default, "value") and isinstance(getattr(default, "value"), str):
            try:
                kwargs[name] = type(default)(value)
            except ValueError as exc:
                raise ConfigError(f"{sub}: {exc}") from exc
        elif name == "length_scale":
            if isinstance(value, list):
                kwargs[name] = tuple(_check_scalar(f"{sub}[{i}]", 0.0, v) for i, v in enumerate(value))
            else:
                kwargs[name] = _check_scalar(sub, 0.0, value)
        elif name == "period":
            kwargs[name] = None if value is None else _check_scalar(sub, 0.0, value)
        else:
            kwargs[name] = _check_scalar(sub, default, value)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def parse_config(blob: bytes | str) -> RunConfig:
    """Validated RunConfig from a JSON document; ``{}`` gives the defaults."""
    try:
        data = json.loads(blob)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return from_dict(data)


def dumps(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), sort_keys=True, indent=2, allow_nan=False) + "\n"


def config_hash(cfg: RunConfig) -> str:
    canon = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """``section.key=value`` assignments (value parsed as JSON, else a string)."""
    data = to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form path=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ConfigError(f"unknown key {key}")
            node = node[p]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"unknown key {key}")
        node[parts[-1]] = value
    return from_dict(data)


__all__ = ["ConfigError", "RunConfig", "SetConfig", "DpConfig", "EvalConfig", "DqnSection",
           "TunerSection", "parse_config", "from_dict", "to_dict", "dumps", "config_hash",
           "apply_overrides"]
