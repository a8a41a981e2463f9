"""Episodic double-DQN training against freshly sampled encounters."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Protocol

import numpy as np

from .actions import N_ACTIONS
from .encounters import EncounterConfig, EncounterSpec, IntruderChain, sample_encounters
from .neural_net import (DESK_LAYERS, MlpTrainer, MlpWeights, OptimizerState, backward,
                         forward_batch_vectorized, forward_train, init_weights)
from .simulator import OBS_WIDTH, BatchEncounter, RewardParams, SimConfig

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class DqnConfig:
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
    hidden_layers: tuple = DESK_LAYERS[1:-1]
    seed: int = 0
    reward_params: RewardParams = field(default_factory=RewardParams)

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if not 0 < self.gamma < 1:
            raise ValueError("dqn.gamma must be in (0, 1)")
        for name in ("epsilon_start", "epsilon_end"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"dqn.{name} must be in [0, 1]")
        if self.episodes < 0 or self.batch_size < 1 or self.target_sync_interval < 1:
            raise ValueError("dqn.episodes >= 0, batch_size >= 1, target_sync_interval >= 1")
        if not self.batch_size <= self.min_fill <= self.replay_capacity:
            raise ValueError("dqn requires batch_size <= min_fill <= replay_capacity")
        if not self.learning_rate > 0 or self.epsilon_decay_steps < 1:
            raise ValueError("dqn.learning_rate and epsilon_decay_steps must be positive")
        if not self.hidden_layers:
            raise ValueError("dqn.hidden_layers needs at least one hidden layer")

    @property
    def layer_sizes(self) -> tuple:
        return (OBS_WIDTH,) + self.hidden_layers + (N_ACTIONS,)

    def epsilon(self, step: int) -> float:
        frac = min(step / self.epsilon_decay_steps, 1.0)
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_layers"] = list(self.hidden_layers)
        return d


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions."""

    def __init__(self, capacity: int, obs_width: int = OBS_WIDTH):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_width))
        self.next_obs = np.zeros((capacity, obs_width))
        self.action = np.zeros(capacity, dtype=np.int64)
        self.reward = np.zeros(capacity)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def push(self, obs, action, reward, next_obs, terminal):
        """Insert one or more transitions (leading axis = batch)."""
        obs = np.atleast_2d(obs)
        n = len(obs)
        idx = (self.cursor + np.arange(n)) % self.capacity
        self.obs[idx] = obs
        self.next_obs[idx] = np.atleast_2d(next_obs)
        self.action[idx] = action
        self.reward[idx] = reward
        self.terminal[idx] = terminal
        self.cursor = int((self.cursor + n) % self.capacity)
        self.size = min(self.size + n, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict:
        idx = rng.integers(0, self.size, size=batch_size)
        return {"obs": self.obs[idx], "action": self.action[idx], "reward": self.reward[idx],
                "next_obs": self.next_obs[idx], "terminal": self.terminal[idx]}

    def oldest_first(self) -> dict:
        """Contents in insertion order (for inspection and tests)."""
        if self.size < self.capacity:
            idx = np.arange(self.size)
        else:
            idx = (self.cursor + np.arange(self.capacity)) % self.capacity
        return {"obs": self.obs[idx], "action": self.action[idx], "reward": self.reward[idx],
                "next_obs": self.next_obs[idx], "terminal": self.terminal[idx]}


def double_q_targets(batch: dict, online: MlpWeights, target: MlpWeights, gamma: float) -> np.ndarray:
    """r + gamma * Q_target(s', argmax_a' Q_online(s', a')), or r when terminal."""
    nxt = batch["next_obs"]
    pick = np.argmax(forward_batch_vectorized(online, nxt), axis=1)
    q_eval = forward_batch_vectorized(target, nxt)[np.arange(len(nxt)), pick]
    return batch["reward"] + gamma * np.where(batch["terminal"], 0.0, q_eval)


def max_q_targets(batch: dict, target: MlpWeights, gamma: float) -> np.ndarray:
    """r + gamma * max_a' Q_target(s', a'): the single-estimator form."""
    q = forward_batch_vectorized(target, batch["next_obs"]).max(axis=1)
    return batch["reward"] + gamma * np.where(batch["terminal"], 0.0, q)


def loss_and_grad(batch: dict, online: MlpWeights, target: MlpWeights, gamma: float):
    """Mean squared TD error and its gradient w.r.t. the online parameters.

    Targets are constants; only Q_online(s, a) carries gradient.
    """
    y = double_q_targets(batch, online, target, gamma)
    q, cache = forward_train(online, batch["obs"])
    rows = np.arange(len(y))
    err = q[rows, batch["action"]] - y
    loss = float(np.mean(err * err))
    g_out = np.zeros_like(q)
    g_out[rows, batch["action"]] = 2.0 * err / len(y)
    return loss, g_out, backward(online, cache, g_out)


def epsilon_greedy(q_values, epsilon: float, rng: np.random.Generator) -> int:
    """Uniform action with probability epsilon, else argmax (lowest index on ties)."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must be in [0, 1]")
    q_values = np.asarray(q_values)
    if rng.random() < epsilon:
        return int(rng.integers(0, q_values.shape[-1]))
    return int(np.argmax(q_values))


class EncounterSource(Protocol):
    chain: IntruderChain

    def __call__(self, episode: int) -> EncounterSpec: ...


class SampledEncounters:
    """Fresh encounters from the generator, one per episode, drawn in blocks."""

    def __init__(self, config: EncounterConfig | None = None, seed: int = 0, block: int = 512):
        self.config = config or EncounterConfig()
        self.chain = self.config.chain()
        self.seed = seed
        self.block = block
        self._cache: dict[int, list] = {}

    def __call__(self, episode: int) -> EncounterSpec:
        b = episode // self.block
        if b not in self._cache:
            self._cache = {b: sample_encounters(self.config, self.seed,
                                                range(b * self.block, (b + 1) * self.block))}
        return self._cache[b][episode % self.block]


class FixedEncounters:
    """Cycle through a fixed list of encounters."""

    def __init__(self, specs, chain: IntruderChain):
        self.specs = list(specs)
        self.chain = chain

    def __call__(self, episode: int) -> EncounterSpec:
        return self.specs[episode % len(self.specs)]


@dataclass
class TrainingResult:
    weights: MlpWeights
    log: list = field(default_factory=list)
    steps: int = 0
    seed: int = 0


def _td_update(net: MlpTrainer, target: MlpWeights, batch: dict, gamma: float) -> float:
    """In-place equivalent of :func:`loss_and_grad` followed by an Adam step."""
    nxt = batch["next_obs"]
    rows = np.arange(len(nxt))
    pick = np.argmax(net.forward(nxt), axis=1)
    q_eval = forward_batch_vectorized(target, nxt)[rows, pick]
    y = batch["reward"] + gamma * np.where(batch["terminal"], 0.0, q_eval)
    q, cache = net.forward_train(batch["obs"])
    err = q[rows, batch["action"]] - y
    loss = float(np.mean(err * err))
    if not math.isfinite(loss):
        return loss
    g_out = np.zeros_like(q)
    g_out[rows, batch["action"]] = 2.0 * err / len(y)
    net.backward(cache, g_out)
    net.adam_step()
    return loss


def train(config: DqnConfig, source: EncounterSource | None = None,
          sim: SimConfig | None = None, initial: MlpWeights | None = None) -> TrainingResult:
    """Train online/target networks for ``config.episodes`` episodes.

    After the buffer reaches ``min_fill`` every environment step is followed
    by one mini-batch update; the target network copies the online one every
    ``target_sync_interval`` steps. Fully determined by ``config.seed``.
    """
    sim = sim or SimConfig()
    src_seed = int(np.random.SeedSequence([config.seed, 1]).generate_state(1)[0])
    source = source or SampledEncounters(seed=src_seed)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    start = initial if initial is not None else init_weights(config.layer_sizes, config.seed)
    net = MlpTrainer(start, OptimizerState.fresh(start, lr=config.learning_rate))
    target = start
    buf = ReplayBuffer(config.replay_capacity)
    params = config.reward_params
    row = np.zeros(1, dtype=np.int64)
    step = 0
    history = []
    for ep in range(config.episodes):
        env = BatchEncounter.from_specs([source(ep)], source.chain, params, sim)
        obs = env.observe()
        ep_reward, losses = 0.0, []
        eps = config.epsilon(step)
        while not env.done:
            eps = config.epsilon(step)
            # same draws as epsilon_greedy, but the forward pass only when exploiting
            if rng.random() < eps:
                a = int(rng.integers(0, N_ACTIONS))
            else:
                a = int(np.argmax(net.forward(obs)[0]))
            ev = env.step(row, np.array([a]))
            nxt = env.observe()
            buf.push(obs, a, ev["reward"], nxt, ev["terminal"])
            ep_reward += float(ev["reward"][0])
            obs = nxt
            step += 1
            if len(buf) >= config.min_fill:
                loss = _td_update(net, target, buf.sample(config.batch_size, rng), config.gamma)
                if not math.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss at step {step} (episode {ep}, seed {config.seed})")
                losses.append(loss)
            if step % config.target_sync_interval == 0:
                target = net.weights()
        history.append({"episode": ep, "reward": ep_reward, "steps": int(env.t),
                        "loss": float(np.mean(losses)) if losses else float("nan"),
                        "epsilon": eps})
    final = net.weights() if config.episodes else start
    return TrainingResult(final, history, step, config.seed)


def _train_job(args):
    config, source, sim = args
    return train(config, source, sim)


def train_triplicate(config: DqnConfig, seeds, source_factory=None, sim: SimConfig | None = None,
                     workers: int = 1) -> list[TrainingResult]:
    """Three independent runs that differ only in seed; output order follows ``seeds``.

    ``source_factory(seed)`` builds each run's encounter stream (default: a
    generator stream derived from the seed).
    """
    seeds = [int(s) for s in seeds]
    if len(seeds) != 3 or len(set(seeds)) != 3:
        raise ValueError(f"train_triplicate needs three distinct seeds, got {seeds}")
    jobs = []
    for s in seeds:
        cfg = _with_seed(config, s)
        src = source_factory(s) if source_factory else None
        jobs.append((cfg, src, sim))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=min(workers, 3)) as ex:
            return list(ex.map(_train_job, jobs))
    return [_train_job(j) for j in jobs]


def _with_seed(config: DqnConfig, seed: int) -> DqnConfig:
    from dataclasses import replace
    return replace(config, seed=int(seed))


def write_training_log(result: TrainingResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["episode", "reward", "loss", "epsilon", "steps"])
        w.writeheader()
        for row in result.log:
            w.writerow({k: row[k] for k in w.fieldnames})
