"""Small ReLU MLP with hand-written backprop, Adam, and a checksummed weight file.

All parameters live in one flat float64 vector; per-layer matrices are
read-only views into it, so optimizer updates are a handful of vector ops
and serialization is a single buffer copy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .container import FormatError, atomic_write, pack, unpack

WEIGHTS_MAGIC = b"CASMLPW\x00"
WEIGHTS_VERSION = 1

WIDE_LAYERS = (25,) + (512,) * 7 + (9,)
DESK_LAYERS = (25, 64, 64, 64, 9)


class ArchitectureMismatchError(FormatError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


def _check_layers(layer_sizes) -> tuple[int, ...]:
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ValueError(f"invalid layer sizes {sizes}")
    return sizes


def _offsets(sizes):
    out, pos = [], 0
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        out.append((pos, pos + n_in * n_out, pos + n_in * n_out + n_out))
        pos += n_in * n_out + n_out
    return out, pos


@dataclass(frozen=True, eq=False)
class MlpWeights:
    """Parameters of a ReLU MLP; ``W[i]`` is (fan_in, fan_out)."""

    layer_sizes: tuple
    flat: np.ndarray

    def __post_init__(self):
        sizes = _check_layers(self.layer_sizes)
        _, total = _offsets(sizes)
        flat = np.array(self.flat, copy=True)
        if not np.issubdtype(flat.dtype, np.floating):
            flat = flat.astype(np.float64)
        if flat.shape != (total,):
            raise ValueError(f"expected {total} parameters for {sizes}, got {flat.shape}")
        flat.setflags(write=False)
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "flat", flat)
        offs, _ = _offsets(sizes)
        ws, bs = [], []
        for (a, b, c), n_in, n_out in zip(offs, sizes[:-1], sizes[1:]):
            ws.append(flat[a:b].reshape(n_in, n_out))
            bs.append(flat[b:c])
        object.__setattr__(self, "W", tuple(ws))
        object.__setattr__(self, "b", tuple(bs))

    @classmethod
    def from_layers(cls, weights, biases) -> "MlpWeights":
        sizes = [np.shape(weights[0])[0]] + [np.shape(w)[1] for w in weights]
        parts = []
        for w, b in zip(weights, biases):
            parts += [np.asarray(w, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()]
        return cls(tuple(sizes), np.concatenate(parts))

    @property
    def n_params(self) -> int:
        return self.flat.size

    def __eq__(self, other):
        return (isinstance(other, MlpWeights) and self.layer_sizes == other.layer_sizes
                and np.array_equal(self.flat, other.flat))

    __hash__ = None

    def astype(self, dtype) -> "MlpWeights":
        """Copy with parameters cast (e.g. float32 for inference)."""
        return MlpWeights(self.layer_sizes, self.flat.astype(dtype))


def init_weights(layer_sizes=DESK_LAYERS, seed: int = 0) -> MlpWeights:
    """He-uniform weights (limit sqrt(6 / fan_in)), zero biases."""
    sizes = _check_layers(layer_sizes)
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        lim = math.sqrt(6.0 / n_in)
        ws.append(rng.uniform(-lim, lim, size=(n_in, n_out)))
        bs.append(np.zeros(n_out))
    return MlpWeights.from_layers(ws, bs)


def zeros_like(weights: MlpWeights) -> MlpWeights:
    return MlpWeights(weights.layer_sizes, np.zeros_like(weights.flat))


def _check_input(weights: MlpWeights, x: np.ndarray, batched: bool):
    want = weights.layer_sizes[0]
    if batched:
        if x.ndim != 2 or x.shape[1] != want or x.shape[0] == 0:
            raise ValueError(f"expected a non-empty (n, {want}) batch, got {x.shape}")
    elif x.shape != (want,):
        raise ValueError(f"expected an observation of width {want}, got {x.shape}")


def forward(weights: MlpWeights, obs) -> np.ndarray:
    """Q-values for one observation (layer-by-layer matrix-vector products)."""
    h = np.asarray(obs, dtype=weights.flat.dtype)
    _check_input(weights, h, batched=False)
    last = len(weights.W) - 1
    for i, (w, b) in enumerate(zip(weights.W, weights.b)):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h


def forward_naive(weights: MlpWeights, batch) -> np.ndarray:
    """Per-sample loop over :func:`forward`; the unvectorized reference path."""
    batch = np.asarray(batch, dtype=weights.flat.dtype)
    _check_input(weights, batch, batched=True)
    return np.stack([forward(weights, x) for x in batch])


def _forward_layers(ws, bs, h):
    last = len(ws) - 1
    for i, (w, b) in enumerate(zip(ws, bs)):
        h = h @ w
        h += b
        if i < last:
            np.maximum(h, 0.0, out=h)
    return h


def forward_batch_vectorized(weights: MlpWeights, batch) -> np.ndarray:
    """Q-values for a whole batch with one matrix-matrix product per layer."""
    h = np.asarray(batch, dtype=weights.flat.dtype)
    _check_input(weights, h, batched=True)
    return _forward_layers(weights.W, weights.b, h)


def _forward_train_layers(ws, bs, h):
    inputs = []
    last = len(ws) - 1
    for i, (w, b) in enumerate(zip(ws, bs)):
        inputs.append(h)
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h, inputs


def forward_train(weights: MlpWeights, batch):
    """Batch forward keeping the per-layer inputs needed by :func:`backward`."""
    h = np.asarray(batch, dtype=np.float64)
    _check_input(weights, h, batched=True)
    return _forward_train_layers(weights.W, weights.b, h)


def backward(weights: MlpWeights, cache, grad_out) -> MlpWeights:
    """Reverse-mode gradients of sum(grad_out * output) w.r.t. all parameters."""
    inputs = cache
    g = np.asarray(grad_out, dtype=np.float64)
    grads = [None] * len(weights.W)
    for i in range(len(weights.W) - 1, -1, -1):
        x = inputs[i]
        grads[i] = (x.T @ g, g.sum(axis=0))
        if i > 0:
            g = (g @ weights.W[i].T) * (x > 0.0)  # x is the ReLU output of layer i-1
    parts = []
    for gw, gb in grads:
        parts += [gw.ravel(), gb]
    return MlpWeights(weights.layer_sizes, np.concatenate(parts))


@dataclass(frozen=True, eq=False)
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, weights: MlpWeights, lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> "OptimizerState":
        z = np.zeros(weights.n_params)
        return cls(z, z.copy(), 0, lr, beta1, beta2, eps)


def optimizer_step(weights: MlpWeights, grads: MlpWeights,
                   state: OptimizerState) -> tuple[MlpWeights, OptimizerState]:
    """Adam with bias correction; returns new weights and state."""
    g = grads.flat
    if g.shape != weights.flat.shape or state.m.shape != g.shape:
        raise ValueError("gradient/optimizer shapes do not match the weights")
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradientError("non-finite gradient; update refused")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new = weights.flat - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return MlpWeights(weights.layer_sizes, new), replace(state, m=m, v=v, step=t)


class MlpTrainer:
    """Mutable online network plus Adam moments, updated in place.

    Numerically identical to chaining :func:`forward_train`, :func:`backward`
    and :func:`optimizer_step`, but without reallocating the parameter, gradient
    and moment vectors on every step. Used by the training loop.
    """

    def __init__(self, weights: MlpWeights, state: OptimizerState | None = None):
        state = state or OptimizerState.fresh(weights)
        self.layer_sizes = weights.layer_sizes
        self.flat = np.array(weights.flat, dtype=np.float64)
        self.grad = np.zeros_like(self.flat)
        self.m = np.array(state.m, dtype=np.float64)
        self.v = np.array(state.v, dtype=np.float64)
        self.step = state.step
        self.hyper = (state.lr, state.beta1, state.beta2, state.eps)
        self._tmp = np.empty_like(self.flat)
        self._tmp2 = np.empty_like(self.flat)
        offs, _ = _offsets(self.layer_sizes)
        pairs = list(zip(offs, self.layer_sizes[:-1], self.layer_sizes[1:]))
        self.W = [self.flat[a:b].reshape(i, o) for (a, b, _), i, o in pairs]
        self.b = [self.flat[b:c] for (_, b, c), _, _ in pairs]
        self.gW = [self.grad[a:b].reshape(i, o) for (a, b, _), i, o in pairs]
        self.gb = [self.grad[b:c] for (_, b, c), _, _ in pairs]

    def forward(self, batch) -> np.ndarray:
        return _forward_layers(self.W, self.b, np.asarray(batch, dtype=np.float64))

    def forward_train(self, batch):
        return _forward_train_layers(self.W, self.b, np.asarray(batch, dtype=np.float64))

    def backward(self, inputs, grad_out) -> np.ndarray:
        """Fill and return the flat gradient buffer."""
        g = np.asarray(grad_out, dtype=np.float64)
        for i in range(len(self.W) - 1, -1, -1):
            x = inputs[i]
            np.matmul(x.T, g, out=self.gW[i])
            np.sum(g, axis=0, out=self.gb[i])
            if i > 0:
                g = (g @ self.W[i].T) * (x > 0.0)
        return self.grad

    def adam_step(self) -> None:
        lr, b1, b2, eps = self.hyper
        g = self.grad
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError("non-finite gradient; update refused")
        self.step += 1
        t = self.step
        m, v, tmp, tmp2 = self.m, self.v, self._tmp, self._tmp2
        m *= b1
        np.multiply(g, 1.0 - b1, out=tmp)
        m += tmp
        v *= b2
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - b2
        v += tmp
        np.divide(v, 1.0 - b2**t, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += eps
        np.divide(m, 1.0 - b1**t, out=tmp2)
        np.multiply(lr, tmp2, out=tmp2)
        tmp2 /= tmp
        self.flat -= tmp2

    def weights(self) -> MlpWeights:
        return MlpWeights(self.layer_sizes, self.flat)

    def optimizer_state(self) -> OptimizerState:
        lr, b1, b2, eps = self.hyper
        return OptimizerState(self.m.copy(), self.v.copy(), self.step, lr, b1, b2, eps)


# ----------------------------------------------------------------------------
# weight files

def encode_weights(weights: MlpWeights, extra: dict | None = None) -> bytes:
    header = {"layer_sizes": list(weights.layer_sizes), "activation": "relu",
              "output": "linear", "dtype": "<f8"}
    if extra:
        header["meta"] = extra
    return pack(WEIGHTS_MAGIC, WEIGHTS_VERSION, header, weights.flat.astype("<f8").tobytes())


def decode_weights(blob: bytes, expected_layers=None) -> MlpWeights:
    header, body = unpack(blob, WEIGHTS_MAGIC, WEIGHTS_VERSION)
    sizes = tuple(header["layer_sizes"])
    if expected_layers is not None and tuple(expected_layers) != sizes:
        raise ArchitectureMismatchError(
            f"file holds a {'-'.join(map(str, sizes))} network, "
            f"expected {'-'.join(map(str, expected_layers))}")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return MlpWeights(sizes, flat)


def save_weights(weights: MlpWeights, path, extra: dict | None = None) -> None:
    atomic_write(path, encode_weights(weights, extra))


def load_weights(path, expected_layers=None) -> MlpWeights:
    return decode_weights(Path(path).read_bytes(), expected_layers)


class QNetworkPolicy:
    """Greedy policy over network Q-values (ties resolve to the lowest index)."""

    def __init__(self, weights: MlpWeights):
        self.weights = weights

    def q_values(self, obs) -> np.ndarray:
        return forward_batch_vectorized(self.weights, obs)

    def __call__(self, obs) -> np.ndarray:
        return np.argmax(self.q_values(obs), axis=1)


class NaiveQNetworkPolicy(QNetworkPolicy):
    """Same decisions via the per-sample forward path (for timing comparisons)."""

    def q_values(self, obs) -> np.ndarray:
        return forward_naive(self.weights, obs)
