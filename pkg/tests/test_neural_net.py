import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from casdrl.container import ChecksumError
from casdrl.neural_net import (WIDE_LAYERS, ArchitectureMismatchError, MlpTrainer, MlpWeights,
                               NonFiniteGradientError, OptimizerState, backward, decode_weights,
                               encode_weights, forward, forward_batch_vectorized, forward_naive,
                               forward_train, init_weights, load_weights, optimizer_step,
                               save_weights, zeros_like)


def naive_triple_loop(w: MlpWeights, x):
    h = list(map(float, x))
    for k, (W, b) in enumerate(zip(w.W, w.b)):
        out = []
        for j in range(W.shape[1]):
            acc = float(b[j])
            for i in range(W.shape[0]):
                acc += h[i] * float(W[i, j])
            out.append(acc)
        h = out if k == len(w.W) - 1 else [max(v, 0.0) for v in out]
    return np.array(h)


def random_net(sizes, seed, bias=0.1):
    w = init_weights(sizes, seed)
    rng = np.random.default_rng(seed + 1000)
    flat = w.flat.copy()
    bmask = np.zeros_like(flat, dtype=bool)
    pos = 0
    for i, o in zip(sizes[:-1], sizes[1:]):
        pos += i * o
        bmask[pos:pos + o] = True
        pos += o
    flat[bmask] = rng.normal(0, bias, bmask.sum())
    return MlpWeights(w.layer_sizes, flat)


def test_zero_net_outputs_zero():
    w = zeros_like(init_weights((25, 16, 9)))
    assert np.all(forward(w, np.ones(25)) == 0)


def test_single_affine_layer():
    rng = np.random.default_rng(0)
    W, b = rng.normal(size=(25, 9)), rng.normal(size=9)
    w = MlpWeights.from_layers([W], [b])
    x = np.ones(25)
    assert np.allclose(forward(w, x), W.T @ x + b, atol=1e-12)


def test_forward_matches_triple_loop():
    w = random_net((25, 16, 9), 3)
    rng = np.random.default_rng(1)
    for _ in range(5):
        x = rng.normal(size=25)
        assert np.allclose(forward(w, x), naive_triple_loop(w, x), atol=1e-12, rtol=0)


@pytest.mark.parametrize("n", [1, 2, 17, 64])
def test_vectorized_matches_per_sample(n):
    w = random_net((25, 32, 32, 9), n)
    x = np.random.default_rng(n).normal(size=(n, 25))
    vec = forward_batch_vectorized(w, x)
    ref = np.stack([forward(w, xi) for xi in x])
    assert np.allclose(vec, ref, atol=1e-9, rtol=0)
    assert np.allclose(forward_naive(w, x), ref, atol=0)


def test_shape_errors():
    w = init_weights((25, 8, 9))
    with pytest.raises(ValueError):
        forward(w, np.zeros(24))
    with pytest.raises(ValueError):
        forward_batch_vectorized(w, np.zeros((0, 25)))
    with pytest.raises(ValueError):
        MlpWeights((25, 8, 9), np.zeros(3))


def finite_difference_check(sizes, seed, h=1e-5, floor=1e-6):
    """Worst relative error over all parameters.

    ``floor`` bounds the denominator from below; pass a value scaled to the
    largest gradient to keep round-off on near-zero entries from dominating.
    """
    w = random_net(sizes, seed)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(6, sizes[0]))
    gout = rng.normal(size=(6, sizes[-1]))
    out, cache = forward_train(w, x)
    g = backward(w, cache, gout).flat
    worst = 0.0
    floor = floor if floor is not None else 1e-4 * np.max(np.abs(g))
    for k in range(w.n_params):
        fp, fm = w.flat.copy(), w.flat.copy()
        fp[k] += h
        fm[k] -= h
        lp = np.sum(gout * forward_batch_vectorized(MlpWeights(sizes, fp), x))
        lm = np.sum(gout * forward_batch_vectorized(MlpWeights(sizes, fm), x))
        num = (lp - lm) / (2 * h)
        worst = max(worst, abs(num - g[k]) / max(abs(num), abs(g[k]), floor))
    return worst


def test_gradient_check_25_8_9():
    assert finite_difference_check((25, 8, 9), 0) < 1e-4


@given(st.lists(st.integers(1, 32), min_size=1, max_size=3), st.integers(0, 10_000))
def test_gradient_check_random_architectures(hidden, seed):
    # FD error is absolute (~1e-10 here), so tiny entries are judged against the gradient scale
    assert finite_difference_check((25, *hidden, 9), seed, floor=None) < 1e-4


def test_zero_output_gradient_gives_zero():
    w = random_net((25, 8, 9), 2)
    _, cache = forward_train(w, np.ones((3, 25)))
    assert np.all(backward(w, cache, np.zeros((3, 9))).flat == 0)


def test_dead_relu_blocks_upstream():
    # first hidden unit always negative -> its incoming weights get no gradient
    w = random_net((25, 4, 9), 5)
    W0 = np.array(w.W[0])
    b0 = np.array(w.b[0])
    W0[:, 0] = 0.0
    b0[0] = -1.0
    w = MlpWeights.from_layers([W0, w.W[1]], [b0, w.b[1]])
    x = np.random.default_rng(0).normal(size=(5, 25))
    _, cache = forward_train(w, x)
    g = backward(w, cache, np.ones((5, 9)))
    assert np.all(g.W[0][:, 0] == 0) and g.b[0][0] == 0
    assert np.all(g.W[1][0, :] == 0)


def test_adam_scalar_step():
    w = MlpWeights((1, 1), np.array([0.0, 0.0]))
    g = MlpWeights((1, 1), np.array([1.0, 0.0]))
    new, st_ = optimizer_step(w, g, OptimizerState.fresh(w, lr=0.1))
    assert new.flat[0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)
    assert new.flat[1] == 0.0 and st_.step == 1


def test_adam_zero_gradient_and_purity():
    w = init_weights((25, 8, 9), 1)
    s = OptimizerState.fresh(w)
    new, _ = optimizer_step(w, zeros_like(w), s)
    assert new == w
    g = random_net((25, 8, 9), 2)
    a = optimizer_step(w, g, s)
    b = optimizer_step(w, g, s)
    assert a[0] == b[0] and np.array_equal(a[1].m, b[1].m)
    assert np.all(s.m == 0)  # input state untouched


def test_adam_refuses_non_finite():
    w = init_weights((25, 8, 9), 1)
    flat = np.zeros(w.n_params)
    flat[3] = np.nan
    with pytest.raises(NonFiniteGradientError):
        optimizer_step(w, MlpWeights(w.layer_sizes, flat), OptimizerState.fresh(w))


def test_in_place_trainer_bit_identical_to_pure_path():
    w = init_weights((25, 16, 16, 9), 4)
    s = OptimizerState.fresh(w, lr=1e-3)
    tr = MlpTrainer(w, s)
    rng = np.random.default_rng(0)
    for _ in range(15):
        x = rng.normal(size=(8, 25))
        gout = rng.normal(size=(8, 9))
        _, cache = forward_train(w, x)
        w, s = optimizer_step(w, backward(w, cache, gout), s)
        _, inputs = tr.forward_train(x)
        tr.backward(inputs, gout)
        tr.adam_step()
    assert tr.weights() == w
    assert np.array_equal(tr.optimizer_state().v, s.v)


def test_init_deterministic():
    assert init_weights((25, 64, 9), 7) == init_weights((25, 64, 9), 7)
    assert init_weights((25, 64, 9), 7) != init_weights((25, 64, 9), 8)


def test_weight_file_round_trip(tmp_path):
    w = random_net((25, 16, 9), 9)
    save_weights(w, tmp_path / "w.bin", extra={"seed": 9})
    back = load_weights(tmp_path / "w.bin", expected_layers=(25, 16, 9))
    assert back == w
    assert back.flat.tobytes() == w.flat.tobytes()


def test_weight_file_errors():
    blob = bytearray(encode_weights(random_net((25, 16, 9), 1)))
    with pytest.raises(ArchitectureMismatchError):
        decode_weights(bytes(blob), expected_layers=(25, 32, 9))
    blob[-20] ^= 0x10
    with pytest.raises(ChecksumError):
        decode_weights(bytes(blob))


def test_vectorized_speedup_on_wide_architecture():
    w = init_weights(WIDE_LAYERS, 0)
    x = np.random.default_rng(0).normal(size=(256, 25))

    def best(fn, reps=3):
        fn(w, x)
        out = []
        for _ in range(reps):
            t = time.perf_counter()
            fn(w, x)
            out.append(time.perf_counter() - t)
        return min(out)
    ratio = best(forward_naive) / best(forward_batch_vectorized)
    print(f"vectorized forward speedup on 25-(512x7)-9: {ratio:.1f}x")
    assert ratio >= 2.0
