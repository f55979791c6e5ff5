import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lanmdp.nn import (MlpParams, OptimState, mlp_forward, mlp_grad, mlp_init, optim_step,
                       LEAKY_SLOPE)
from conftest import central_diff, rel_err


def test_init_deterministic_and_zero_bias():
    a, b = mlp_init([2, 1], seed=0), mlp_init([2, 1], seed=0)
    assert np.array_equal(a.weights[0], b.weights[0])
    assert np.all(a.biases[0] == 0)


def test_init_seeds_differ():
    a, b = mlp_init([3, 12, 1], seed=0), mlp_init([3, 12, 1], seed=1)
    assert not np.array_equal(a.weights[0], b.weights[0])


def test_init_glorot_bounds():
    p = mlp_init([5, 7, 3], seed=3)
    for w in p.weights:
        lim = np.sqrt(6.0 / sum(w.shape))
        assert np.all(np.abs(w) <= lim)


@pytest.mark.parametrize("dims", [[3], [], [2, 0, 1], [2, -1]])
def test_init_rejects_bad_dims(dims):
    with pytest.raises(ValueError):
        mlp_init(dims)


def test_bad_shapes_rejected():
    with pytest.raises(ValueError):
        MlpParams([2, 1], [np.zeros((2, 2))], [np.zeros(1)])
    with pytest.raises(ValueError):
        MlpParams([2, 1], [np.zeros((1, 2))], [np.zeros(1)], "relu")


def test_zero_weights_give_bias():
    p = mlp_init([3, 4, 2], seed=0)
    p = MlpParams(p.layer_dims, [np.zeros_like(w) for w in p.weights],
                  [np.full(4, 0.3), np.array([1.5, -2.0])], "swish")
    out = mlp_forward(p, np.random.default_rng(0).normal(size=(5, 3)))
    assert np.allclose(out, [1.5, -2.0])


def test_identity_layer():
    p = MlpParams([3, 3], [np.eye(3)], [np.zeros(3)], "identity")
    x = np.array([0.2, -1.0, 4.0])
    assert np.array_equal(mlp_forward(p, x), x)


def _manual_forward(p, x):
    h = x
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        z = w @ h + b
        if i < len(p.weights) - 1:
            if p.activation == "swish":
                z = z * (1 / (1 + np.exp(-z)))
            elif p.activation == "leaky_relu":
                z = np.array([v if v > 0 else LEAKY_SLOPE * v for v in z])
        h = z
    return h


@pytest.mark.parametrize("act", ["swish", "leaky_relu", "identity"])
def test_forward_matches_manual(act):
    p = mlp_init([2, 8, 1], act, seed=5)
    p = p.with_arrays([a + 0.1 for a in p.arrays()])
    x = np.array([0.4, -0.7])
    assert np.allclose(mlp_forward(p, x), _manual_forward(p, x), atol=1e-14)


def test_batch_shapes():
    p = mlp_init([3, 5, 2], seed=0)
    x = np.random.default_rng(0).normal(size=(4, 6, 3))
    out = mlp_forward(p, x)
    assert out.shape == (4, 6, 2)
    assert np.allclose(out[2, 3], mlp_forward(p, x[2, 3]))


def test_zero_cotangent():
    p = mlp_init([3, 8, 1], seed=0)
    g, gx = mlp_grad(p, np.ones((4, 3)), np.zeros((4, 1)))
    assert all(np.all(a == 0) for a in g.arrays()) and np.all(gx == 0)


def test_linear_layer_closed_form():
    rng = np.random.default_rng(2)
    W, b = rng.normal(size=(2, 3)), rng.normal(size=2)
    p = MlpParams([3, 2], [W], [b], "identity")
    x, c = rng.normal(size=3), rng.normal(size=2)
    g, gx = mlp_grad(p, x, c)
    assert np.allclose(gx, W.T @ c)
    assert np.allclose(g.weights[0], np.outer(c, x))
    assert np.allclose(g.biases[0], c)


def _fd_check(p, x, c):
    g, gx = mlp_grad(p, x, c)
    f_params = lambda v: float(np.sum(c * mlp_forward(p.from_flat(v), x)))
    f_input = lambda v: float(np.sum(c * mlp_forward(p, v)))
    return rel_err(g.flat(), central_diff(f_params, p.flat())), rel_err(gx, central_diff(f_input, x))


def test_gradient_matches_finite_differences_100_trials():
    rng = np.random.default_rng(0)
    worst = 0.0
    for trial in range(100):
        dims = [int(rng.integers(1, 6)), *rng.integers(1, 17, size=rng.integers(1, 3)), int(rng.integers(1, 4))]
        act = ["swish", "leaky_relu", "identity"][trial % 3]
        p = mlp_init(dims, act, seed=trial)
        p = p.with_arrays([a + 0.05 * rng.normal(size=a.shape) for a in p.arrays()])
        x = rng.normal(size=(3, dims[0]))
        c = rng.normal(size=(3, dims[-1]))
        worst = max(worst, *_fd_check(p, x, c))
    assert worst < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.integers(0, 1000))
def test_output_bias_shift(c, seed):
    p = mlp_init([3, 6, 1], seed=seed)
    x = np.random.default_rng(seed).normal(size=(4, 3))
    shifted = p.with_arrays(p.arrays()[:-1] + [p.biases[-1] + c])
    assert np.allclose(mlp_forward(shifted, x), mlp_forward(p, x) + c, atol=1e-12)
    ones = np.ones((4, 1))
    assert np.allclose(mlp_grad(shifted, x, ones)[1], mlp_grad(p, x, ones)[1], atol=1e-12)


def test_forward_deterministic():
    p = mlp_init([4, 9, 1], seed=2)
    x = np.linspace(-1, 1, 4)
    assert np.array_equal(mlp_forward(p, x), mlp_forward(p, x))


def test_flat_roundtrip():
    p = mlp_init([3, 4, 2], seed=1)
    q = p.from_flat(p.flat() * 2)
    assert np.allclose(q.flat(), 2 * p.flat())
    with pytest.raises(ValueError):
        p.from_flat(np.zeros(3))


def test_serialization_roundtrip():
    p = mlp_init([3, 4, 1], "leaky_relu", seed=4)
    q = MlpParams.from_json(p.to_json())
    assert q.activation == "leaky_relu"
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), q.arrays()))
    d = json.loads(p.to_json())
    d["format_version"] = 99
    with pytest.raises(ValueError):
        MlpParams.from_dict(d)


def test_adam_zero_grad_no_change():
    p = mlp_init([2, 3, 1], seed=0)
    st_ = OptimState.for_params(p, lr=0.1)
    q, _ = optim_step(st_, p, p.zeros_like())
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), q.arrays()))


def test_adam_first_step_magnitude_is_lr():
    p = mlp_init([2, 3, 1], seed=0)
    g = p.from_flat(np.random.default_rng(0).normal(size=p.flat().size))
    q, st_ = optim_step(OptimState.for_params(p, lr=1e-3), p, g)
    step = q.flat() - p.flat()
    assert np.allclose(np.abs(step), 1e-3, rtol=1e-4)
    assert np.all(np.sign(step) == -np.sign(g.flat()))
    assert st_.step == 1


def test_adam_constant_gradient_moves_opposite():
    p = mlp_init([2, 1], seed=0)
    g = p.from_flat(np.array([1.0, -2.0, 0.5]))
    st_ = OptimState.for_params(p, lr=0.01)
    q = p
    for _ in range(50):
        q, st_ = optim_step(st_, q, g)
    assert np.all(np.sign(q.flat() - p.flat()) == -np.sign(g.flat()))


def test_adamw_decays_weights():
    p = mlp_init([2, 1], seed=0)
    q, _ = optim_step(OptimState.for_params(p, lr=0.1, weight_decay=0.5), p, p.zeros_like())
    assert np.linalg.norm(q.weights[0]) < np.linalg.norm(p.weights[0])


def test_nonfinite_gradient_named():
    p = mlp_init([2, 3, 1], seed=0)
    g = p.zeros_like()
    g.biases[1][0] = np.nan
    with pytest.raises(FloatingPointError, match="layer 1 bias"):
        optim_step(OptimState.for_params(p), p, g)
