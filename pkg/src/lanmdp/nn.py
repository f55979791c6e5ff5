"""Small multi-layer perceptrons with hand-written backprop and Adam/AdamW.

Weights are stored as ``(fan_out, fan_in)`` matrices so a layer computes
``x @ W.T + b``.  Every function accepts a single input vector or a batch of
inputs stacked along the leading axis; parameter gradients are summed over
the batch, which lets callers weight individual samples through the output
cotangent.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

FORMAT_VERSION = 1
LEAKY_SLOPE = 0.01
ACTIVATIONS = ("swish", "leaky_relu", "identity")


@dataclass
class MlpParams:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "swish"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("layer count does not match layer_dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_dims[i + 1], self.layer_dims[i])
            if w.shape != shape or b.shape != (shape[0],):
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape} inconsistent with {shape}")

    @property
    def n_in(self) -> int:
        return self.layer_dims[0]

    @property
    def n_out(self) -> int:
        return self.layer_dims[-1]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_arrays(self, arrays) -> "MlpParams":
        arrays = list(arrays)
        return MlpParams(list(self.layer_dims), arrays[0::2], arrays[1::2], self.activation)

    def zeros_like(self) -> "MlpParams":
        return self.with_arrays(np.zeros_like(a) for a in self.arrays())

    def copy(self) -> "MlpParams":
        return self.with_arrays(a.copy() for a in self.arrays())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_flat(self, vec) -> "MlpParams":
        vec = np.asarray(vec, dtype=float)
        arrays, i = [], 0
        for a in self.arrays():
            arrays.append(vec[i:i + a.size].reshape(a.shape).copy())
            i += a.size
        if i != vec.size:
            raise ValueError(f"expected {i} values, got {vec.size}")
        return self.with_arrays(arrays)

    def scaled(self, c: float) -> "MlpParams":
        return self.with_arrays(c * a for a in self.arrays())

    def added(self, other: "MlpParams", c: float = 1.0) -> "MlpParams":
        return self.with_arrays(a + c * b for a, b in zip(self.arrays(), other.arrays()))

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "layer_dims": list(self.layer_dims),
            "activation": self.activation,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpParams":
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported network format version {d.get('format_version')!r}")
        weights = [np.asarray(w, dtype=float).reshape(m, n)
                   for w, n, m in zip(d["weights"], d["layer_dims"][:-1], d["layer_dims"][1:])]
        biases = [np.asarray(b, dtype=float) for b in d["biases"]]
        return cls(list(d["layer_dims"]), weights, biases, d["activation"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "MlpParams":
        return cls.from_dict(json.loads(text))


def mlp_init(layer_dims, activation="swish", seed=0) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ValueError(f"layer_dims must have >= 2 positive entries, got {layer_dims!r}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(dims, weights, biases, activation)


def _act(name, z):
    if name == "swish":
        return z * expit(z)
    if name == "leaky_relu":
        return np.where(z > 0, z, LEAKY_SLOPE * z)
    return z


def _act_deriv(name, z):
    if name == "swish":
        s = expit(z)
        return s + z * s * (1.0 - s)
    if name == "leaky_relu":
        # slope at exactly 0 is the negative-side slope
        return np.where(z > 0, 1.0, LEAKY_SLOPE)
    return np.ones_like(z)


def _as_batch(params, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.n_in:
        raise ValueError(f"input width {x.shape[-1]} != {params.n_in}")
    lead = x.shape[:-1]
    return x.reshape(-1, params.n_in), lead


def _forward_cache(params, x2):
    acts, pre = [x2], []
    h = x2
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        pre.append(z)
        h = z if i == n_layers - 1 else _act(params.activation, z)
        acts.append(h)
    return acts, pre


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    x2, lead = _as_batch(params, x)
    acts, _ = _forward_cache(params, x2)
    return acts[-1].reshape(*lead, params.n_out)


def mlp_grad(params: MlpParams, x, cotangent):
    """Reverse-mode derivatives of ``sum(cotangent * mlp_forward(params, x))``.

    Returns ``(param_grads, input_grad)``; param_grads are summed over the batch.
    """
    x2, lead = _as_batch(params, x)
    c = np.asarray(cotangent, dtype=float)
    if c.shape != (*lead, params.n_out):
        raise ValueError(f"cotangent shape {c.shape} != {(*lead, params.n_out)}")
    acts, pre = _forward_cache(params, x2)
    delta = c.reshape(-1, params.n_out)
    n_layers = len(params.weights)
    gw, gb = [None] * n_layers, [None] * n_layers
    for i in reversed(range(n_layers)):
        if i < n_layers - 1:
            delta = delta * _act_deriv(params.activation, pre[i])
        gw[i] = delta.T @ acts[i]
        gb[i] = delta.sum(axis=0)
        delta = delta @ params.weights[i]
    grads = MlpParams(list(params.layer_dims), gw, gb, params.activation)
    return grads, delta.reshape(*lead, params.n_in)


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: MlpParams, **hyper) -> "OptimState":
        st = cls(**hyper)
        st.m = [np.zeros_like(a) for a in params.arrays()]
        st.v = [np.zeros_like(a) for a in params.arrays()]
        return st


def optim_step(state: OptimState, params: MlpParams, grads: MlpParams):
    """One Adam step (AdamW when weight_decay > 0).  Returns ``(params, state)``.

    ``grads`` is the gradient of the loss being minimized.
    """
    p_arr, g_arr = params.arrays(), grads.arrays()
    if len(p_arr) != len(g_arr) or any(p.shape != g.shape for p, g in zip(p_arr, g_arr)):
        raise ValueError("gradient shapes do not match parameters")
    if not state.m:
        state = OptimState.for_params(params, lr=state.lr, beta1=state.beta1, beta2=state.beta2,
                                      eps=state.eps, weight_decay=state.weight_decay)
    for i, g in enumerate(g_arr):
        if not np.all(np.isfinite(g)):
            kind = "weight" if i % 2 == 0 else "bias"
            raise FloatingPointError(f"non-finite gradient in layer {i // 2} {kind}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_m = [b1 * m + (1 - b1) * g for m, g in zip(state.m, g_arr)]
    new_v = [b2 * v + (1 - b2) * g * g for v, g in zip(state.v, g_arr)]
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    new_p = []
    for p, m, v in zip(p_arr, new_m, new_v):
        upd = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            p = p * (1 - state.lr * state.weight_decay)
        new_p.append(p - upd)
    new_state = OptimState(state.lr, b1, b2, state.eps, state.weight_decay, t, new_m, new_v)
    return params.with_arrays(new_p), new_state
