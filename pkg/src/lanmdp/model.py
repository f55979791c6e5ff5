"""Energy-based context-conditioned policy and Gaussian transition generator.

A context is an ``(L, state_dim)`` array holding the most recent ``L`` states,
oldest first.  Functions broadcast over leading batch axes: a batch of
contexts has shape ``(..., L, state_dim)`` and matching actions
``(..., action_dim)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .nn import MlpParams, mlp_forward, mlp_grad, mlp_init

BUNDLE_VERSION = 1


@dataclass
class EnergyPolicy:
    net: MlpParams
    context_len: int
    state_dim: int
    action_dim: int
    l2_energy_coef: float = 0.0

    def __post_init__(self):
        if self.context_len < 1:
            raise ValueError("context_len must be >= 1")
        if self.net.n_in != self.context_len * self.state_dim + self.action_dim or self.net.n_out != 1:
            raise ValueError("energy net must map L*state_dim + action_dim inputs to one output")

    @classmethod
    def create(cls, context_len, state_dim, action_dim, hidden=None, activation="swish",
               seed=0, l2_energy_coef=0.0):
        hidden = [4 * context_len] if hidden is None else list(hidden)
        dims = [context_len * state_dim + action_dim, *hidden, 1]
        return cls(mlp_init(dims, activation, seed), context_len, state_dim, action_dim, l2_energy_coef)

    def inputs(self, ctx, action):
        ctx = np.asarray(ctx, dtype=float)
        action = np.asarray(action, dtype=float)
        if ctx.shape[-2:] != (self.context_len, self.state_dim):
            raise ValueError(f"context shape {ctx.shape[-2:]} != {(self.context_len, self.state_dim)}")
        if action.shape[-1] != self.action_dim:
            raise ValueError(f"action width {action.shape[-1]} != {self.action_dim}")
        lead = np.broadcast_shapes(ctx.shape[:-2], action.shape[:-1])
        flat = np.broadcast_to(ctx, (*lead, *ctx.shape[-2:])).reshape(*lead, -1)
        return np.concatenate([flat, np.broadcast_to(action, (*lead, self.action_dim))], axis=-1)

    def to_dict(self):
        return {"net": self.net.to_dict(), "context_len": self.context_len, "state_dim": self.state_dim,
                "action_dim": self.action_dim, "l2_energy_coef": self.l2_energy_coef}

    @classmethod
    def from_dict(cls, d):
        return cls(MlpParams.from_dict(d["net"]), d["context_len"], d["state_dim"], d["action_dim"],
                   d.get("l2_energy_coef", 0.0))


@dataclass
class GaussianTransition:
    net: MlpParams
    sigma: float
    state_dim: int
    action_dim: int

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.net.n_in != self.state_dim + self.action_dim or self.net.n_out != self.state_dim:
            raise ValueError("transition net must map state_dim + action_dim inputs to state_dim outputs")

    @classmethod
    def create(cls, state_dim, action_dim, sigma=0.05, hidden=(64, 64), activation="leaky_relu", seed=0):
        dims = [state_dim + action_dim, *hidden, state_dim]
        return cls(mlp_init(dims, activation, seed), sigma, state_dim, action_dim)

    def inputs(self, s, a):
        s = np.asarray(s, dtype=float)
        a = np.asarray(a, dtype=float)
        if s.shape[-1] != self.state_dim or a.shape[-1] != self.action_dim:
            raise ValueError("state/action width mismatch")
        lead = np.broadcast_shapes(s.shape[:-1], a.shape[:-1])
        return np.concatenate([np.broadcast_to(s, (*lead, self.state_dim)),
                               np.broadcast_to(a, (*lead, self.action_dim))], axis=-1)

    def to_dict(self):
        return {"net": self.net.to_dict(), "sigma": self.sigma, "state_dim": self.state_dim,
                "action_dim": self.action_dim}

    @classmethod
    def from_dict(cls, d):
        return cls(MlpParams.from_dict(d["net"]), d["sigma"], d["state_dim"], d["action_dim"])


@dataclass
class TransitionEnsemble:
    """Two transition models fit to the same data from different seeds.

    Member 0 is the one used for likelihoods and rollouts; member 1 only
    serves as a second opinion for disagreement scores.
    """
    members: list[GaussianTransition]
    seeds: list[int] = field(default_factory=lambda: [0, 1])

    def __post_init__(self):
        if len(self.members) != 2:
            raise ValueError("ensemble must have exactly 2 members")
        a, b = self.members
        if (a.state_dim, a.action_dim, a.sigma) != (b.state_dim, b.action_dim, b.sigma):
            raise ValueError("ensemble members disagree on dims or sigma")

    @property
    def primary(self) -> GaussianTransition:
        return self.members[0]

    @classmethod
    def create(cls, state_dim, action_dim, sigma=0.05, hidden=(64, 64), seeds=(0, 1)):
        return cls([GaussianTransition.create(state_dim, action_dim, sigma, hidden, seed=s) for s in seeds],
                   list(seeds))

    def to_dict(self):
        return {"members": [m.to_dict() for m in self.members], "seeds": list(self.seeds)}

    @classmethod
    def from_dict(cls, d):
        return cls([GaussianTransition.from_dict(m) for m in d["members"]], list(d.get("seeds", [0, 1])))


def energy(policy: EnergyPolicy, ctx, action):
    """Negative energy f(a; ctx)."""
    return mlp_forward(policy.net, policy.inputs(ctx, action))[..., 0]


def energy_grads(policy: EnergyPolicy, ctx, action, weights=None):
    """Gradients of ``sum(weights * f(a; ctx))``.

    Returns ``(grad_action, grad_params)``; grad_action keeps the batch shape.
    """
    x = policy.inputs(ctx, action)
    w = np.ones(x.shape[:-1]) if weights is None else np.broadcast_to(weights, x.shape[:-1])
    gp, gx = mlp_grad(policy.net, x, w[..., None])
    return gx[..., -policy.action_dim:], gp


def energy_input_grads(policy: EnergyPolicy, ctx, action):
    """Gradients of f with respect to the context states and the action."""
    x = policy.inputs(ctx, action)
    _, gx = mlp_grad(policy.net, x, np.ones((*x.shape[:-1], 1)))
    n_ctx = policy.context_len * policy.state_dim
    g_ctx = gx[..., :n_ctx].reshape(*x.shape[:-1], policy.context_len, policy.state_dim)
    return g_ctx, gx[..., n_ctx:]


def transition_mean(trans: GaussianTransition, s, a):
    return mlp_forward(trans.net, trans.inputs(s, a))


def transition_logprob(trans: GaussianTransition, s, a, s_next):
    s_next = np.asarray(s_next, dtype=float)
    resid = s_next - transition_mean(trans, s, a)
    d = trans.state_dim
    return -0.5 * d * np.log(2 * np.pi * trans.sigma ** 2) - np.sum(resid ** 2, axis=-1) / (2 * trans.sigma ** 2)


def transition_logprob_grads(trans: GaussianTransition, s, a, s_next, weights=None):
    """Gradients of ``sum(weights * log p(s_next | s, a))`` via the residual cotangent."""
    x = trans.inputs(s, a)
    resid = np.asarray(s_next, dtype=float) - mlp_forward(trans.net, x)
    cot = resid / trans.sigma ** 2
    if weights is not None:
        cot = cot * np.asarray(weights, dtype=float)[..., None]
    gp, gx = mlp_grad(trans.net, x, cot)
    return gx[..., trans.state_dim:], gp


def transition_input_grads(trans: GaussianTransition, s, a, cotangent):
    """Vector-Jacobian product of the mean with respect to (s, a)."""
    x = trans.inputs(s, a)
    _, gx = mlp_grad(trans.net, x, cotangent)
    return gx[..., :trans.state_dim], gx[..., trans.state_dim:]


def make_context(states, context_len):
    """Window of the last ``context_len`` states, left-padded by repeating the first."""
    states = np.asarray(states, dtype=float)
    if len(states) == 0:
        raise ValueError("need at least one state")
    if len(states) >= context_len:
        return states[len(states) - context_len:].copy()
    pad = np.repeat(states[:1], context_len - len(states), axis=0)
    return np.concatenate([pad, states], axis=0)


def trajectory_log_joint(policy: EnergyPolicy, trans: GaussianTransition, states, actions) -> float:
    """Sum of per-step energies and transition log-densities.

    The policy normalizers log Z(ctx) are omitted, so the value is only
    meaningful for comparisons under a fixed policy.
    """
    states = np.asarray(states, dtype=float)
    actions = np.asarray(actions, dtype=float).reshape(-1, policy.action_dim)
    if len(actions) != len(states) - 1:
        raise ValueError(f"need {len(states) - 1} actions for {len(states)} states, got {len(actions)}")
    total = 0.0
    for t, a in enumerate(actions):
        ctx = make_context(states[:t + 1], policy.context_len)
        total += float(energy(policy, ctx, a)) + float(transition_logprob(trans, states[t], a, states[t + 1]))
    return total


def ensemble_disagreement(ens: TransitionEnsemble, s, a):
    m0 = transition_mean(ens.members[0], s, a)
    m1 = transition_mean(ens.members[1], s, a)
    return np.linalg.norm(m0 - m1, axis=-1)


def implanted_curve_transition(h=0.1, sigma=0.05) -> GaussianTransition:
    """Exact mean (x, y), dy -> (x + h, y + dy) as a single linear layer."""
    net = MlpParams([3, 2], [np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]])], [np.array([h, 0.0])], "identity")
    return GaussianTransition(net, sigma, 2, 1)


@dataclass
class ModelBundle:
    policy: EnergyPolicy
    ensemble: TransitionEnsemble
    meta: dict = field(default_factory=dict)

    @property
    def transition(self) -> GaussianTransition:
        return self.ensemble.primary

    def to_dict(self):
        return {
            "format_version": BUNDLE_VERSION,
            "context_len": self.policy.context_len,
            "state_dim": self.policy.state_dim,
            "action_dim": self.policy.action_dim,
            "sigma": self.transition.sigma,
            "policy": self.policy.to_dict(),
            "ensemble": self.ensemble.to_dict(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format_version") != BUNDLE_VERSION:
            raise ValueError(f"unsupported bundle version {d.get('format_version')!r}")
        return cls(EnergyPolicy.from_dict(d["policy"]), TransitionEnsemble.from_dict(d["ensemble"]),
                   d.get("meta", {}))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
