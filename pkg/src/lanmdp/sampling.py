"""Short-run Langevin samplers for the policy prior and the action posterior,
plus the self-normalized importance-weighted posterior."""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict, replace

import numpy as np

from .model import (EnergyPolicy, GaussianTransition, TransitionEnsemble, energy_grads,
                    ensemble_disagreement, transition_logprob, transition_logprob_grads,
                    transition_mean)


class UnexplainedTransitionError(RuntimeError):
    """No sampled action gives the observed next state non-zero likelihood."""


@dataclass(frozen=True)
class LangevinConfig:
    n_steps: int = 20
    step_init: float = 1.0
    step_final: float = 1.0
    noise_scale: float = 1.0
    clip_norm: float = 1.0
    inference_double: bool = False
    init_low: float = -1.0
    init_high: float = 1.0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not (0 < self.step_final <= self.step_init):
            raise ValueError("need 0 < step_final <= step_init")
        if self.clip_norm <= 0 or self.noise_scale < 0:
            raise ValueError("clip_norm must be > 0 and noise_scale >= 0")

    @property
    def total_steps(self) -> int:
        return 2 * self.n_steps if self.inference_double else self.n_steps

    def replace(self, **kw) -> "LangevinConfig":
        return replace(self, **kw)

    def to_dict(self):
        return asdict(self)


# Default sampler profiles for the curve task and MuJoCo-scale control; the
# tuned curve-task profile used for training lives in lanmdp.experiments.
CURVE_SAMPLER = LangevinConfig(n_steps=20, step_init=1.0, step_final=1.0)
MUJOCO_SAMPLER = LangevinConfig(n_steps=100, step_init=10.0, step_final=1.0)


@dataclass
class WeightedActions:
    actions: np.ndarray
    weights: np.ndarray
    log_likelihoods: np.ndarray

    def __post_init__(self):
        if len(self.actions) != len(self.weights):
            raise ValueError("actions and weights differ in length")

    def mean(self, fn=None):
        vals = self.actions if fn is None else np.asarray([fn(a) for a in self.actions])
        return np.tensordot(self.weights, vals, axes=1)


def step_size(k: int, cfg: LangevinConfig) -> float:
    """Quadratic decay from step_init at k=0 to step_final at k=n_steps-1, then flat."""
    if not 0 <= k < cfg.total_steps:
        raise IndexError(f"step {k} outside [0, {cfg.total_steps})")
    K = cfg.n_steps
    if K == 1 or k >= K - 1:
        return cfg.step_final if K > 1 else cfg.step_init
    frac = 1.0 - k / (K - 1)
    return cfg.step_final + (cfg.step_init - cfg.step_final) * frac ** 2


def langevin_chain(grad_fn, init, cfg: LangevinConfig, rng, hook=None):
    """Run clipped Langevin chains.

    ``init`` has shape ``(..., d)``; every leading index is an independent
    chain.  ``hook(k, update)`` if given sees each realized update.
    """
    a = np.array(init, dtype=float)
    for k in range(cfg.total_steps):
        s = step_size(k, cfg)
        g = grad_fn(a)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient at Langevin step {k}")
        upd = s * g
        if cfg.noise_scale:
            upd = upd + cfg.noise_scale * math.sqrt(2 * s) * rng.standard_normal(a.shape)
        norm = np.linalg.norm(upd, axis=-1, keepdims=True)
        upd = upd * np.minimum(1.0, cfg.clip_norm / np.maximum(norm, 1e-300))
        if hook is not None:
            hook(k, upd)
        a = a + upd
    return a


def _init_actions(shape, cfg, rng):
    return rng.uniform(cfg.init_low, cfg.init_high, size=shape)


def _tile_ctx(ctx, n):
    # (..., L, sd) -> (..., n, L, sd)
    return np.broadcast_to(ctx[..., None, :, :], (*ctx.shape[:-2], n, *ctx.shape[-2:]))


def sample_prior(policy: EnergyPolicy, ctx, cfg: LangevinConfig, n: int, rng):
    """``n`` prior samples per context: shape ``(..., n, action_dim)``."""
    ctx = np.asarray(ctx, dtype=float)
    shape = (*ctx.shape[:-2], n, policy.action_dim)
    if n == 0:
        return np.zeros(shape)
    tiled = _tile_ctx(ctx, n)
    init = _init_actions(shape, cfg, rng)
    return langevin_chain(lambda a: energy_grads(policy, tiled, a)[0], init, cfg, rng)


def sample_posterior_mcmc(policy: EnergyPolicy, trans: GaussianTransition, ctx, s_next,
                          cfg: LangevinConfig, rng, n: int = 1):
    """Langevin on f(a; ctx) + log p(s_next | s_t, a); shape ``(..., n, action_dim)``."""
    ctx = np.asarray(ctx, dtype=float)
    s_next = np.asarray(s_next, dtype=float)
    tiled = _tile_ctx(ctx, n)
    s_t = tiled[..., -1, :]
    target = np.broadcast_to(s_next[..., None, :], s_t.shape)

    def grad(a):
        return energy_grads(policy, tiled, a)[0] + transition_logprob_grads(trans, s_t, a, target)[0]

    init = _init_actions((*ctx.shape[:-2], n, policy.action_dim), cfg, rng)
    return langevin_chain(grad, init, cfg, rng)


def normalized_weights(log_w, axis=-1):
    """Softmax of log-weights along ``axis`` (max-subtracted)."""
    log_w = np.asarray(log_w, dtype=float)
    m = np.max(log_w, axis=axis, keepdims=True)
    w = np.exp(log_w - m)
    return w / w.sum(axis=axis, keepdims=True)


def explainable(log_lik, axis=-1):
    """False where every raw likelihood along ``axis`` underflows to zero."""
    return np.exp(np.max(log_lik, axis=axis)) > 0


def importance_posterior(policy: EnergyPolicy, trans: GaussianTransition, ctx, s_next,
                         cfg: LangevinConfig, n: int, rng) -> WeightedActions:
    if n < 2:
        raise ValueError("importance_posterior needs n >= 2")
    ctx = np.asarray(ctx, dtype=float)
    actions = sample_prior(policy, ctx, cfg, n, rng)
    log_lik = transition_logprob(trans, ctx[-1], actions, s_next)
    if not explainable(log_lik):
        resid = np.min(np.linalg.norm(np.asarray(s_next) - transition_mean(trans, ctx[-1], actions), axis=-1))
        raise UnexplainedTransitionError(
            f"all {n} importance weights underflow; min residual {resid:.4g}, sigma {trans.sigma}")
    return WeightedActions(actions, normalized_weights(log_lik), log_lik)


def filter_by_disagreement(ens: TransitionEnsemble, ctx, candidates, keep_fraction=0.5):
    """Keep the ``ceil(keep_fraction * n)`` candidates the ensemble agrees on most."""
    candidates = np.asarray(candidates, dtype=float)
    if len(candidates) == 0:
        raise ValueError("no candidates to filter")
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must be in (0, 1]")
    ctx = np.asarray(ctx, dtype=float)
    d = ensemble_disagreement(ens, ctx[-1], candidates)
    keep = math.ceil(keep_fraction * len(candidates))
    order = np.argsort(d, kind="stable")[:keep]
    return candidates[np.sort(order)] if keep == len(candidates) else candidates[order]
