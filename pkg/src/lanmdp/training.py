"""Maximum-likelihood training from state-only demonstrations.

The policy update uses either Langevin posterior samples or prior samples
reweighted by the transition likelihood of the observed next state; the
transition is fit to a mix of demo transitions (with inferred actions) and
real self-interaction data from a replay buffer.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .model import (EnergyPolicy, GaussianTransition, ModelBundle, TransitionEnsemble, energy,
                    energy_grads, implanted_curve_transition, make_context, transition_logprob,
                    transition_logprob_grads)
from .nn import MlpParams, OptimState, mlp_forward, mlp_grad, mlp_init, optim_step
from .planning import rollout_policy
from .model import ensemble_disagreement
from .sampling import (LangevinConfig, explainable, normalized_weights,
                       sample_posterior_mcmc, sample_prior)

log = logging.getLogger(__name__)

METRICS_HEADER = ["step", "acceptance_rate", "mean_residual", "policy_loss", "transition_nll", "buffer_size"]


@dataclass
class DemoSegment:
    ctx: np.ndarray
    next_state: np.ndarray


@dataclass
class DemoSegments:
    """All segments of a demo set, stored as stacked arrays."""
    ctx: np.ndarray          # (N, L, state_dim)
    next_state: np.ndarray   # (N, state_dim)

    def __len__(self):
        return len(self.ctx)

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return DemoSegment(self.ctx[i], self.next_state[i])
        return DemoSegments(self.ctx[i], self.next_state[i])


def segment_demos(trajs, context_len: int) -> DemoSegments:
    """One segment per transition, windows left-padded with the first state."""
    ctxs, nexts = [], []
    for traj in trajs:
        states = np.asarray(getattr(traj, "points", traj), dtype=float)
        if len(states) < 2:
            raise ValueError("every trajectory needs at least two states")
        for t in range(len(states) - 1):
            ctxs.append(make_context(states[:t + 1], context_len))
            nexts.append(states[t + 1])
    return DemoSegments(np.array(ctxs), np.array(nexts))


class ReplayBuffer:
    """Fixed-capacity FIFO store of (s, a, s') transitions."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.s_next = np.zeros((capacity, state_dim))
        self._next = 0
        self.size = 0

    def __len__(self):
        return self.size

    def add(self, s, a, s_next):
        s, a, s_next = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (s, a, s_next))
        for row in range(len(s)):
            i = self._next
            self.s[i], self.a[i], self.s_next[i] = s[row], a[row], s_next[row]
            self._next = (i + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def ordered(self):
        """Contents oldest first."""
        if self.size < self.capacity:
            idx = np.arange(self.size)
        else:
            idx = (self._next + np.arange(self.capacity)) % self.capacity
        return self.s[idx], self.a[idx], self.s_next[idx]

    def sample(self, m: int, rng):
        if self.size == 0:
            raise ValueError("replay buffer is empty")
        idx = rng.integers(0, self.size, size=m)
        return self.s[idx], self.a[idx], self.s_next[idx]


@dataclass
class TrainConfig:
    iterations: int = 3000
    context_len: int = 4
    lr_policy: float = 1e-4
    lr_transition: float = 3e-3
    batch_size: int = 64
    n_samples: int = 4
    w_beta: float = 0.0
    posterior_mode: str = "importance"
    sampler: LangevinConfig = field(default_factory=LangevinConfig)
    posterior_sampler: LangevinConfig | None = None
    eval_sampler: LangevinConfig | None = None
    policy_hidden: list | None = None
    policy_activation: str = "swish"
    l2_energy_coef: float = 0.0
    weight_decay: float = 0.0
    sigma: float = 0.05
    transition_mode: str = "learned"
    transition_hidden: list = field(default_factory=lambda: [64, 64])
    replay_capacity: int = 20000
    prefill_transitions: int = 2000
    pretrain_steps: int = 2000
    transition_batch: int = 256
    rollout_interval: int = 100
    rollouts_per_collection: int = 8
    rollout_horizon: int = 20
    transition_steps_per_update: int = 1
    ensemble_filter: bool = False
    keep_fraction: float = 0.5
    eval_interval: int = 500
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.sampler, dict):
            self.sampler = LangevinConfig(**self.sampler)
        for name in ("posterior_sampler", "eval_sampler"):
            if isinstance(getattr(self, name), dict):
                setattr(self, name, LangevinConfig(**getattr(self, name)))
        if not 0.0 <= self.w_beta <= 1.0:
            raise ValueError("w_beta must be in [0, 1]")
        if self.posterior_mode not in ("importance", "mcmc"):
            raise ValueError(f"unknown posterior_mode {self.posterior_mode!r}")
        if self.transition_mode not in ("learned", "implanted"):
            raise ValueError(f"unknown transition_mode {self.transition_mode!r}")
        if self.iterations < 0 or self.batch_size < 1 or self.n_samples < 2 or self.context_len < 1:
            raise ValueError("iterations >= 0, batch_size >= 1, n_samples >= 2, context_len >= 1 required")

    def to_dict(self):
        return asdict(self)


@dataclass
class PolicyGradInfo:
    surrogate: float
    skipped: int
    posterior_actions: np.ndarray
    posterior_weights: np.ndarray
    kept: np.ndarray


def _energy_penalty_grad(policy, ctx, actions):
    """Gradient of l2_coef * mean(f^2) over the given samples."""
    f = energy(policy, ctx, actions)
    n = f.size
    _, gp = energy_grads(policy, ctx, actions, weights=2 * policy.l2_energy_coef * f / n)
    return gp


def policy_grad(policy: EnergyPolicy, trans, ctx, next_state, cfg: TrainConfig, rng, ensemble=None):
    """Minibatch estimate of minus the expected policy log-likelihood gradient.

    ``ctx`` is ``(m, L, sd)`` and ``next_state`` ``(m, sd)``.  Returns the
    descent direction (an MlpParams) and a :class:`PolicyGradInfo`.
    """
    ctx = np.asarray(ctx, dtype=float)
    next_state = np.asarray(next_state, dtype=float)
    m, n = len(ctx), cfg.n_samples
    if m == 0:
        raise ValueError("empty batch")
    tiled = np.broadcast_to(ctx[:, None], (m, n, *ctx.shape[1:]))
    prior = sample_prior(policy, ctx, cfg.sampler, n, rng)                      # (m, n, ad)

    if cfg.posterior_mode == "importance":
        post = prior
        log_lik = transition_logprob(trans, ctx[:, None, -1, :], prior, next_state[:, None, :])
        mask = np.ones((m, n), dtype=bool)
        if cfg.ensemble_filter and ensemble is not None:
            d = ensemble_disagreement(ensemble, ctx[:, None, -1, :], prior)
            keep = math.ceil(cfg.keep_fraction * n)
            order = np.argsort(d, axis=1, kind="stable")[:, :keep]
            mask = np.zeros((m, n), dtype=bool)
            np.put_along_axis(mask, order, True, axis=1)
        log_lik = np.where(mask, log_lik, -np.inf)
        ok = explainable(log_lik, axis=1)
        w = np.zeros((m, n))
        if ok.any():
            w[ok] = normalized_weights(log_lik[ok], axis=1)
        post_ctx = tiled
    else:
        psampler = cfg.posterior_sampler or cfg.sampler
        post = sample_posterior_mcmc(policy, trans, ctx, next_state, psampler, rng, n=1)    # (m, 1, ad)
        w = np.ones((m, 1))
        ok = np.ones(m, dtype=bool)
        post_ctx = ctx[:, None]

    skipped = int(m - ok.sum())
    if skipped:
        log.info("skipped %d segment(s) with unexplainable transitions", skipped)
    n_used = max(int(ok.sum()), 1)
    # ascent direction: weighted posterior term minus prior mean, per used segment
    w_post = w * ok[:, None] / n_used
    w_prior = np.broadcast_to((ok / (n * n_used))[:, None], (m, n))
    _, g_post = energy_grads(policy, post_ctx, post, weights=w_post)
    _, g_prior = energy_grads(policy, tiled, prior, weights=w_prior)
    grad = g_prior.added(g_post, -1.0)
    surrogate = float(np.sum(w_post * energy(policy, post_ctx, post)) -
                      np.sum(w_prior * energy(policy, tiled, prior)))
    if policy.l2_energy_coef:
        grad = grad.added(_energy_penalty_grad(policy, tiled, prior))
    info = PolicyGradInfo(surrogate, skipped, post, w, ok)
    return grad, info


def transition_grad(trans: GaussianTransition, demo_batch=None, replay_batch=None, w_beta=0.0,
                    demo_weights=None):
    """Gradient of the mixed transition negative log-likelihood.

    ``demo_batch`` is ``(s, a_hat, s_next)`` with inferred actions, optionally
    weighted by ``demo_weights`` (rows summing to one per segment);
    ``replay_batch`` is ``(s, a, s_next)`` from real interaction.  An empty
    side hands its weight to the other.
    """
    has_demo = demo_batch is not None and len(demo_batch[0]) > 0
    has_replay = replay_batch is not None and len(replay_batch[0]) > 0
    if not (has_demo or has_replay):
        raise ValueError("both transition batches are empty")
    wd = w_beta if has_demo and has_replay else float(has_demo)
    total = trans.net.zeros_like()
    if has_demo and wd > 0:
        s, a, s2 = (np.asarray(v, dtype=float) for v in demo_batch)
        if demo_weights is None:
            demo_weights = np.ones(a.shape[:-1])
        weights = np.broadcast_to(demo_weights, a.shape[:-1]) / len(s)
        _, gp = transition_logprob_grads(trans, s, a, s2, weights=weights)
        total = total.added(gp, -wd)
    if has_replay and wd < 1:
        s, a, s2 = (np.asarray(v, dtype=float) for v in replay_batch)
        _, gp = transition_logprob_grads(trans, s, a, s2, weights=np.full(len(s), 1.0 / len(s)))
        total = total.added(gp, -(1 - wd))
    return total


def collect_rollouts(policy: EnergyPolicy, env_step, replay: ReplayBuffer, n_episodes: int, horizon: int,
                     rng, init_states, sampler: LangevinConfig, random_policy=False):
    """Run the prior policy (or uniform random actions) and append every transition."""
    if n_episodes == 0:
        return replay
    s0 = np.asarray(init_states(rng, n_episodes), dtype=float)
    if random_policy:
        s = s0
        for _ in range(horizon):
            a = rng.uniform(sampler.init_low, sampler.init_high, size=(len(s), policy.action_dim))
            s2 = np.asarray(env_step(s, a), dtype=float)
            replay.add(s, a, s2)
            s = s2
        return replay
    S, A = rollout_policy(policy, env_step, s0, horizon, sampler, rng)
    S = S.reshape(n_episodes, horizon + 1, -1)
    A = A.reshape(n_episodes, horizon, -1)
    for t in range(horizon):
        replay.add(S[:, t], A[:, t], S[:, t + 1])
    return replay


def transition_nll(trans: GaussianTransition, replay: ReplayBuffer, max_rows=2000) -> float:
    s, a, s2 = replay.ordered()
    s, a, s2 = s[-max_rows:], a[-max_rows:], s2[-max_rows:]
    return float(-np.mean(transition_logprob(trans, s, a, s2)))


def pretrain_transition(ens: TransitionEnsemble, replay: ReplayBuffer, steps: int, lr: float,
                        batch_size: int = 256, seed: int = 0, weight_decay: float = 0.0):
    """Fit each member independently to the buffer by maximum likelihood."""
    if len(replay) == 0:
        raise ValueError("replay buffer is empty")
    if steps == 0:
        return ens
    members = []
    for i, member in enumerate(ens.members):
        rng = np.random.default_rng([seed, i, 7])
        net, st = member.net, OptimState.for_params(member.net, lr=lr, weight_decay=weight_decay)
        cur = member
        for _ in range(steps):
            grad = transition_grad(cur, replay_batch=replay.sample(batch_size, rng))
            net, st = optim_step(st, net, grad)
            cur = GaussianTransition(net, member.sigma, member.state_dim, member.action_dim)
        members.append(cur)
    return TransitionEnsemble(members, list(ens.seeds))


@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def append(self, **row):
        self.rows.append({k: row.get(k) for k in METRICS_HEADER})

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("# " + json.dumps(self.config, sort_keys=True) + "\n")
            w = csv.writer(fh)
            w.writerow(METRICS_HEADER)
            for r in self.rows:
                w.writerow(["" if r[k] is None else _fmt(r[k]) for k in METRICS_HEADER])


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def read_metrics_csv(path):
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    if rows and set(rows[0]) != set(METRICS_HEADER):
        raise ValueError(f"unexpected metrics columns {list(rows[0])}")
    return [{k: (float(v) if v not in ("", None) else None) for k, v in r.items()} for r in rows]


class TrainingDiverged(FloatingPointError):
    def __init__(self, msg, checkpoint):
        super().__init__(msg)
        self.checkpoint = checkpoint


def build_model(cfg: TrainConfig, state_dim: int, action_dim: int, h: float = 0.1) -> ModelBundle:
    policy = EnergyPolicy.create(cfg.context_len, state_dim, action_dim, hidden=cfg.policy_hidden,
                                 activation=cfg.policy_activation, seed=cfg.seed,
                                 l2_energy_coef=cfg.l2_energy_coef)
    if cfg.transition_mode == "implanted":
        t = implanted_curve_transition(h=h, sigma=cfg.sigma)
        ens = TransitionEnsemble([t, GaussianTransition(t.net.copy(), t.sigma, t.state_dim, t.action_dim)],
                                 [cfg.seed, cfg.seed])
    else:
        seeds = [cfg.seed * 2 + 1000, cfg.seed * 2 + 1001]
        ens = TransitionEnsemble.create(state_dim, action_dim, cfg.sigma, cfg.transition_hidden, seeds)
    return ModelBundle(policy, ens, {"train_config": cfg.to_dict()})


def train(cfg: TrainConfig, demos, env_step, init_states, eval_fn=None, state_dim=2, action_dim=1,
          h=0.1, progress=None):
    """Run the full training procedure; returns ``(ModelBundle, MetricsLog)``.

    ``init_states(rng, n)`` draws environment start states and
    ``eval_fn(bundle, step)`` returns task metrics for the log.
    """
    if len(demos) == 0:
        raise ValueError("no demonstrations")
    rng = np.random.default_rng(cfg.seed)
    bundle = build_model(cfg, state_dim, action_dim, h)
    policy, ens = bundle.policy, bundle.ensemble
    segs = segment_demos(demos, cfg.context_len)
    metrics = MetricsLog(config=cfg.to_dict())
    learned = cfg.transition_mode == "learned"

    replay = ReplayBuffer(cfg.replay_capacity, state_dim, action_dim)
    if learned:
        n_ep = max(1, math.ceil(cfg.prefill_transitions / cfg.rollout_horizon))
        collect_rollouts(policy, env_step, replay, n_ep, cfg.rollout_horizon, rng, init_states, cfg.sampler,
                         random_policy=True)
        ens = pretrain_transition(ens, replay, cfg.pretrain_steps, cfg.lr_transition, cfg.transition_batch,
                                  seed=cfg.seed, weight_decay=cfg.weight_decay)
    p_state = OptimState.for_params(policy.net, lr=cfg.lr_policy, weight_decay=cfg.weight_decay)
    t_states = [OptimState.for_params(m.net, lr=cfg.lr_transition, weight_decay=cfg.weight_decay)
                for m in ens.members]

    def snapshot():
        return ModelBundle(policy, ens, {"train_config": cfg.to_dict()})

    def log_metrics(step, surrogate):
        task = eval_fn(snapshot(), step) if eval_fn else {}
        nll = transition_nll(ens.primary, replay) if len(replay) else None
        metrics.append(step=step, acceptance_rate=task.get("acceptance_rate"),
                       mean_residual=task.get("mean_residual"), policy_loss=surrogate,
                       transition_nll=nll, buffer_size=len(replay))

    surrogate = 0.0
    for it in range(cfg.iterations):
        idx = rng.integers(0, len(segs), size=cfg.batch_size)
        batch = segs[idx]
        try:
            grad, info = policy_grad(policy, ens.primary, batch.ctx, batch.next_state, cfg, rng, ensemble=ens)
            new_net, p_state = optim_step(p_state, policy.net, grad)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"iteration {it}: {exc}", snapshot()) from exc
        policy = EnergyPolicy(new_net, policy.context_len, policy.state_dim, policy.action_dim,
                              policy.l2_energy_coef)
        surrogate = abs(info.surrogate)

        if learned and (it + 1) % cfg.rollout_interval == 0:
            collect_rollouts(policy, env_step, replay, cfg.rollouts_per_collection, cfg.rollout_horizon, rng,
                             init_states, cfg.sampler)
        if learned:
            members = []
            for j, member in enumerate(ens.members):
                net, st = member.net, t_states[j]
                for _ in range(cfg.transition_steps_per_update):
                    demo_b = (batch.ctx[:, None, -1, :], info.posterior_actions, batch.next_state[:, None, :])
                    g = transition_grad(member, demo_b, replay.sample(cfg.transition_batch, rng), cfg.w_beta,
                                        demo_weights=info.posterior_weights)
                    net, st = optim_step(st, net, g)
                    member = GaussianTransition(net, member.sigma, member.state_dim, member.action_dim)
                t_states[j] = st
                members.append(member)
            ens = TransitionEnsemble(members, list(ens.seeds))

        if (it + 1) % cfg.eval_interval == 0 or it + 1 == cfg.iterations:
            log_metrics(it + 1, surrogate)
        if progress:
            progress(it + 1)
    if cfg.iterations == 0:
        log_metrics(0, 0.0)
    return snapshot(), metrics


@dataclass
class BCPolicy:
    """Gaussian behavior-cloning policy: MLP mean over the flattened context."""
    net: MlpParams
    context_len: int
    state_dim: int
    action_dim: int
    std: float = 0.0

    def mean(self, ctx):
        ctx = np.asarray(ctx, dtype=float)
        return mlp_forward(self.net, ctx.reshape(*ctx.shape[:-2], -1))

    def act(self, ctx, rng=None):
        mu = self.mean(ctx)
        if self.std and rng is not None:
            mu = mu + self.std * rng.standard_normal(mu.shape)
        return mu


def train_bc(demos, actions, context_len: int, epochs: int, lr: float = 1e-3, hidden=None, seed=0,
             batch_size: int = 64, activation="swish"):
    """Fit the BC mean by minibatch mean-squared error from context to action.

    ``actions`` holds per-trajectory recovered actions (one fewer than states).
    """
    if actions is None:
        raise ValueError("behavior cloning needs recoverable actions")
    segs = segment_demos(demos, context_len)
    acts = np.concatenate([np.asarray(a, dtype=float).reshape(-1, np.shape(a)[-1]) for a in actions])
    if len(acts) != len(segs):
        raise ValueError("recovered actions do not line up with demo transitions")
    sd, ad = segs.ctx.shape[-1], acts.shape[-1]
    hidden = [4 * context_len] if hidden is None else list(hidden)
    net = mlp_init([context_len * sd, *hidden, ad], activation, seed)
    st = OptimState.for_params(net, lr=lr)
    rng = np.random.default_rng(seed)
    X = segs.ctx.reshape(len(segs), -1)
    for _ in range(epochs):
        perm = rng.permutation(len(X))
        for start in range(0, len(X), batch_size):
            idx = perm[start:start + batch_size]
            err = mlp_forward(net, X[idx]) - acts[idx]
            g, _ = mlp_grad(net, X[idx], 2 * err / len(idx))
            net, st = optim_step(st, net, g)
    return BCPolicy(net, context_len, sd, ad)


def rollout_bc(policy: BCPolicy, env_step, s0, T: int, rng=None):
    s0 = np.atleast_2d(np.asarray(s0, dtype=float))
    window = np.repeat(s0[:, None, :], policy.context_len, axis=1)
    states = [s0]
    for _ in range(T):
        a = policy.act(window, rng)
        s2 = np.asarray(env_step(states[-1], a), dtype=float)
        states.append(s2)
        window = np.concatenate([window[:, 1:], s2[:, None, :]], axis=1)
    return np.stack(states, axis=1)
