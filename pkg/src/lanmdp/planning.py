"""Policy execution by prior sampling and goal-conditioned planning by
Langevin over whole action sequences, differentiated through mean rollouts."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .model import (EnergyPolicy, GaussianTransition, energy, energy_input_grads, make_context,
                    transition_input_grads, transition_logprob, transition_mean)
from .sampling import LangevinConfig, langevin_chain, sample_prior

PLANNING_SAMPLER = LangevinConfig(n_steps=100, step_init=1e-3, step_final=1e-4, noise_scale=0.1,
                                  clip_norm=0.05, inference_double=True)


def rollout_policy(policy: EnergyPolicy, env_step, s0, T: int, cfg: LangevinConfig, rng, history=None):
    """Run the prior policy for ``T`` steps in a batch of environments.

    ``s0`` has shape ``(state_dim,)`` or ``(B, state_dim)``.  ``history``
    optionally supplies earlier states ``(B, h, state_dim)`` ending at s0.
    Returns ``(states (B, T+1, sd), actions (B, T, ad))`` (batch axis dropped
    for a single start state).
    """
    s0 = np.asarray(s0, dtype=float)
    single = s0.ndim == 1
    s0 = np.atleast_2d(s0)
    B, L = len(s0), policy.context_len
    if history is None:
        window = np.repeat(s0[:, None, :], L, axis=1)
    else:
        hist = np.asarray(history, dtype=float).reshape(B, -1, s0.shape[-1])
        window = np.stack([make_context(h, L) for h in hist])
    states, actions = [s0], []
    for _ in range(T):
        a = sample_prior(policy, window, cfg, 1, rng)[:, 0, :]
        s_next = np.asarray(env_step(states[-1], a), dtype=float)
        actions.append(a)
        states.append(s_next)
        window = np.concatenate([window[:, 1:], s_next[:, None, :]], axis=1)
    S = np.stack(states, axis=1)
    A = np.stack(actions, axis=1) if actions else np.zeros((B, 0, policy.action_dim))
    return (S[0], A[0]) if single else (S, A)


def execute_policy(policy: EnergyPolicy, env_step, s0, T: int, cfg: LangevinConfig, rng, history=None):
    """State trajectory s_0..s_T from executing the prior policy."""
    return rollout_policy(policy, env_step, s0, T, cfg, rng, history)[0]


@dataclass
class Plan:
    actions: np.ndarray
    predicted_states: np.ndarray
    goal: np.ndarray
    residual_to_goal: float
    objective: float

    def to_rows(self):
        rows = []
        for k, (a, s) in enumerate(zip(self.actions, self.predicted_states)):
            rows.append([k, *np.atleast_1d(a).tolist(), *np.atleast_1d(s).tolist()])
        return rows

    def write_csv(self, path):
        ad, sd = self.actions.shape[-1], self.predicted_states.shape[-1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", *[f"action_{i}" for i in range(ad)], *[f"pred_state_{i}" for i in range(sd)]])
            w.writerows(self.to_rows())


def mean_rollout(trans: GaussianTransition, s_t, actions):
    """States s_{t+1..t+H} from iterating the transition mean."""
    states, s = [], np.asarray(s_t, dtype=float)
    for a in actions:
        s = transition_mean(trans, s, a)
        states.append(s)
    return np.array(states).reshape(len(states), trans.state_dim)


def plan_objective(policy: EnergyPolicy, trans: GaussianTransition, ctx, goal, actions):
    """Sum of energies along the mean rollout plus log p(goal | s_{T-1}, a_{T-1})."""
    ctx = np.asarray(ctx, dtype=float)
    actions = np.asarray(actions, dtype=float)
    H = len(actions)
    path = np.concatenate([ctx, mean_rollout(trans, ctx[-1], actions[:-1])], axis=0)
    L = len(ctx)
    windows = np.stack([path[k:k + L] for k in range(H)])
    total = float(np.sum(energy(policy, windows, actions)))
    return total + float(transition_logprob(trans, path[-1], actions[-1], goal))


def plan_objective_grad(policy: EnergyPolicy, trans: GaussianTransition, ctx, goal, actions):
    """Gradient of :func:`plan_objective` with respect to every action, back through time."""
    ctx = np.asarray(ctx, dtype=float)
    actions = np.asarray(actions, dtype=float)
    H, L = len(actions), len(ctx)
    prefix = np.concatenate([ctx, mean_rollout(trans, ctx[-1], actions[:-1])], axis=0)
    # prefix[L-1+k] is the state s_k the k-th action is taken from
    g_states = np.zeros_like(prefix)
    g_actions = np.zeros_like(actions)

    windows = np.stack([prefix[k:k + L] for k in range(H)])
    g_ctx, g_a = energy_input_grads(policy, windows, actions)
    g_actions += g_a
    for k in range(H):
        g_states[k:k + L] += g_ctx[k]

    s_last = prefix[-1]
    resid = np.asarray(goal, dtype=float) - transition_mean(trans, s_last, actions[-1])
    gs, ga = transition_input_grads(trans, s_last, actions[-1], resid / trans.sigma ** 2)
    g_states[-1] += gs
    g_actions[-1] += ga

    for k in range(H - 2, -1, -1):
        idx_from = L - 1 + k
        gs, ga = transition_input_grads(trans, prefix[idx_from], actions[k], g_states[idx_from + 1])
        g_states[idx_from] += gs
        g_actions[k] += ga
    return g_actions


def plan_goal(policy: EnergyPolicy, trans: GaussianTransition, ctx, goal, steps_to_go: int,
              cfg: LangevinConfig = PLANNING_SAMPLER, rng=None, prior_cfg: LangevinConfig | None = None,
              init="prior") -> Plan:
    """Sample an action sequence reaching ``goal`` after ``steps_to_go`` steps."""
    if steps_to_go < 1:
        raise ValueError("steps_to_go must be >= 1")
    ctx = np.asarray(ctx, dtype=float)
    goal = np.asarray(goal, dtype=float)
    if goal.shape != (policy.state_dim,):
        raise ValueError("goal dimension mismatch")
    rng = np.random.default_rng() if rng is None else rng
    if init == "prior":
        actions = _prior_init(policy, trans, ctx, steps_to_go, prior_cfg or cfg, rng)
    else:
        actions = rng.uniform(cfg.init_low, cfg.init_high, size=(steps_to_go, policy.action_dim))

    def grad(a_flat):
        return plan_objective_grad(policy, trans, ctx, goal, a_flat.reshape(actions.shape)).ravel()

    actions = langevin_chain(grad, actions.ravel(), cfg, rng).reshape(actions.shape)
    return make_plan(policy, trans, ctx, goal, actions)


def make_plan(policy, trans, ctx, goal, actions) -> Plan:
    pred = mean_rollout(trans, np.asarray(ctx)[-1], actions)
    return Plan(actions, pred, np.asarray(goal, dtype=float), float(np.linalg.norm(pred[-1] - goal)),
                plan_objective(policy, trans, ctx, goal, actions))


def _prior_init(policy, trans, ctx, H, cfg, rng):
    window, actions = ctx.copy(), []
    for _ in range(H):
        a = sample_prior(policy, window, cfg, 1, rng)[0]
        actions.append(a)
        s_next = transition_mean(trans, window[-1], a)
        window = np.concatenate([window[1:], s_next[None]], axis=0)
    return np.array(actions)


def plan_summary(plan: Plan, fit_residual=None, extra=None) -> str:
    d = {"residual_to_goal": plan.residual_to_goal, "objective": plan.objective,
         "goal": plan.goal.tolist(), "fit_residual": fit_residual}
    d.update(extra or {})
    return json.dumps(d, sort_keys=True, indent=2)
