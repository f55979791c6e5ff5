"""Curve-task experiment drivers shared by the CLI, the acceptance suite and
the tutorial scripts."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .envs import (CurveEnvConfig, CurveTrajectory, cubic_fit, env_step, evaluate_rollouts,
                   recover_actions, sample_demos, shortest_path_reference)
from .model import ModelBundle
from .planning import PLANNING_SAMPLER, plan_goal, rollout_policy
from .sampling import LangevinConfig
from .training import TrainConfig, rollout_bc, train, train_bc

# One sampler serves the training prior, replay collection and evaluation.
CURVE_SAMPLER = LangevinConfig(n_steps=20, step_init=1.0, step_final=1.0, noise_scale=0.03)
CURVE_POSTERIOR = LangevinConfig(n_steps=20, step_init=2e-3, step_final=1e-3, noise_scale=0.3)
TEST_SEED_OFFSET = 100


def curve_profile(context_len=4, seed=0, **overrides) -> TrainConfig:
    """Curve-task training defaults; keyword overrides replace any field."""
    base = dict(iterations=3000, context_len=context_len, lr_policy=1e-3, batch_size=64, n_samples=4,
                posterior_mode="mcmc", sampler=CURVE_SAMPLER, posterior_sampler=CURVE_POSTERIOR,
                eval_sampler=CURVE_SAMPLER, transition_mode="implanted", w_beta=0.0,
                prefill_transitions=2000, eval_interval=500, seed=seed)
    base.update(overrides)
    return TrainConfig(**base)


def curve_step(env: CurveEnvConfig):
    return lambda s, a: env_step(env, s, a)


def curve_init_states(env: CurveEnvConfig):
    """Start states on the left edge with y uniform in the y range."""
    def init(rng, n):
        return np.stack([np.full(n, env.x_range[0]), rng.uniform(*env.y_range, n)], axis=1)
    return init


def held_out_starts(env: CurveEnvConfig, n: int, seed: int) -> np.ndarray:
    """Start states of held-out demos, so evaluation starts are in-distribution."""
    demos, _ = sample_demos(env, n, seed + TEST_SEED_OFFSET)
    return np.array([d.points[0] for d in demos])


def policy_rollouts(bundle: ModelBundle, env: CurveEnvConfig, starts, sampler: LangevinConfig, seed: int):
    S, _ = rollout_policy(bundle.policy, curve_step(env), np.atleast_2d(starts), env.horizon, sampler,
                          np.random.default_rng(seed))
    return [CurveTrajectory(s) for s in S]


def make_eval_fn(env: CurveEnvConfig, n_rollouts: int, seed: int, sampler: LangevinConfig = CURVE_SAMPLER):
    starts = held_out_starts(env, n_rollouts, seed)

    def eval_fn(bundle, step):
        ev = evaluate_rollouts(policy_rollouts(bundle, env, starts, sampler, seed + step))
        return {"acceptance_rate": ev.acceptance_rate, "mean_residual": ev.mean_residual}
    return eval_fn


@dataclass
class ContextRun:
    context_len: int
    seed: int
    acceptance_rate: float
    mean_residual: float | None
    bundle: ModelBundle = field(repr=False)
    metrics: object = field(repr=False)


def run_context_experiment(context_len: int, seed: int, n_demos=1000, n_rollouts=200, env=None,
                           eval_interval=None, **overrides) -> ContextRun:
    """Train on ``n_demos`` cubic demos, then score ``n_rollouts`` single-start rollouts."""
    env = env or CurveEnvConfig()
    demos, _ = sample_demos(env, n_demos, seed)
    cfg = curve_profile(context_len, seed, **overrides)
    if eval_interval is not None:
        cfg.eval_interval = eval_interval
    eval_fn = make_eval_fn(env, n_rollouts, seed, cfg.eval_sampler)
    bundle, metrics = train(cfg, demos, curve_step(env), curve_init_states(env), eval_fn, h=env.h)
    last = metrics.rows[-1]
    return ContextRun(context_len, seed, last["acceptance_rate"], last["mean_residual"], bundle, metrics)


def _context_job(args):
    L, seed, kw = args
    run = run_context_experiment(L, seed, **kw)
    run.metrics = run.metrics.rows
    return run


def context_sweep(lengths=(1, 2, 4), seeds=(0, 1, 2), workers=None, **kw):
    """Every (L, seed) pair; runs in worker processes when ``workers`` > 1."""
    jobs = [(L, s, kw) for L in lengths for s in seeds]
    if workers and workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_context_job, jobs))
    return [_context_job(j) for j in jobs]


@dataclass
class BCRun:
    context_len: int
    acceptance_rate: float
    straight_fraction: float
    coeffs: list


def run_bc_experiment(context_len: int, seed=0, epochs=100, lr=1e-3, n_demos=1000, n_rollouts=200,
                      env=None) -> BCRun:
    """Behavior cloning on recovered actions, deterministic single-start rollouts."""
    env = env or CurveEnvConfig()
    demos, _ = sample_demos(env, n_demos, seed)
    actions = [recover_actions(d)[:, None] for d in demos]
    bc = train_bc(demos, actions, context_len, epochs, lr=lr, seed=seed)
    S = rollout_bc(bc, curve_step(env), held_out_starts(env, n_rollouts, seed), env.horizon)
    ev = evaluate_rollouts([CurveTrajectory(s) for s in S])
    straight = float(np.mean([abs(c[0]) < 0.5 for c in ev.coeffs]))
    return BCRun(context_len, ev.acceptance_rate, straight, ev.coeffs)


@dataclass
class GoalResult:
    goal_error: float
    fit_residual: float
    fit_a: float
    reference_a: float
    demo_a: float
    path: np.ndarray = field(repr=False)


def run_planning_experiment(bundle: ModelBundle, n_goals=20, seed=0, env=None,
                            cfg: LangevinConfig = PLANNING_SAMPLER, prior_cfg: LangevinConfig = CURVE_SAMPLER):
    """Plan from the first L points of held-out demos to their right endpoints."""
    env = env or CurveEnvConfig()
    demos, _ = sample_demos(env, n_goals, seed + 2 * TEST_SEED_OFFSET)
    L = bundle.policy.context_len
    rng = np.random.default_rng(seed)
    out = []
    for d in demos:
        ctx, goal = d.points[:L], d.points[-1]
        steps = len(d.points) - L
        plan = plan_goal(bundle.policy, bundle.transition, ctx, goal, steps, cfg, rng, prior_cfg=prior_cfg)
        path = np.concatenate([ctx, plan.predicted_states])
        coeffs, resid = cubic_fit(CurveTrajectory(path))
        ref, _ = cubic_fit(shortest_path_reference(ctx, goal, steps))
        out.append(GoalResult(abs(path[-1, 1] - goal[1]), resid, coeffs.a, ref.a, d.coeffs.a, path))
    return out
