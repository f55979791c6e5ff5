import numpy as np
import pytest

import lanmdp.planning as planning
from lanmdp.envs import CurveEnvConfig, env_step
from lanmdp.model import EnergyPolicy, GaussianTransition, implanted_curve_transition
from lanmdp.nn import MlpParams
from lanmdp.planning import (PLANNING_SAMPLER, execute_policy, make_plan, mean_rollout, plan_goal, plan_objective,
                             plan_objective_grad, rollout_policy)
from lanmdp.sampling import CURVE_SAMPLER, LangevinConfig
from conftest import central_diff, rel_err

ENV = CurveEnvConfig()


def step(s, a):
    return env_step(ENV, s, a)


def _peaked_policy(a_star, c=5.0, L=1, sd=2):
    # f(a) ~ -c |a - a*| from two leaky-relu units
    n_in = L * sd + 1
    W1 = np.zeros((2, n_in))
    W1[0, -1], W1[1, -1] = 1.0, -1.0
    net = MlpParams([n_in, 2, 1], [W1, np.array([[-c, -c]])], [np.array([-a_star, a_star]), np.zeros(1)],
                    "leaky_relu")
    return EnergyPolicy(net, L, sd, 1)


def _flat_policy(L=1, sd=2, ad=1):
    p = EnergyPolicy.create(L, sd, ad, seed=0)
    return EnergyPolicy(p.net.with_arrays([np.zeros_like(a) for a in p.net.arrays()]), L, sd, ad)


def _linear_trans(A, W, sigma=0.05):
    sd, ad = W.shape
    net = MlpParams([sd + ad, sd], [np.concatenate([A, W], axis=1)], [np.zeros(sd)], "identity")
    return GaussianTransition(net, sigma, sd, ad)


def test_execute_zero_steps():
    pol = EnergyPolicy.create(2, 2, 1, seed=0)
    out = execute_policy(pol, step, np.array([-1.0, 0.2]), 0, CURVE_SAMPLER, np.random.default_rng(0))
    assert out.shape == (1, 2) and np.allclose(out[0], [-1.0, 0.2])


def test_execute_delta_peaked_matches_analytic_rollout():
    a_star = 0.07
    cfg = LangevinConfig(n_steps=300, step_init=0.05, step_final=1e-3, noise_scale=0.0, clip_norm=10.0)
    out = execute_policy(_peaked_policy(a_star), step, np.array([-1.0, 0.1]), 5, cfg, np.random.default_rng(0))
    expect = np.stack([-1.0 + 0.1 * np.arange(6), 0.1 + a_star * np.arange(6)], axis=1)
    assert np.max(np.abs(out - expect)) < 2e-2


def test_execute_reproducible():
    pol = EnergyPolicy.create(3, 2, 1, seed=4)
    s0 = np.array([[-1.0, 0.0], [-1.0, 0.5]])
    a = execute_policy(pol, step, s0, 6, CURVE_SAMPLER, np.random.default_rng(7))
    b = execute_policy(pol, step, s0, 6, CURVE_SAMPLER, np.random.default_rng(7))
    assert np.array_equal(a, b) and a.shape == (2, 7, 2)


def test_markov_policy_sees_only_current_state(monkeypatch):
    seen = []
    real = planning.sample_prior

    def spy(policy, window, cfg, n, rng):
        seen.append(np.array(window))
        return real(policy, window, cfg, n, rng)

    monkeypatch.setattr(planning, "sample_prior", spy)
    pol = EnergyPolicy.create(1, 2, 1, seed=0)
    S, _ = rollout_policy(pol, step, np.array([[-1.0, 0.3]]), 4, CURVE_SAMPLER, np.random.default_rng(0))
    assert len(seen) == 4
    for t, w in enumerate(seen):
        assert w.shape == (1, 1, 2) and np.array_equal(w[0, 0], S[0, t])


def test_history_fills_window(monkeypatch):
    seen = []
    real = planning.sample_prior
    monkeypatch.setattr(planning, "sample_prior",
                        lambda p, w, c, n, r: seen.append(np.array(w)) or real(p, w, c, n, r))
    pol = EnergyPolicy.create(3, 2, 1, seed=0)
    hist = np.array([[[-1.0, 0.0], [-0.9, 0.1], [-0.8, 0.3]]])
    rollout_policy(pol, step, hist[:, -1], 1, CURVE_SAMPLER, np.random.default_rng(0), history=hist)
    assert np.array_equal(seen[0][0], hist[0])


def test_mean_rollout_linear():
    trans = _linear_trans(np.eye(2), np.array([[0.0], [1.0]]))
    states = mean_rollout(trans, np.array([0.0, 0.0]), np.array([[0.1], [0.2], [-0.3]]))
    assert np.allclose(states[:, 1], [0.1, 0.3, 0.0]) and np.allclose(states[:, 0], 0)


@pytest.mark.parametrize("H,L,sd,ad", [(1, 1, 2, 1), (2, 2, 2, 1), (3, 3, 3, 2), (5, 2, 3, 3), (4, 4, 2, 1)])
def test_bptt_gradient_matches_finite_differences(H, L, sd, ad):
    rng = np.random.default_rng(H * 10 + L)
    pol = EnergyPolicy.create(L, sd, ad, hidden=[8], seed=H)
    pol = EnergyPolicy(pol.net.with_arrays([a + 0.3 * rng.normal(size=a.shape) for a in pol.net.arrays()]),
                       L, sd, ad)
    trans = GaussianTransition.create(sd, ad, sigma=0.3, hidden=(8,), activation="swish", seed=H)
    ctx = rng.uniform(-1, 1, (L, sd))
    goal = rng.uniform(-1, 1, sd)
    actions = rng.uniform(-1, 1, (H, ad))
    g = plan_objective_grad(pol, trans, ctx, goal, actions)
    fd = central_diff(lambda a: plan_objective(pol, trans, ctx, goal, a), actions)
    assert rel_err(g, fd) < 1e-4


def test_bptt_on_curve_transition():
    rng = np.random.default_rng(0)
    pol = EnergyPolicy.create(4, 2, 1, seed=1)
    trans = implanted_curve_transition()
    ctx = np.stack([-1 + 0.1 * np.arange(4), rng.uniform(-0.5, 0.5, 4)], 1)
    actions = rng.uniform(-0.2, 0.2, (5, 1))
    goal = np.array([-0.2, 0.1])
    g = plan_objective_grad(pol, trans, ctx, goal, actions)
    fd = central_diff(lambda a: plan_objective(pol, trans, ctx, goal, a), actions)
    assert rel_err(g, fd) < 1e-4


def test_one_step_plan_matches_grid_search():
    trans = _linear_trans(np.eye(2), np.array([[0.5], [1.0]]))
    s, goal = np.array([0.2, -0.1]), np.array([0.3, 0.25])
    pol = _flat_policy()
    grid = np.linspace(-2, 2, 40001)[:, None]
    vals = [plan_objective(pol, trans, s[None], goal, a[None]) for a in grid[::10]]
    coarse = grid[::10][int(np.argmax(vals))]
    fine = grid[np.abs(grid[:, 0] - coarse[0]) < 2e-3]
    best = fine[int(np.argmax([plan_objective(pol, trans, s[None], goal, a[None]) for a in fine]))][0]
    plan = plan_goal(pol, trans, s[None], goal, 1, PLANNING_SAMPLER, np.random.default_rng(0), init="uniform")
    assert abs(plan.actions[0, 0] - best) < 1e-2


def test_prior_init_endpoint_is_stationary():
    pol = _flat_policy()
    trans = _linear_trans(np.eye(2), np.array([[0.0], [1.0]]))
    ctx = np.array([[0.0, 0.1]])
    init = planning._prior_init(pol, trans, ctx, 4, CURVE_SAMPLER, np.random.default_rng(3))
    goal = mean_rollout(trans, ctx[-1], init)[-1]
    assert make_plan(pol, trans, ctx, goal, init).residual_to_goal < 1e-12
    assert np.max(np.abs(plan_objective_grad(pol, trans, ctx, goal, init))) < 1e-9
    cfg = PLANNING_SAMPLER.replace(noise_scale=0.0)
    plan = plan_goal(pol, trans, ctx, goal, 4, cfg, np.random.default_rng(3), prior_cfg=CURVE_SAMPLER)
    assert plan.residual_to_goal < 1e-9


def test_objective_monotone_without_noise():
    A = np.array([[1.0, 0.1], [0.0, 0.9]])
    trans = _linear_trans(A, np.array([[0.3], [1.0]]), sigma=0.2)
    pol = _flat_policy()
    ctx, goal = np.array([[0.0, 0.0]]), np.array([0.4, 0.8])
    vals, a = [], np.zeros(3)
    for k in range(200):
        vals.append(plan_objective(pol, trans, ctx, goal, a.reshape(3, 1)))
        a = a + 1e-3 * plan_objective_grad(pol, trans, ctx, goal, a.reshape(3, 1)).ravel()
    assert np.all(np.diff(vals) >= -1e-12) and vals[-1] > vals[0]


def test_plan_goal_objective_nondecreasing_in_chain(monkeypatch):
    trans = _linear_trans(np.eye(2), np.array([[0.0], [1.0]]), sigma=0.2)
    pol = _flat_policy()
    ctx, goal = np.array([[0.0, 0.0]]), np.array([0.0, 0.6])
    vals = []
    real = planning.langevin_chain

    def tracked(grad_fn, init, cfg, rng, hook=None):
        state = {"a": np.array(init, dtype=float)}

        def h(k, upd):
            vals.append(plan_objective(pol, trans, ctx, goal, state["a"].reshape(-1, 1)))
            state["a"] = state["a"] + upd
        return real(grad_fn, init, cfg, rng, hook=h)

    monkeypatch.setattr(planning, "langevin_chain", tracked)
    cfg = LangevinConfig(n_steps=100, step_init=1e-3, step_final=1e-4, noise_scale=0.0, clip_norm=10.0)
    plan_goal(pol, trans, ctx, goal, 3, cfg, np.random.default_rng(0), init="uniform")
    assert len(vals) == 100 and np.all(np.diff(vals) >= -1e-12)


def test_plan_errors():
    pol = _flat_policy()
    trans = implanted_curve_transition()
    with pytest.raises(ValueError):
        plan_goal(pol, trans, np.zeros((1, 2)), np.zeros(2), 0)
    with pytest.raises(ValueError):
        plan_goal(pol, trans, np.zeros((1, 2)), np.zeros(3), 2)
    bad = EnergyPolicy(pol.net.with_arrays([np.full_like(a, np.nan) for a in pol.net.arrays()]), 1, 2, 1)
    with pytest.raises(FloatingPointError, match="step"):
        plan_goal(bad, trans, np.zeros((1, 2)), np.zeros(2), 2, init="uniform", rng=np.random.default_rng(0))


def test_plan_csv(tmp_path):
    pol = _flat_policy()
    trans = implanted_curve_transition()
    plan = plan_goal(pol, trans, np.array([[-1.0, 0.0]]), np.array([-0.7, 0.3]), 3,
                     rng=np.random.default_rng(0), init="uniform")
    assert plan.predicted_states.shape == (3, 2)
    assert np.isclose(plan.residual_to_goal, np.linalg.norm(plan.predicted_states[-1] - plan.goal))
    p = tmp_path / "plan.csv"
    plan.write_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "step,action_0,pred_state_0,pred_state_1" and len(lines) == 4
