import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lanmdp import oracle
from lanmdp.model import EnergyPolicy, GaussianTransition, TransitionEnsemble
from lanmdp.nn import MlpParams
from lanmdp.sampling import (CURVE_SAMPLER, LangevinConfig, UnexplainedTransitionError, WeightedActions,
                             filter_by_disagreement, importance_posterior, langevin_chain,
                             normalized_weights, sample_posterior_mcmc, sample_prior, step_size)


def test_config_validation():
    with pytest.raises(ValueError):
        LangevinConfig(n_steps=0)
    with pytest.raises(ValueError):
        LangevinConfig(step_init=0.1, step_final=1.0)
    with pytest.raises(ValueError):
        LangevinConfig(clip_norm=0)
    assert LangevinConfig(n_steps=7, inference_double=True).total_steps == 14
    assert CURVE_SAMPLER.n_steps == 20 and CURVE_SAMPLER.step_init == 1.0


def test_step_size_schedule():
    cfg = LangevinConfig(n_steps=10, step_init=10.0, step_final=1.0, inference_double=True)
    sched = [step_size(k, cfg) for k in range(cfg.total_steps)]
    assert sched[0] == 10.0 and sched[9] == 1.0
    assert all(a >= b for a, b in zip(sched, sched[1:]))
    assert all(s == 1.0 for s in sched[9:])
    with pytest.raises(IndexError):
        step_size(20, cfg)
    with pytest.raises(IndexError):
        step_size(-1, cfg)


def test_chain_identity_without_noise_or_gradient(rng):
    init = rng.normal(size=(5, 3))
    out = langevin_chain(lambda a: np.zeros_like(a), init, LangevinConfig(noise_scale=0.0), rng)
    assert np.array_equal(out, init)


def test_chain_converges_on_quadratic(rng):
    mu = np.array([0.3, -0.2])
    cfg = LangevinConfig(n_steps=200, step_init=0.05, step_final=0.05, noise_scale=0.0)
    out = langevin_chain(lambda a: mu - a, np.zeros(2), cfg, rng)
    assert np.allclose(out, mu, atol=1e-4)


def test_chain_samples_standard_normal():
    rng = np.random.default_rng(0)
    cfg = LangevinConfig(n_steps=2000, step_init=0.01, step_final=0.01, noise_scale=1.0, clip_norm=10.0)
    out = langevin_chain(lambda a: -a, rng.uniform(-1, 1, size=(10_000, 1)), cfg, rng)
    assert abs(out.mean()) < 0.05
    assert abs(out.var() - 1) < 0.1


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 2.0), st.floats(0.0, 3.0), st.integers(0, 10_000))
def test_every_update_is_clipped(clip, noise, seed):
    rng = np.random.default_rng(seed)
    norms = []
    cfg = LangevinConfig(n_steps=15, step_init=5.0, step_final=0.5, noise_scale=noise, clip_norm=clip)
    langevin_chain(lambda a: -50 * a, rng.normal(size=(8, 3)), cfg, rng,
                   hook=lambda k, u: norms.append(np.linalg.norm(u, axis=-1).max()))
    assert len(norms) == 15 and max(norms) <= clip * (1 + 1e-12)


def test_chain_nonfinite_gradient_names_step(rng):
    calls = []

    def g(a):
        calls.append(1)
        return np.full_like(a, np.nan) if len(calls) == 3 else -a
    with pytest.raises(FloatingPointError, match="step 2"):
        langevin_chain(g, np.zeros(2), LangevinConfig(noise_scale=0.0), rng)


def _peaked_policy(a_star, c=5.0, L=1, sd=2):
    # f(a) ~ -c |a - a*| from two leaky-relu units
    n_in = L * sd + 1
    W1 = np.zeros((2, n_in))
    W1[0, -1], W1[1, -1] = 1.0, -1.0
    b1 = np.array([-a_star, a_star])
    W2 = np.array([[-c, -c]])
    net = MlpParams([n_in, 2, 1], [W1, W2], [b1, np.zeros(1)], "leaky_relu")
    return EnergyPolicy(net, L, sd, 1)


def test_prior_concentrates_at_peak(rng):
    pol = _peaked_policy(0.4)
    cfg = LangevinConfig(n_steps=200, step_init=0.05, step_final=0.005, noise_scale=0.1)
    a = sample_prior(pol, np.zeros((1, 2)), cfg, 500, rng)
    assert a.shape == (500, 1)
    assert abs(np.median(a) - 0.4) < 0.02


def test_prior_empty_and_reproducible():
    pol = EnergyPolicy.create(2, 2, 1, seed=0)
    ctx = np.zeros((2, 2))
    assert sample_prior(pol, ctx, CURVE_SAMPLER, 0, np.random.default_rng(0)).shape == (0, 1)
    a = sample_prior(pol, ctx, CURVE_SAMPLER, 6, np.random.default_rng(3))
    b = sample_prior(pol, ctx, CURVE_SAMPLER, 6, np.random.default_rng(3))
    assert np.array_equal(a, b)


def test_prior_batched_contexts(rng):
    pol = EnergyPolicy.create(3, 2, 2, seed=1)
    out = sample_prior(pol, rng.normal(size=(4, 5, 3, 2)), CURVE_SAMPLER, 7, rng)
    assert out.shape == (4, 5, 7, 2)


def _linear_trans(W, sigma):
    sd, ad = W.shape[0], W.shape[1]
    full = np.concatenate([np.zeros((sd, sd)), W], axis=1)
    return GaussianTransition(MlpParams([sd + ad, sd], [full], [np.zeros(sd)], "identity"), sigma, sd, ad)


def test_posterior_without_action_dependence_matches_prior():
    pol = _peaked_policy(-0.3, L=1, sd=2)
    trans = _linear_trans(np.zeros((2, 1)), 0.05)
    cfg = LangevinConfig(n_steps=100, step_init=0.05, step_final=0.01, noise_scale=0.3)
    ctx = np.zeros((1, 2))
    post = sample_posterior_mcmc(pol, trans, ctx, np.array([0.5, 0.5]), cfg, np.random.default_rng(0), n=2000)
    prior = sample_prior(pol, ctx, cfg, 2000, np.random.default_rng(1))
    assert abs(post.mean() - prior.mean()) < 0.02
    assert abs(post.std() - prior.std()) < 0.02


def test_posterior_with_near_delta_transition_solves_linear_system():
    pol = EnergyPolicy.create(1, 2, 2, seed=0)
    W = np.array([[2.0, 0.5], [-1.0, 1.0]])
    trans = _linear_trans(W, 0.01)
    a_true = np.array([0.2, -0.4])
    s_next = W @ a_true
    cfg = LangevinConfig(n_steps=300, step_init=2e-5, step_final=2e-5, noise_scale=1.0)
    out = sample_posterior_mcmc(pol, trans, np.zeros((1, 2)), s_next, cfg, np.random.default_rng(0), n=200)
    assert np.allclose(out.mean(axis=0), np.linalg.solve(W, s_next), atol=0.01)
    again = sample_posterior_mcmc(pol, trans, np.zeros((1, 2)), s_next, cfg, np.random.default_rng(0), n=200)
    assert np.array_equal(out, again)


def test_weights_from_loglik():
    assert np.allclose(normalized_weights(np.array([np.log(3.0), 0.0])), [0.75, 0.25])
    assert np.allclose(normalized_weights(np.full(5, -700.0)), 0.2)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20))
def test_weights_are_a_distribution(logw):
    w = normalized_weights(np.array(logw))
    assert abs(w.sum() - 1) < 1e-12 and np.all((w >= 0) & (w <= 1))


def test_importance_constant_likelihood_uniform_weights(rng):
    pol = EnergyPolicy.create(1, 2, 1, seed=0)
    trans = _linear_trans(np.zeros((2, 1)), 0.05)
    wa = importance_posterior(pol, trans, np.zeros((1, 2)), np.zeros(2), CURVE_SAMPLER, 8, rng)
    assert np.allclose(wa.weights, 1 / 8)
    assert np.isclose(wa.mean(), wa.actions.mean())


def test_importance_rejects_unexplainable(rng):
    pol = EnergyPolicy.create(1, 2, 1, seed=0)
    trans = _linear_trans(np.array([[1.0], [0.0]]), 1e-3)
    with pytest.raises(UnexplainedTransitionError, match="residual"):
        importance_posterior(pol, trans, np.zeros((1, 2)), np.array([50.0, 0.0]), CURVE_SAMPLER, 4, rng)
    with pytest.raises(ValueError):
        importance_posterior(pol, trans, np.zeros((1, 2)), np.zeros(2), CURVE_SAMPLER, 1, rng)


def test_weighted_actions_validation():
    with pytest.raises(ValueError):
        WeightedActions(np.zeros((3, 1)), np.ones(2) / 2, np.zeros(2))


def test_importance_matches_tabular_enumeration():
    tab = oracle.random_instance(3, 2, 2, seed=11)
    seq = (0, 2, 1)
    exact = oracle.stepwise_posterior(tab, seq)
    est = oracle.sampled_posterior(tab, seq, 100_000, np.random.default_rng(0))
    tv = max(0.5 * np.abs(e - x).sum() for e, x in zip(est, exact))
    assert tv < 0.02


def test_importance_estimate_improves_with_n():
    tab = oracle.random_instance(3, 3, 2, seed=5)
    seq = (1, 0, 2)
    exact = oracle.stepwise_posterior(tab, seq)
    rng = np.random.default_rng(1)

    def err(n):
        runs = [oracle.sampled_posterior(tab, seq, n, rng) for _ in range(20)]
        return np.mean([max(np.abs(r - x).sum() for r, x in zip(run, exact)) for run in runs])
    assert err(100_000) < err(1_000)


def _const_trans(b):
    net = MlpParams([3, 2], [np.zeros((2, 3))], [np.asarray(b, dtype=float)], "identity")
    return GaussianTransition(net, 0.05, 2, 1)


def test_filter_keep_all_is_identity():
    ens = TransitionEnsemble([_const_trans([0, 0]), _const_trans([1, 0])])
    cands = np.arange(5.0)[:, None]
    assert np.array_equal(filter_by_disagreement(ens, np.zeros((1, 2)), cands, 1.0), cands)


def test_filter_ties_keep_prefix():
    t = GaussianTransition.create(2, 1, seed=0)
    ens = TransitionEnsemble([t, t])
    cands = np.linspace(-1, 1, 7)[:, None]
    assert np.array_equal(filter_by_disagreement(ens, np.zeros((1, 2)), cands, 0.5), cands[:4])


def test_filter_ranks_disputed_action_last():
    # member 1 adds a bump only for actions above 0.5 via a leaky-relu unit
    W1 = np.array([[0.0, 0.0, 10.0]])
    b1 = np.array([-5.0])
    bumped = GaussianTransition(MlpParams([3, 1, 2], [W1, np.array([[1.0], [0.0]])], [b1, np.zeros(2)],
                                          "leaky_relu"), 0.05, 2, 1)
    flat = GaussianTransition(MlpParams([3, 1, 2], [W1, np.zeros((2, 1))], [b1, np.zeros(2)], "leaky_relu"),
                              0.05, 2, 1)
    ens = TransitionEnsemble([flat, bumped])
    cands = np.array([[0.0], [0.9], [0.1], [-0.3]])
    kept = filter_by_disagreement(ens, np.zeros((1, 2)), cands, 0.75)
    assert len(kept) == 3 and 0.9 not in kept
    with pytest.raises(ValueError):
        filter_by_disagreement(ens, np.zeros((1, 2)), cands, 0.0)
    with pytest.raises(ValueError):
        filter_by_disagreement(ens, np.zeros((1, 2)), cands[:0], 0.5)
