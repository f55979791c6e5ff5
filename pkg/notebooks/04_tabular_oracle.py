"""Exact checks on a small enumerable decision process.

Everything here is computed by enumeration, so the identities hold to
floating-point precision.
"""
import numpy as np

from lanmdp import oracle

tab = oracle.random_instance(3, 2, 2, seed=0)
teacher = tab.with_logits(oracle.random_instance(3, 2, 2, seed=100, logit_scale=1.5).policy_logits)
seq = (0, 1, 2)

# the action posterior given a state sequence factorizes over steps
post = oracle.exact_posterior(tab, seq)
print("per-step posteriors:", [np.round(p, 3) for p in post.per_step])
print("factorization error:", post.factorization_error())

# reweighting prior actions by the transition likelihood gives the same posterior
print("importance identity error:", oracle.importance_identity_check(tab, seq))
mc = oracle.sampled_posterior(tab, seq, 100_000, np.random.default_rng(0))
print("Monte Carlo estimate:", [np.round(p, 3) for p in mc])

# the log-likelihood gradient is posterior minus prior at the visited contexts
g = np.concatenate([x.ravel() for x in oracle.exact_policy_gradient(tab, seq)])
fd = np.concatenate([x.ravel() for x in oracle.finite_difference_gradient(tab, seq)])
print("gradient vs finite differences:", np.linalg.norm(g - fd) / np.linalg.norm(fd))

# soft values built from the teacher recover its log-policy
print("value identities:", oracle.theorem_identities(tab, teacher))
_, pol, sweeps = oracle.soft_q_iteration(teacher)
print(f"soft Q iteration: {sweeps} sweeps, policy TV {oracle.policy_tv(pol, oracle.policy_tables(teacher)):.1e}")

# maximum likelihood on the teacher's sequence distribution matches it
fit, _ = oracle.fit_policy_mle(tab, teacher)
tv = oracle.sequence_tv(oracle.prefix_marginals(fit)[-1], oracle.prefix_marginals(teacher)[-1])
print(f"fitted policy, sequence TV to teacher: {tv:.1e}")

for check in oracle.verify_instance(tab, teacher, include_fit=True):
    print(f"{'PASS' if check.passed else 'FAIL'}  {check.name:34s} {check.value:.2e}")
