"""Exact enumeration on small tabular non-Markov decision processes.

Everything here is computed by brute force over finite tables so it can
serve as ground truth for the sample-based estimators.  A context ``s_{0:t}``
is stored as a row index into ``logits[t]``, which has shape
``(n_states ** (t + 1), n_actions)``; the index is the base-``n_states``
number whose digits are ``s_0 .. s_t`` (``s_0`` most significant).

Log-probabilities of impossible events are ``-inf`` and are absorbing.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp, softmax

INSTANCE_FORMAT_VERSION = 1
MAX_STATES = 8
MAX_ACTIONS = 8
MAX_HORIZON = 4


class ZeroProbabilityError(ValueError):
    """The observed state sequence has probability zero under the model."""


class SupportError(ValueError):
    """Teacher sequences the model cannot produce."""


@dataclass
class TabularNmdp:
    n_states: int
    n_actions: int
    horizon: int
    transition: np.ndarray          # (S, A, S): p(s' | s, a)
    initial: np.ndarray             # (S,)
    policy_logits: list = field(default_factory=list)   # logits[t]: (S**(t+1), A)

    def __post_init__(self):
        S, A, T = self.n_states, self.n_actions, self.horizon
        if not (1 <= S <= MAX_STATES and 1 <= A <= MAX_ACTIONS and 0 <= T <= MAX_HORIZON):
            raise ValueError(f"sizes out of range: states {S}, actions {A}, horizon {T}")
        self.transition = np.asarray(self.transition, dtype=float)
        self.initial = np.asarray(self.initial, dtype=float)
        if self.transition.shape != (S, A, S):
            raise ValueError(f"transition shape {self.transition.shape} != {(S, A, S)}")
        if self.initial.shape != (S,):
            raise ValueError("initial distribution has the wrong length")
        if np.any(self.transition < 0) or np.max(np.abs(self.transition.sum(-1) - 1)) > 1e-12:
            raise ValueError("transition rows must be distributions")
        if np.any(self.initial < 0) or abs(self.initial.sum() - 1) > 1e-12:
            raise ValueError("initial distribution must sum to 1")
        if not self.policy_logits:
            self.policy_logits = [np.zeros((S ** (t + 1), A)) for t in range(T)]
        self.policy_logits = [np.asarray(l, dtype=float) for l in self.policy_logits]
        if len(self.policy_logits) != T:
            raise ValueError(f"need {T} logit tables, got {len(self.policy_logits)}")
        for t, l in enumerate(self.policy_logits):
            if l.shape != (S ** (t + 1), A):
                raise ValueError(f"logits[{t}] shape {l.shape} != {(S ** (t + 1), A)}")

    @property
    def n_contexts(self) -> int:
        return sum(self.n_states ** (t + 1) for t in range(self.horizon))

    def with_logits(self, logits) -> "TabularNmdp":
        return TabularNmdp(self.n_states, self.n_actions, self.horizon, self.transition, self.initial,
                           [np.array(l, dtype=float) for l in logits])

    def flat_logits(self) -> np.ndarray:
        return np.concatenate([l.ravel() for l in self.policy_logits]) if self.horizon else np.zeros(0)

    def unflatten(self, flat) -> list:
        out, i = [], 0
        for l in self.policy_logits:
            out.append(np.asarray(flat[i:i + l.size], dtype=float).reshape(l.shape))
            i += l.size
        return out

    def to_dict(self):
        return {"format_version": INSTANCE_FORMAT_VERSION, "n_states": self.n_states,
                "n_actions": self.n_actions, "horizon": self.horizon,
                "transition": self.transition.tolist(), "initial": self.initial.tolist(),
                "policy_logits": [l.tolist() for l in self.policy_logits]}

    @classmethod
    def from_dict(cls, d):
        if d.get("format_version", INSTANCE_FORMAT_VERSION) != INSTANCE_FORMAT_VERSION:
            raise ValueError(f"unsupported instance version {d.get('format_version')!r}")
        return cls(int(d["n_states"]), int(d["n_actions"]), int(d["horizon"]), np.array(d["transition"]),
                   np.array(d["initial"]), [np.array(l) for l in d.get("policy_logits", [])])


def context_index(states, n_states: int) -> int:
    idx = 0
    for s in states:
        idx = idx * n_states + int(s)
    return idx


def context_states(index: int, t: int, n_states: int) -> tuple:
    """Inverse of :func:`context_index` for a context of length t+1."""
    out = []
    for _ in range(t + 1):
        index, s = divmod(index, n_states)
        out.append(s)
    return tuple(reversed(out))


def policy_tables(tab: TabularNmdp) -> list:
    return [softmax(l, axis=-1) for l in tab.policy_logits]


def log_policy_tables(tab: TabularNmdp) -> list:
    return [l - logsumexp(l, axis=-1, keepdims=True) for l in tab.policy_logits]


def _check_sequence(tab, seq):
    seq = [int(s) for s in seq]
    if not seq:
        raise ValueError("empty state sequence")
    if len(seq) > tab.horizon + 1:
        raise ValueError(f"sequence of {len(seq)} states exceeds horizon {tab.horizon}")
    if min(seq) < 0 or max(seq) >= tab.n_states:
        raise ValueError("state index out of range")
    return seq


def _log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


def log_joint(tab: TabularNmdp, states, actions) -> float:
    """log p(s_{0:T}, a_{0:T-1}) with normalized policy tables."""
    states = _check_sequence(tab, states)
    logp = log_policy_tables(tab)
    total = float(_log(tab.initial[states[0]]))
    for t, a in enumerate(actions):
        c = context_index(states[:t + 1], tab.n_states)
        total += logp[t][c, a] + float(_log(tab.transition[states[t], a, states[t + 1]]))
    return total


def exact_log_marginal(tab: TabularNmdp, state_seq) -> float:
    """log p(s_{0:T}) by summing the joint over every action sequence."""
    seq = _check_sequence(tab, state_seq)
    T = len(seq) - 1
    terms = [log_joint(tab, seq, acts) for acts in itertools.product(range(tab.n_actions), repeat=T)]
    return float(logsumexp(terms)) if T else float(_log(tab.initial[seq[0]]))


def joint_posterior(tab: TabularNmdp, state_seq) -> np.ndarray:
    """p(a_{0:T-1} | s_{0:T}) as an array with one axis per step."""
    seq = _check_sequence(tab, state_seq)
    T = len(seq) - 1
    shape = (tab.n_actions,) * T
    logj = np.array([log_joint(tab, seq, acts) for acts in itertools.product(range(tab.n_actions), repeat=T)])
    if not np.any(np.isfinite(logj)):
        raise ZeroProbabilityError(f"state sequence {seq} has probability zero")
    return np.exp(logj - logsumexp(logj)).reshape(shape)


def stepwise_posterior(tab: TabularNmdp, state_seq) -> list:
    """Closed-form p(a_t | s_{0:t+1}) ∝ prior(a_t | s_{0:t}) p(s_{t+1} | s_t, a_t), one table per step."""
    seq = _check_sequence(tab, state_seq)
    if tab.initial[seq[0]] == 0:
        raise ZeroProbabilityError(f"initial state {seq[0]} has probability zero")
    pol = policy_tables(tab)
    out = []
    for t in range(len(seq) - 1):
        c = context_index(seq[:t + 1], tab.n_states)
        w = pol[t][c] * tab.transition[seq[t], :, seq[t + 1]]
        z = w.sum()
        if z <= 0:
            raise ZeroProbabilityError(f"no action explains {seq[t]} -> {seq[t + 1]} at step {t}")
        out.append(w / z)
    return out


@dataclass
class PosteriorTables:
    per_step: list
    joint: np.ndarray

    def factorization_error(self) -> float:
        """max |joint - product of per-step tables|."""
        prod = np.ones(())
        for p in self.per_step:
            prod = np.multiply.outer(prod, p)
        return float(np.max(np.abs(prod - self.joint))) if self.per_step else 0.0


def exact_posterior(tab: TabularNmdp, state_seq) -> PosteriorTables:
    joint = joint_posterior(tab, state_seq)
    return PosteriorTables(stepwise_posterior(tab, state_seq), joint)


def exact_policy_gradient(tab: TabularNmdp, state_seq) -> list:
    """d log p(s_{0:T}) / d logits: posterior minus prior at every visited context."""
    seq = _check_sequence(tab, state_seq)
    joint = joint_posterior(tab, seq)
    pol = policy_tables(tab)
    grad = [np.zeros_like(l) for l in tab.policy_logits]
    T = len(seq) - 1
    for t in range(T):
        post_t = joint.sum(axis=tuple(k for k in range(T) if k != t)) if T > 1 else joint
        c = context_index(seq[:t + 1], tab.n_states)
        grad[t][c] += post_t - pol[t][c]
    return grad


def finite_difference_gradient(tab: TabularNmdp, state_seq, eps=1e-5) -> list:
    """Central differences of :func:`exact_log_marginal` in every logit."""
    flat = tab.flat_logits()
    g = np.zeros_like(flat)
    for i in range(len(flat)):
        up, dn = flat.copy(), flat.copy()
        up[i] += eps
        dn[i] -= eps
        g[i] = (exact_log_marginal(tab.with_logits(tab.unflatten(up)), state_seq)
                - exact_log_marginal(tab.with_logits(tab.unflatten(dn)), state_seq)) / (2 * eps)
    return tab.unflatten(g)


def importance_identity_check(tab: TabularNmdp, state_seq) -> float:
    """max |prior x likelihood / normalizer - enumerated posterior marginal| over steps and actions."""
    seq = _check_sequence(tab, state_seq)
    joint = joint_posterior(tab, seq)
    T = len(seq) - 1
    pol = policy_tables(tab)
    dev = 0.0
    for t in range(T):
        c = context_index(seq[:t + 1], tab.n_states)
        num = pol[t][c] * tab.transition[seq[t], :, seq[t + 1]]
        rhs = num / num.sum()
        lhs = joint.sum(axis=tuple(k for k in range(T) if k != t)) if T > 1 else joint
        dev = max(dev, float(np.max(np.abs(lhs - rhs))))
    return dev


def sampled_posterior(tab: TabularNmdp, state_seq, n: int, rng) -> list:
    """Self-normalized importance estimate of each p(a_t | s_{0:t+1}).

    Draws ``n`` actions from the prior per step and weights them by the
    transition likelihood, using the same weighting routine as the
    continuous sampler.  Returns per-step histograms over actions.
    """
    from .sampling import normalized_weights
    seq = _check_sequence(tab, state_seq)
    pol = policy_tables(tab)
    out = []
    for t in range(len(seq) - 1):
        c = context_index(seq[:t + 1], tab.n_states)
        acts = rng.choice(tab.n_actions, size=n, p=pol[t][c])
        w = normalized_weights(_log(tab.transition[seq[t], acts, seq[t + 1]]))
        out.append(np.bincount(acts, weights=w, minlength=tab.n_actions))
    return out


# ---------------------------------------------------------------- marginals

def next_state_tables(tab: TabularNmdp) -> list:
    """p(s_{t+1} | s_{0:t}) for every context: list of (S**(t+1), S) arrays."""
    S = tab.n_states
    pol = policy_tables(tab)
    out = []
    for t in range(tab.horizon):
        last = np.arange(S ** (t + 1)) % S
        # sum_a pi(a | c) p(s' | s_t(c), a)
        out.append(np.einsum("ca,cas->cs", pol[t], tab.transition[last]))
    return out


def prefix_marginals(tab: TabularNmdp) -> list:
    """p(s_{0:t}) for t = 0..T as flat arrays of length S**(t+1)."""
    nxt = next_state_tables(tab)
    out = [tab.initial.copy()]
    for t in range(tab.horizon):
        out.append((out[-1][:, None] * nxt[t]).ravel())
    return out


def sequence_tv(p_marg, q_marg) -> float:
    return 0.5 * float(np.sum(np.abs(np.asarray(p_marg) - np.asarray(q_marg))))


def expected_log_marginal(tab: TabularNmdp, teacher: TabularNmdp) -> float:
    """E_{teacher}[log p_tab(s_{0:T})], from the step-wise factorization of the marginal."""
    _same_dynamics(tab, teacher)
    pstar = prefix_marginals(teacher)
    nstar = next_state_tables(teacher)
    nq = next_state_tables(tab)
    total = float(np.sum(np.where(teacher.initial > 0, teacher.initial * _log(np.where(tab.initial > 0, tab.initial, 1)), 0)))
    for t in range(tab.horizon):
        w = pstar[t][:, None] * nstar[t]
        if np.any((w > 0) & (nq[t] == 0)):
            return -np.inf
        total += float(np.sum(np.where(w > 0, w * _log(np.where(nq[t] > 0, nq[t], 1)), 0)))
    return total


def expected_log_marginal_grad(tab: TabularNmdp, teacher: TabularNmdp) -> list:
    """Gradient of :func:`expected_log_marginal` in tab's logits."""
    pstar = prefix_marginals(teacher)
    nstar = next_state_tables(teacher)
    pol = policy_tables(tab)
    S = tab.n_states
    grad = []
    for t in range(tab.horizon):
        last = np.arange(S ** (t + 1)) % S
        lik = tab.transition[last]                          # (C, A, S)
        joint = pol[t][:, :, None] * lik                    # prior x likelihood
        z = joint.sum(axis=1, keepdims=True)
        post = np.divide(joint, z, out=np.zeros_like(joint), where=z > 0)
        w = pstar[t][:, None] * nstar[t]                    # p*(c, s')
        grad.append(np.einsum("cs,cas->ca", w, post) - pstar[t][:, None] * pol[t])
    return grad


def _same_dynamics(a: TabularNmdp, b: TabularNmdp):
    if (a.n_states, a.n_actions, a.horizon) != (b.n_states, b.n_actions, b.horizon):
        raise ValueError("instances differ in size")
    if not (np.allclose(a.transition, b.transition, atol=1e-12) and np.allclose(a.initial, b.initial, atol=1e-12)):
        raise ValueError("instances differ in transition or initial distribution")


def fit_policy_mle(tab: TabularNmdp, teacher: TabularNmdp, init_logits=None, warmup=500, warmup_lr=0.1,
                   gtol=1e-13, maxiter=100_000, newton_steps=20, newton_max_params=1000):
    """Maximize the expected exact log-marginal over tab's logits.

    Bounded Adam steps from uniform logits come first, then BFGS, then a few
    guarded Newton steps.  Started cold, BFGS can step into a saturated
    softmax region where the gradient vanishes short of the optimum.  BFGS
    alone also leaves logits at rarely reached contexts loose, since their
    gradient is scaled by the reach probability; the Newton steps fix that.
    """
    x = np.zeros(tab.flat_logits().size) if init_logits is None else \
        np.concatenate([np.ravel(l) for l in init_logits]).astype(float)

    def fun(x):
        cur = tab.with_logits(tab.unflatten(x))
        val = expected_log_marginal(cur, teacher)
        g = np.concatenate([gg.ravel() for gg in expected_log_marginal_grad(cur, teacher)])
        return -val, -g

    m, v = np.zeros_like(x), np.zeros_like(x)
    for i in range(1, warmup + 1):
        _, g = fun(x)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - warmup_lr * (m / (1 - 0.9 ** i)) / (np.sqrt(v / (1 - 0.999 ** i)) + 1e-12)
    res = minimize(fun, x, jac=True, method="BFGS", options={"gtol": gtol, "maxiter": maxiter})
    x = res.x
    if x.size <= newton_max_params:
        x = _newton_polish(fun, x, newton_steps)
    return tab.with_logits(tab.unflatten(x)), res


def _newton_polish(fun, x, steps, eps=1e-5, rcond=1e-9):
    """Newton steps on -fun with a finite-difference Hessian of the exact gradient.

    The pseudo-inverse drops the flat per-context shift directions; a step is
    halved until it does not lower the objective.
    """
    n = x.size
    for _ in range(steps):
        f, g = fun(x)
        H = np.zeros((n, n))
        for i in range(n):
            e = np.zeros(n)
            e[i] = eps
            H[:, i] = (fun(x + e)[1] - fun(x - e)[1]) / (2 * eps)
        step = -np.linalg.pinv((H + H.T) / 2, rcond=rcond, hermitian=True) @ g
        for _ in range(30):
            if fun(x + step)[0] <= f:
                break
            step = step / 2
        else:
            break
        x = x + step
    return x


# ---------------------------------------------------------------- soft values

@dataclass
class SoftValues:
    V: list          # V[t]: (S**(t+1),), t = 0..T
    Q: list          # Q[t]: (S**(t+1), A), t = 0..T-1
    reward: list     # reward[t]: (S**(t+1), S) = log sum_a pi(a|c) p(s'|s_t, a)


def _check_support(tab, teacher):
    """Reachable teacher transitions must have positive probability under tab's policy."""
    pstar = prefix_marginals(teacher)
    nstar = next_state_tables(teacher)
    nq = next_state_tables(tab)
    for t in range(tab.horizon):
        bad = (pstar[t][:, None] * nstar[t] > 0) & (nq[t] == 0)
        if np.any(bad):
            c, s = map(int, np.argwhere(bad)[0])
            raise SupportError(f"teacher moves {context_states(c, t, tab.n_states)} -> {s}, "
                               "which the model gives probability zero")


def _expect(p, vals):
    """sum p * vals with 0 * (-inf) taken as 0."""
    return np.sum(np.where(p > 0, p * np.where(p > 0, vals, 0.0), 0.0), axis=-1)


def soft_values(tab: TabularNmdp, teacher: TabularNmdp) -> SoftValues:
    """Rewards r_alpha, V by backward induction and Q by backup, expectations under the teacher.

    The policy being evaluated is tab's; the teacher supplies the exact
    next-state law p*(s' | s_{0:t}).  Contexts the teacher never reaches can
    carry -inf entries.
    """
    _same_dynamics(tab, teacher)
    _check_support(tab, teacher)
    S, T = tab.n_states, tab.horizon
    nstar = next_state_tables(teacher)
    reward = [_log(q) for q in next_state_tables(tab)]
    logp = log_policy_tables(tab)
    V = [None] * (T + 1)
    V[T] = np.zeros(S ** (T + 1))
    Q = [None] * T
    for t in range(T - 1, -1, -1):
        nxt = V[t + 1].reshape(S ** (t + 1), S)
        V[t] = _expect(nstar[t], reward[t] + nxt)
        Q[t] = logp[t] + _expect(nstar[t], reward[t] + nxt)[:, None]
    return SoftValues(V, Q, reward)


def q_backup(tab: TabularNmdp, teacher: TabularNmdp, V_next, t: int) -> np.ndarray:
    """Q(a; c) = E_{p*(s'|c)}[r_alpha(c, a, s') + V(c s')] with r_alpha(c, a, s') = r_alpha(c, s') + log pi(a|c)."""
    S = tab.n_states
    nstar = next_state_tables(teacher)[t]
    r = _log(next_state_tables(tab)[t])
    logp = log_policy_tables(tab)[t]
    nxt = np.asarray(V_next).reshape(S ** (t + 1), S)
    per_action = r[:, None, :] + logp[:, :, None] + nxt[:, None, :]     # (C, A, S)
    return _expect(nstar[:, None, :], per_action)


def value_by_paths(tab: TabularNmdp, teacher: TabularNmdp) -> list:
    """V[t](c) = sum over futures s_{t+1:T} of p*(future | c) times the summed rewards."""
    _same_dynamics(tab, teacher)
    _check_support(tab, teacher)
    S, T = tab.n_states, tab.horizon
    nstar = next_state_tables(teacher)
    reward = [_log(q) for q in next_state_tables(tab)]
    V = []
    for t in range(T + 1):
        vals = np.zeros(S ** (t + 1))
        for c in range(S ** (t + 1)):
            total = 0.0
            for fut in itertools.product(range(S), repeat=T - t):
                p, ret, cur = 1.0, 0.0, c
                for k, s in enumerate(fut):
                    p *= nstar[t + k][cur, s]
                    if p == 0:
                        break
                    ret += reward[t + k][cur, s]
                    cur = cur * S + s
                if p > 0:
                    total += p * ret
            vals[c] = total
        V.append(vals)
    return V


def entropy_tables(tab: TabularNmdp) -> list:
    out = []
    for p, lp in zip(policy_tables(tab), log_policy_tables(tab)):
        out.append(-np.sum(np.where(p > 0, p * lp, 0.0), axis=-1))
    return out


def policy_q_values(tab: TabularNmdp, teacher: TabularNmdp) -> tuple:
    """Entropy-augmented action values of tab's own policy.

    Q^pi(a; c) = E_{p*}[r(c, s') + log pi(a|c) + W(c s')] with W(c) = E_pi[Q^pi(.; c)]
    and W = 0 at full length.  Returns ``(Q list, W list)``.
    """
    _same_dynamics(tab, teacher)
    _check_support(tab, teacher)
    S, T = tab.n_states, tab.horizon
    pol = policy_tables(tab)
    W = [None] * (T + 1)
    W[T] = np.zeros(S ** (T + 1))
    Q = [None] * T
    for t in range(T - 1, -1, -1):
        Q[t] = q_backup(tab, teacher, W[t + 1], t)
        W[t] = np.sum(np.where(pol[t] > 0, pol[t] * np.where(pol[t] > 0, Q[t], 0.0), 0.0), axis=-1)
    return Q, W


def future_entropy_by_paths(tab: TabularNmdp, teacher: TabularNmdp) -> list:
    """sum_{k=t+1}^{T-1} E_{p*(s_{t+1:k}|c)}[H(a_k | s_{0:k})] for every context, by enumeration."""
    S, T = tab.n_states, tab.horizon
    nstar = next_state_tables(teacher)
    H = entropy_tables(tab)
    out = []
    for t in range(T):
        vals = np.zeros(S ** (t + 1))
        for c in range(S ** (t + 1)):
            total = 0.0
            for k in range(t + 1, T):
                for fut in itertools.product(range(S), repeat=k - t):
                    p, cur = 1.0, c
                    for j, s in enumerate(fut):
                        p *= nstar[t + j][cur, s]
                        cur = cur * S + s
                    if p > 0:
                        total += p * H[k][cur]
            vals[c] = total
        out.append(vals)
    return out


def _reachable(teacher):
    return [m > 0 for m in prefix_marginals(teacher)]


def theorem_identities(tab: TabularNmdp, teacher: TabularNmdp) -> dict:
    """Max deviations of the value identities over teacher-reachable contexts.

    ``q_minus_v``: with the teacher's own policy, Q*(a; c) - V*(c) against
    log pi*(a | c), Q from the backup and V from path sums.
    ``expected_q``: with tab's policy, E_pi[Q^pi] against
    V^pi - H(c) - future expected entropies (all by enumeration).
    ``v_backward_vs_paths``: backward induction against path sums for tab.
    """
    _same_dynamics(tab, teacher)
    reach = _reachable(teacher)
    T = tab.horizon

    v_star = value_by_paths(teacher, teacher)
    lp_star = log_policy_tables(teacher)
    dev_i = 0.0
    for t in range(T):
        q = q_backup(teacher, teacher, v_star[t + 1], t)
        diff = np.abs(q - v_star[t][:, None] - lp_star[t])
        dev_i = max(dev_i, _masked_max(diff, reach[t]))

    sv = soft_values(tab, teacher)
    v_paths = value_by_paths(tab, teacher)
    dev_v = max(_masked_max(np.abs(a - b), r) for a, b, r in zip(sv.V, v_paths, reach))

    _, W = policy_q_values(tab, teacher)
    H = entropy_tables(tab)
    fut = future_entropy_by_paths(tab, teacher)
    dev_ii = 0.0
    for t in range(T):
        dev_ii = max(dev_ii, _masked_max(np.abs(W[t] - (v_paths[t] - H[t] - fut[t])), reach[t]))
    return {"q_minus_v": dev_i, "expected_q": dev_ii, "v_backward_vs_paths": dev_v}


def _masked_max(diff, mask):
    diff = np.asarray(diff, dtype=float)
    mask = np.broadcast_to(np.asarray(mask).reshape(mask.shape + (1,) * (diff.ndim - np.ndim(mask))), diff.shape)
    return float(np.max(diff[mask])) if np.any(mask) else 0.0


def soft_q_sweep(teacher: TabularNmdp, Q) -> list:
    """One synchronous sweep: soft V from the current Q, then Q backup with the teacher's reward."""
    S, T = teacher.n_states, teacher.horizon
    V = [logsumexp(q, axis=-1) for q in Q] + [np.zeros(S ** (T + 1))]
    return [q_backup(teacher, teacher, V[t + 1], t) for t in range(T)]


def soft_q_iteration(teacher: TabularNmdp, iterations: int = 100, tol=1e-10):
    """Soft Q iteration with the reward log p*(s'|c) + log pi*(a|c) under the exact teacher.

    Returns ``(Q, policy, sweeps)`` where policy[t] ∝ exp(Q[t]) row-wise.
    """
    _check_support(teacher, teacher)
    S, T = teacher.n_states, teacher.horizon
    Q = [np.zeros((S ** (t + 1), teacher.n_actions)) for t in range(T)]
    sweeps = 0
    for sweeps in range(1, iterations + 1):
        new = soft_q_sweep(teacher, Q)
        change = max((_finite_change(a, b) for a, b in zip(new, Q)), default=0.0)
        Q = new
        if change < tol:
            break
    policy = [softmax(np.where(np.isfinite(q), q, -np.inf), axis=-1) for q in Q]
    return Q, policy, sweeps


def _finite_change(a, b):
    both = np.isfinite(a) & np.isfinite(b)
    d = np.abs(a[both] - b[both]).max() if np.any(both) else 0.0
    return np.inf if np.any(np.isfinite(a) != np.isfinite(b)) else float(d)


def policy_tv(p_tables, q_tables, mask=None) -> float:
    """Largest per-context total-variation distance between two policies."""
    worst = 0.0
    for t, (p, q) in enumerate(zip(p_tables, q_tables)):
        tv = 0.5 * np.sum(np.abs(p - q), axis=-1)
        if mask is not None:
            tv = tv[mask[t]]
        if tv.size:
            worst = max(worst, float(tv.max()))
    return worst


# ---------------------------------------------------------------- instances

def random_instance(n_states: int, n_actions: int, horizon: int, seed: int, logit_scale=1.0,
                    sparsity=0.0) -> TabularNmdp:
    """Random instance with Dirichlet transitions and Gaussian logits.

    ``sparsity`` zeroes that fraction of transition entries (keeping at
    least one per row) to exercise the -inf paths.
    """
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    if sparsity > 0:
        drop = rng.random(P.shape) < sparsity
        keep = rng.integers(n_states, size=P.shape[:2])
        drop[np.arange(n_states)[:, None], np.arange(n_actions)[None, :], keep] = False
        P = np.where(drop, 0.0, P)
        P /= P.sum(-1, keepdims=True)
    rho = rng.dirichlet(np.ones(n_states))
    logits = [logit_scale * rng.standard_normal((n_states ** (t + 1), n_actions)) for t in range(horizon)]
    return TabularNmdp(n_states, n_actions, horizon, P, rho, logits)


def all_sequences(tab: TabularNmdp, length=None):
    n = tab.horizon + 1 if length is None else length
    return itertools.product(range(tab.n_states), repeat=n)


def save_instance(path, tab: TabularNmdp, teacher: TabularNmdp | None = None, sequences=None):
    d = tab.to_dict()
    if teacher is not None:
        _same_dynamics(tab, teacher)
        d["teacher_logits"] = [l.tolist() for l in teacher.policy_logits]
    if sequences is not None:
        d["sequences"] = [list(map(int, s)) for s in sequences]
    with open(path, "w") as fh:
        json.dump(d, fh, sort_keys=True)


def load_instance(path):
    """Returns ``(tab, teacher or None, sequences)``; raises ValueError on malformed files."""
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as err:
        raise ValueError(f"{path}: not valid JSON ({err})") from err
    try:
        tab = TabularNmdp.from_dict(d)
        teacher = tab.with_logits(d["teacher_logits"]) if "teacher_logits" in d else None
    except (KeyError, TypeError) as err:
        raise ValueError(f"{path}: missing or malformed field {err}") from err
    seqs = [tuple(s) for s in d.get("sequences", [])]
    return tab, teacher, seqs


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and self.value < self.tolerance)


def verify_instance(tab: TabularNmdp, teacher: TabularNmdp | None = None, sequences=None,
                    include_fit=False) -> list:
    """Run the exact identities on one instance; returns a list of CheckResult.

    ``include_fit`` adds the maximum-likelihood fit of the policy logits to
    the teacher's sequence marginal (slower).
    """
    teacher = tab if teacher is None else teacher
    if not sequences:
        marg = prefix_marginals(tab)[-1]
        sequences = [context_states(int(i), tab.horizon, tab.n_states) for i in np.argsort(-marg, kind="stable")[:3]]
    res = []
    fact, imp, grad = 0.0, 0.0, 0.0
    for seq in sequences:
        post = exact_posterior(tab, seq)
        fact = max(fact, post.factorization_error())
        imp = max(imp, importance_identity_check(tab, seq))
        g = np.concatenate([x.ravel() for x in exact_policy_gradient(tab, seq)])
        fd = np.concatenate([x.ravel() for x in finite_difference_gradient(tab, seq)])
        grad = max(grad, float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12)))
    res.append(CheckResult("posterior_factorization", fact, 1e-12))
    res.append(CheckResult("importance_identity", imp, 1e-12))
    res.append(CheckResult("gradient_vs_finite_difference", grad, 1e-6))
    ids = theorem_identities(tab, teacher)
    res.append(CheckResult("v_backward_vs_paths", ids["v_backward_vs_paths"], 1e-10))
    res.append(CheckResult("q_minus_v_log_policy", ids["q_minus_v"], 1e-10))
    res.append(CheckResult("expected_q_entropy_decomposition", ids["expected_q"], 1e-10))
    _, pol, _ = soft_q_iteration(teacher)
    res.append(CheckResult("soft_q_policy_tv", policy_tv(pol, policy_tables(teacher), _reachable(teacher)), 1e-8))
    if include_fit:
        fit, _ = fit_policy_mle(tab, teacher)
        tv = sequence_tv(prefix_marginals(fit)[-1], prefix_marginals(teacher)[-1])
        res.append(CheckResult("mle_fit_sequence_tv", tv, 1e-4))
    return res
