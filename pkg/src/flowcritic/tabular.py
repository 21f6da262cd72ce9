"""Exact verification of the penalized Bellman theory on small explicit MDPs.

Everything here is closed-form linear algebra over value tables: the
penalized evaluation operator, its fixed point by iteration and by resolvent
solve, the occupancy identity behind the conservative split, and a probe
showing that the off-support sentinel is what keeps improved policies inside
the behavior support.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

OFF_SUPPORT_SENTINEL = -1e9


@dataclass
class TabularMdp:
    """Finite MDP with dense transition tensor P[s, a, s'] and rewards r[s, a]."""

    transitions: np.ndarray
    rewards: np.ndarray
    gamma: float

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        s, a, s2 = self.transitions.shape
        if s != s2 or self.rewards.shape != (s, a):
            raise ValueError("transition tensor and reward table shapes disagree")
        if not np.allclose(self.transitions.sum(axis=2), 1.0, atol=1e-12):
            raise ValueError("transition rows must sum to 1")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("rewards must be finite")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]


def is_support_constrained(policy: np.ndarray, behavior: np.ndarray, atol: float = 0.0) -> bool:
    """True when the policy puts no mass where the behavior has none."""
    return bool(np.all(np.asarray(policy)[np.asarray(behavior) == 0.0] <= atol))


@dataclass
class ProxyTable:
    """Tabular stand-in for the density proxy: a table plus one threshold."""

    density: np.ndarray
    eps: float
    weight: np.ndarray = field(init=False)

    def __post_init__(self):
        self.density = np.asarray(self.density, dtype=np.float64)
        if self.eps <= 0:
            raise ValueError("threshold must be positive")
        self.weight = np.maximum(0.0, 1.0 - self.density / self.eps)


@dataclass
class OperatorResult:
    q: np.ndarray
    indeterminate: np.ndarray


def _penalty_table(policy, behavior, proxy, alpha) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-pair penalty (alpha/2) * w * pi / beta, with masks for the
    off-support and indeterminate (beta=0, w=0, pi>0) cells."""
    policy = np.asarray(policy, dtype=np.float64)
    behavior = np.asarray(behavior, dtype=np.float64)
    off = behavior == 0.0
    indeterminate = off & (proxy.weight == 0.0) & (policy > 0.0)
    penalty = np.zeros_like(behavior)
    on = ~off
    penalty[on] = 0.5 * alpha * proxy.weight[on] * policy[on] / behavior[on]
    return penalty, off, indeterminate


def expected_next_value(mdp: TabularMdp, policy: np.ndarray, q: np.ndarray) -> np.ndarray:
    """E_{s'~P, a'~pi}[Q(s', a')] for every (s, a)."""
    v = (np.asarray(policy) * q).sum(axis=1)
    return mdp.transitions @ v


def penalized_operator_apply(
    q: np.ndarray,
    mdp: TabularMdp,
    policy: np.ndarray,
    behavior: np.ndarray,
    proxy: ProxyTable,
    alpha: float,
) -> OperatorResult:
    """One application of the penalized evaluation operator.

    On-support cells get the Bellman backup minus (alpha/2) * w * pi / beta;
    off-support cells carry a large negative sentinel. Cells where beta=0 yet
    w=0 with pi>0 are flagged rather than valued.
    """
    penalty, off, indeterminate = _penalty_table(policy, behavior, proxy, alpha)
    out = mdp.rewards + mdp.gamma * expected_next_value(mdp, policy, q) - penalty
    out[off] = OFF_SUPPORT_SENTINEL
    return OperatorResult(q=out, indeterminate=indeterminate)


def fixed_point_iterate(
    mdp: TabularMdp,
    policy: np.ndarray,
    behavior: np.ndarray,
    proxy: ProxyTable,
    alpha: float,
    tol: float = 1e-10,
    max_iter: int = 100000,
    q0: np.ndarray | None = None,
) -> tuple[np.ndarray, int]:
    """Iterate the operator to its unique fixed point (sup-norm tolerance)."""
    if not is_support_constrained(policy, behavior):
        raise ValueError("policy places mass outside the behavior support")
    q = np.zeros_like(mdp.rewards) if q0 is None else np.array(q0, dtype=np.float64)
    for it in range(1, max_iter + 1):
        nxt = penalized_operator_apply(q, mdp, policy, behavior, proxy, alpha).q
        if np.max(np.abs(nxt - q)) < tol:
            return nxt, it
        q = nxt
    raise RuntimeError("fixed-point iteration did not converge")


def _policy_transition_matrix(mdp: TabularMdp, policy: np.ndarray) -> np.ndarray:
    """P^pi over state-action pairs, flattened in C order (s major, a minor)."""
    n, m = mdp.n_states, mdp.n_actions
    # P^pi[(s,a), (s',a')] = P(s'|s,a) * pi(a'|s')
    p = mdp.transitions.reshape(n * m, n)[:, :, None] * np.asarray(policy)[None, :, :]
    return p.reshape(n * m, n * m)


def _solve_penalized(mdp: TabularMdp, policy: np.ndarray, penalty: np.ndarray) -> np.ndarray:
    n, m = mdp.n_states, mdp.n_actions
    p_pi = _policy_transition_matrix(mdp, policy)
    rhs = (mdp.rewards - penalty).reshape(n * m)
    return np.linalg.solve(np.eye(n * m) - mdp.gamma * p_pi, rhs).reshape(n, m)


def closed_form_fixed_point(
    mdp: TabularMdp,
    policy: np.ndarray,
    behavior: np.ndarray,
    proxy: ProxyTable,
    alpha: float,
) -> np.ndarray:
    """Fixed point via the resolvent: (I - gamma P^pi)^{-1} applied to the
    penalized rewards, with the sentinel written onto off-support cells."""
    if not is_support_constrained(policy, behavior):
        raise ValueError("policy places mass outside the behavior support")
    penalty, off, _ = _penalty_table(policy, behavior, proxy, alpha)
    q = _solve_penalized(mdp, policy, penalty)
    q[off] = OFF_SUPPORT_SENTINEL
    return q


def occupancy_related_check(
    mdp: TabularMdp,
    policy: np.ndarray,
    behavior: np.ndarray,
    proxy: ProxyTable,
    alpha: float,
) -> dict:
    """Numerically confirm that the conservative shift equals the resolvent
    applied to the penalty vector (the discounted-visitation identity)."""
    penalty, off, _ = _penalty_table(policy, behavior, proxy, alpha)
    n, m = mdp.n_states, mdp.n_actions
    p_pi = _policy_transition_matrix(mdp, policy)
    resolvent = np.linalg.inv(np.eye(n * m) - mdp.gamma * p_pi)

    q_plain = closed_form_fixed_point(mdp, policy, behavior, ProxyTable(np.ones_like(penalty), 1.0), 0.0)
    q_pen = closed_form_fixed_point(mdp, policy, behavior, proxy, alpha)
    shift = (resolvent @ penalty.reshape(n * m)).reshape(n, m)
    on = ~off
    gap = float(np.max(np.abs((q_plain - q_pen) - shift)[on])) if on.any() else 0.0
    return {
        "resolvent": resolvent,
        "shift_matches_difference": gap,
        "identity_at_gamma_zero": float(np.max(np.abs(resolvent - np.eye(n * m)))) if mdp.gamma == 0 else None,
    }


def greedy_improve(q: np.ndarray, sentinel_mask: np.ndarray | None = None) -> np.ndarray:
    """Greedy policy over a value table; masked cells are never selected."""
    scores = np.array(q, dtype=np.float64)
    if sentinel_mask is not None:
        scores[sentinel_mask] = -np.inf
    policy = np.zeros_like(scores)
    policy[np.arange(scores.shape[0]), scores.argmax(axis=1)] = 1.0
    return policy


def support_violation_probe(
    mdp: TabularMdp,
    behavior: np.ndarray,
    proxy: ProxyTable,
    alpha: float,
    lambda_grid=(0.0, 0.1, 1.0, 10.0),
    n_rounds: int = 5,
    disable_sentinel: bool = False,
) -> dict:
    """Alternate penalized evaluation and regularized greedy improvement,
    reporting the improved policies' total mass on zero-support actions.

    lambda trades the value table off against staying close to the behavior
    distribution when improving (mimicking the actor's pull toward the
    proxy). Disabling the sentinel mimics an implementation that forgot the
    off-support branch: those cells then keep their plain backup value, the
    improvement step may select them, and later evaluations proceed without
    the support-constraint check (which such an implementation would not
    have either).
    """
    off = behavior == 0.0
    report = {}
    for lam in lambda_grid:
        # Start from the behavior policy itself (always support-constrained).
        policy = np.array(behavior, dtype=np.float64)
        for _ in range(n_rounds):
            penalty, _, _ = _penalty_table(policy, behavior, proxy, alpha)
            q = _solve_penalized(mdp, policy, penalty)
            if not disable_sentinel:
                q[off] = OFF_SUPPORT_SENTINEL
            scores = q + lam * behavior
            policy = greedy_improve(scores, sentinel_mask=None if disable_sentinel else off)
        report[lam] = float(policy[off].sum())
    return report


def random_instance(
    rng: np.random.Generator,
    n_states: int,
    n_actions: int,
    gamma: float,
    zero_support_per_state: int = 1,
    isolate_penalty_states: bool = True,
) -> tuple[TabularMdp, np.ndarray, np.ndarray, ProxyTable]:
    """Seeded random MDP with behavior, support-constrained policy, and proxy.

    When isolate_penalty_states is set, every low-density (penalized) pair
    sits on a source state that transitions straight into a clean absorbing
    component and is never revisited. Values propagate forward along
    transitions, so each penalty reaches exactly one backup: its own pair's.
    Every other pair then solves to the plain Bellman value, which is what
    lets the conservative split be checked cell by cell instead of up to a
    smeared tolerance. Source states carry one planted pair each, on an
    action the policy actually takes.
    """
    s, a = n_states, n_actions
    rewards = rng.uniform(0.0, 1.0, size=(s, a))

    behavior = rng.dirichlet(np.ones(a), size=s)
    for i in range(s):
        if zero_support_per_state and a > 1:
            drop = rng.choice(a, size=min(zero_support_per_state, a - 1), replace=False)
            behavior[i, drop] = 0.0
            behavior[i] /= behavior[i].sum()

    # Policy: renormalized behavior restricted to its support, tilted randomly.
    tilt = rng.uniform(0.5, 1.5, size=(s, a))
    policy = behavior * tilt
    policy /= policy.sum(axis=1, keepdims=True)

    eps = 1.0
    if isolate_penalty_states and s >= 2:
        n_clean = (s + 1) // 2
        p = np.zeros((s, a, s))
        p[:n_clean, :, :n_clean] = rng.dirichlet(np.ones(n_clean), size=(n_clean, a))
        p[n_clean:, :, :n_clean] = rng.dirichlet(np.ones(n_clean), size=(s - n_clean, a))
        # At or above the threshold the weight is exactly zero; only the
        # planted source pairs fall below it.
        density = rng.uniform(1.0, 2.0, size=(s, a))
        for i in range(n_clean, s):
            j = int(rng.choice(np.flatnonzero(behavior[i] > 0)))
            density[i, j] = rng.uniform(0.05, 0.5)
    else:
        p = rng.dirichlet(np.ones(s), size=(s, a))
        density = rng.uniform(1.0, 2.0, size=(s, a))
        mask = rng.uniform(size=(s, a)) < 0.3
        density[mask] = rng.uniform(0.05, 0.5, size=int(mask.sum()))
    density[behavior == 0.0] = 0.0

    mdp = TabularMdp(transitions=p, rewards=rewards, gamma=gamma)
    return mdp, policy, behavior, ProxyTable(density=density, eps=eps)
