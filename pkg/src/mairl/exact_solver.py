"""Tabular ground truth: marginal soft-Q functions, soft values and Boltzmann equilibria.

Everything here works on a :class:`~mairl.markov_game.TabularModel` and is
exact up to the stated iteration tolerances. The learners are checked
against these routines.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .markov_game import (
    DEFAULT_ENUMERATION_CAP,
    EnumerationTooLarge,
    MarkovGame,
    PolicyTable,
    TabularModel,
    Transition,
    joint_from_index,
)

log = logging.getLogger(__name__)


class IterationLimit(RuntimeError):
    """Iteration budget exhausted; ``result`` holds the best-so-far answer."""

    def __init__(self, message: str, result=None):
        super().__init__(message)
        self.result = result


@dataclass
class TabularCritic:
    table: np.ndarray  # (n_states, A)
    lam: float
    agent: int

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("rationality lambda must be positive")
        if not np.all(np.isfinite(self.table)):
            raise ValueError("critic table has non-finite entries")


@dataclass
class EquilibriumResult:
    policies: PolicyTable
    critics: List[TabularCritic]
    residual: float
    iterations: int


# --- closed forms ------------------------------------------------------------

def log_sum_exp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def boltzmann(q: np.ndarray, lam: float) -> np.ndarray:
    """Softmax of ``lam * q`` over the last axis."""
    z = lam * np.asarray(q, dtype=np.float64)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def soft_value_array(q: np.ndarray, lam: float) -> np.ndarray:
    """``(1 - lam) E_pi[q] + logsumexp(lam q)`` over the last axis, pi = boltzmann(q)."""
    q = np.asarray(q, dtype=np.float64)
    pi = boltzmann(q, lam)
    return (1.0 - lam) * np.sum(pi * q, axis=-1) + log_sum_exp(lam * q)


def soft_value_grad(q: np.ndarray, lam: float) -> np.ndarray:
    """Derivative of :func:`soft_value_array` w.r.t. each entry of ``q``."""
    q = np.asarray(q, dtype=np.float64)
    pi = boltzmann(q, lam)
    mean = np.sum(pi * q, axis=-1, keepdims=True)
    return pi * (1.0 + lam * (1.0 - lam) * (q - mean))


def boltzmann_policy(critic: TabularCritic) -> np.ndarray:
    return boltzmann(critic.table, critic.lam)


def soft_value(critic: TabularCritic, s) -> np.ndarray:
    return soft_value_array(critic.table[s], critic.lam)


def soft_value_oracle(critic: TabularCritic, s: int, policy: PolicyTable,
                      full_q: Optional[np.ndarray] = None) -> float:
    """Soft value by direct enumeration of joint actions.

    ``full_q`` is agent ``i``'s joint-action table ``(n_states, A^n)``. When it
    is omitted the critic's marginal values stand in for it, which is exact
    because the entropy term only involves agent ``i``'s own action.
    """
    i = critic.agent
    n, _, A = policy.probs.shape
    total = 0.0
    for j in range(A**n):
        a = joint_from_index(j, n, A)
        p = 1.0
        for k in range(n):
            p *= policy.probs[k, s, a[k]]
        if p == 0.0:
            continue
        q = full_q[s, j] if full_q is not None else critic.table[s, a[i]]
        total += p * (q - np.log(policy.probs[i, s, a[i]]))
    return float(total)


# --- marginalization ----------------------------------------------------------

def marginalize(values: np.ndarray, probs: np.ndarray, i: int,
                cap: int = DEFAULT_ENUMERATION_CAP) -> np.ndarray:
    """Average joint-action values over the opponents of agent ``i``.

    ``values`` is ``(S, A^n)``, ``probs`` is ``(n, S, A)``; returns ``(S, A)``.
    """
    n, S, A = probs.shape
    if A ** (n - 1) > cap:
        raise EnumerationTooLarge(f"{A ** (n - 1)} opponent tuples exceed the cap of {cap}")
    arr = values.reshape((values.shape[0],) + (A,) * n)
    for j in reversed(range(n)):
        if j == i:
            continue
        shape = [arr.shape[0]] + [1] * (arr.ndim - 1)
        shape[j + 1] = A
        arr = np.sum(arr * probs[j].reshape(shape), axis=j + 1)
    return arr.reshape(values.shape[0], A)


def marginalize_q(full_q: np.ndarray, policy: PolicyTable, i: int, lam: float = 1.0,
                  cap: int = DEFAULT_ENUMERATION_CAP) -> TabularCritic:
    return TabularCritic(marginalize(np.asarray(full_q, dtype=np.float64), policy.probs, i, cap), lam, i)


# --- soft-Q iteration and equilibria ------------------------------------------

def marginal_soft_q_iteration(model: TabularModel, policy: PolicyTable, i: int,
                              lam: float = 1.0, tol: float = 1e-8, max_iter: int = 10_000,
                              init: Optional[np.ndarray] = None) -> TabularCritic:
    """Fixed point of ``Q(s,a_i) = Rbar(s,a_i) + gamma E[V(s')]`` against fixed opponents."""
    probs = policy.probs
    r_bar = marginalize(model.rewards[i], probs, i)
    q = r_bar.copy() if init is None else np.array(init, dtype=np.float64)
    for it in range(max_iter):
        v = soft_value_array(q, lam)
        q_new = r_bar + model.gamma * marginalize(model.expected_next(v), probs, i)
        change = float(np.max(np.abs(q_new - q))) if q.size else 0.0
        q = q_new
        if change < tol:
            return TabularCritic(q, lam, i)
    raise IterationLimit(
        f"soft-Q iteration did not reach tol={tol} in {max_iter} sweeps (last change {change:.3g})",
        TabularCritic(q, lam, i),
    )


def bellman_residual(model: TabularModel, critic: TabularCritic, policy: PolicyTable) -> float:
    """Sup-norm violation of the marginalized soft Bellman condition."""
    i = critic.agent
    v = soft_value_array(critic.table, critic.lam)
    rhs = marginalize(model.rewards[i], policy.probs, i) + model.gamma * marginalize(
        model.expected_next(v), policy.probs, i
    )
    return float(np.max(np.abs(critic.table - rhs)))


def equilibrium_residual(policy: PolicyTable, critics: List[TabularCritic]) -> float:
    return max(
        float(np.max(np.abs(policy.probs[c.agent] - boltzmann_policy(c)))) for c in critics
    )


def equilibrium_fixed_point(model: TabularModel, lam: float = 1.0, tol: float = 1e-6,
                            damping: float = 0.5, max_iter: int = 500,
                            q_tol: float = 1e-8) -> EquilibriumResult:
    """Damped best-response dynamics from uniform policies.

    Each round computes every agent's marginal soft-Q function against a
    snapshot of the current joint policy, then mixes the Boltzmann response
    into the old policy. Stops when the largest per-state total-variation
    distance between response and policy drops below ``tol``.
    """
    if not 0.0 <= damping < 1.0:
        raise ValueError("damping must lie in [0, 1)")
    n, S, A = model.n_agents, model.n_states, model.action_count
    probs = np.full((n, S, A), 1.0 / A)
    warm = [None] * n
    change = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        snapshot = PolicyTable(probs)
        response = np.empty_like(probs)
        for i in range(n):
            critic = marginal_soft_q_iteration(model, snapshot, i, lam, q_tol, init=warm[i])
            warm[i] = critic.table
            response[i] = boltzmann_policy(critic)
        # undamped distance, so the reported residual is bounded by tol at exit
        change = float(np.max(0.5 * np.sum(np.abs(response - probs), axis=-1)))
        if change < tol:
            break
        new = (1.0 - damping) * response + damping * probs
        probs = new / new.sum(axis=-1, keepdims=True)
    final = PolicyTable(probs)
    critics = [marginal_soft_q_iteration(model, final, i, lam, q_tol, init=warm[i]) for i in range(n)]
    result = EquilibriumResult(final, critics, equilibrium_residual(final, critics), it)
    if change >= tol:
        raise IterationLimit(
            f"best-response dynamics did not converge in {max_iter} rounds (last TV change {change:.3g})",
            result,
        )
    log.info("equilibrium after %d rounds, residual %.3g", it, result.residual)
    return result


def single_agent_soft_q(rewards: np.ndarray, next_states: np.ndarray, next_probs: np.ndarray,
                        done: np.ndarray, gamma: float, lam: float = 1.0,
                        tol: float = 1e-10, max_iter: int = 100_000) -> np.ndarray:
    """Plain soft value iteration on an MDP with ``(S, A)`` rewards."""
    q = np.zeros_like(rewards)
    for _ in range(max_iter):
        v = soft_value_array(q, lam)
        ev = np.where(done, 0.0, np.sum(next_probs * v[next_states], axis=-1))
        q_new = rewards + gamma * ev
        if np.max(np.abs(q_new - q)) < tol:
            return q_new
        q = q_new
    raise IterationLimit("single-agent soft value iteration did not converge")


# --- expert data ----------------------------------------------------------------

def sample_joint(probs_per_agent, rng: np.random.Generator):
    return tuple(int(rng.choice(len(p), p=p)) for p in probs_per_agent)


def generate_expert_dataset(env: MarkovGame, eq: EquilibriumResult, n_steps: int,
                            seed: int) -> List[Transition]:
    """Roll out the equilibrium joint policy for exactly ``n_steps`` transitions."""
    rng = np.random.default_rng(seed)
    out: List[Transition] = []
    if n_steps <= 0:
        return out
    probs = eq.policies.probs
    episode, t = 0, 0
    state = env.reset(rng)
    while len(out) < n_steps:
        sid = env.state_id(state)
        a = sample_joint(probs[:, sid], rng)
        nxt, rewards, done = env.step(state, a, rng)
        out.append(Transition(state, a, nxt, bool(done), tuple(float(r) for r in rewards), episode, t))
        if done:
            episode, t = episode + 1, 0
            state = env.reset(rng)
        else:
            state, t = nxt, t + 1
    return out
