"""Shared abstractions for n-agent Markov games with a symmetric discrete action set.

Joint actions are plain integer tuples ``(a_0, ..., a_{n-1})``. Where a flat
index over ``A^n`` is needed, agent 0 is the most significant digit, so that
``itertools.product`` order and flat-index order coincide.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any, Hashable, Optional, Sequence, Tuple

import numpy as np

DEFAULT_ENUMERATION_CAP = 4096


class EnumerationTooLarge(ValueError):
    """Raised when exact enumeration over opponent actions exceeds the cap."""


class TabularUnsupported(ValueError):
    """Raised when an environment cannot be enumerated as a finite table."""


@dataclass(frozen=True)
class GameSpec:
    n_agents: int
    action_count: int
    gamma: float
    horizon: Optional[int] = None  # None means unbounded
    state_space_size: Optional[int] = None  # None means non-enumerable

    def __post_init__(self):
        if self.n_agents < 1:
            raise ValueError(f"n_agents must be >= 1, got {self.n_agents}")
        if self.action_count < 1:
            raise ValueError(f"action_count must be >= 1, got {self.action_count}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.horizon is not None and self.horizon < 1:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if self.state_space_size is not None and self.state_space_size < 1:
            raise ValueError("state_space_size must be positive")

    @property
    def joint_count(self) -> int:
        return self.action_count**self.n_agents


@dataclass(frozen=True)
class Transition:
    """One environment step. ``state``/``next_state`` are opaque, hashable refs."""

    state: Hashable
    joint_action: Tuple[int, ...]
    next_state: Hashable
    done: bool
    true_rewards: Optional[Tuple[float, ...]] = None
    episode: int = 0
    step: int = 0

    def __post_init__(self):
        if self.true_rewards is not None and len(self.true_rewards) != len(self.joint_action):
            raise ValueError(
                f"true_rewards has {len(self.true_rewards)} entries for "
                f"{len(self.joint_action)} agents"
            )


def validate_joint(a: Sequence[int], n_agents: int, action_count: int) -> Tuple[int, ...]:
    a = tuple(int(x) for x in a)
    if len(a) != n_agents:
        raise ValueError(f"joint action has {len(a)} entries, expected {n_agents}")
    for x in a:
        if not 0 <= x < action_count:
            raise ValueError(f"action id {x} outside [0, {action_count})")
    return a


def split_joint(a: Sequence[int], i: int) -> Tuple[int, Tuple[int, ...]]:
    """Split a joint action into agent ``i``'s action and the ordered rest."""
    if not 0 <= i < len(a):
        raise IndexError(f"agent index {i} out of range for {len(a)} agents")
    a = tuple(a)
    return a[i], a[:i] + a[i + 1 :]


def recombine(a_i: int, a_minus_i: Sequence[int], i: int) -> Tuple[int, ...]:
    a_minus_i = tuple(a_minus_i)
    if not 0 <= i <= len(a_minus_i):
        raise IndexError(f"agent index {i} out of range")
    return a_minus_i[:i] + (int(a_i),) + a_minus_i[i:]


def enumerate_opponent_actions(
    n_agents: int, action_count: int, i: int, cap: int = DEFAULT_ENUMERATION_CAP
) -> list:
    """All opponent tuples for agent ``i`` in lexicographic order."""
    if not 0 <= i < n_agents:
        raise IndexError(f"agent index {i} out of range for {n_agents} agents")
    count = action_count ** (n_agents - 1)
    if count > cap:
        raise EnumerationTooLarge(
            f"{count} opponent tuples exceed the enumeration cap of {cap}"
        )
    return list(itertools.product(range(action_count), repeat=n_agents - 1))


def joint_index(a: Sequence[int], action_count: int) -> int:
    idx = 0
    for x in a:
        idx = idx * action_count + int(x)
    return idx


def joint_from_index(idx: int, n_agents: int, action_count: int) -> Tuple[int, ...]:
    out = []
    for _ in range(n_agents):
        idx, r = divmod(idx, action_count)
        out.append(r)
    return tuple(reversed(out))


def joint_table(n_agents: int, action_count: int) -> np.ndarray:
    """``(A^n, n)`` array whose row ``j`` is the joint action with flat index ``j``."""
    return np.array(
        list(itertools.product(range(action_count), repeat=n_agents)), dtype=np.int64
    ).reshape(action_count**n_agents, n_agents)


@dataclass
class PolicyTable:
    """Per-agent, per-state action distributions, shape ``(n_agents, n_states, A)``."""

    probs: np.ndarray
    atol: float = field(default=1e-9, repr=False)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 3:
            raise ValueError("policy table must have shape (n_agents, n_states, A)")
        if np.any(self.probs < 0):
            raise ValueError("policy table has negative entries")
        if not np.allclose(self.probs.sum(axis=-1), 1.0, atol=self.atol, rtol=0):
            raise ValueError("policy rows must sum to 1")

    @classmethod
    def uniform(cls, n_agents: int, n_states: int, action_count: int) -> "PolicyTable":
        return cls(np.full((n_agents, n_states, action_count), 1.0 / action_count))

    @property
    def n_agents(self) -> int:
        return self.probs.shape[0]

    @property
    def n_states(self) -> int:
        return self.probs.shape[1]

    @property
    def action_count(self) -> int:
        return self.probs.shape[2]


def opponent_prob(policy: PolicyTable, s: int, i: int, a_minus_i: Sequence[int]) -> float:
    """Probability of the opponents' tuple at state ``s`` under factorized policies."""
    n = policy.n_agents
    if not 0 <= i < n:
        raise IndexError(f"agent index {i} out of range for {n} agents")
    if len(a_minus_i) != n - 1:
        raise ValueError(f"expected {n - 1} opponent actions, got {len(a_minus_i)}")
    others = [j for j in range(n) if j != i]
    p = 1.0
    for j, a in zip(others, a_minus_i):
        p *= float(policy.probs[j, s, a])
    return p


def opponent_weights(
    probs: np.ndarray, i: int, cap: int = DEFAULT_ENUMERATION_CAP
) -> np.ndarray:
    """Vectorized opponent-tuple probabilities.

    ``probs`` has shape ``(n_agents, B, A)``; returns ``(B, A^(n-1))`` with
    columns in :func:`enumerate_opponent_actions` order.
    """
    n, batch, n_actions = probs.shape
    count = n_actions ** (n - 1)
    if count > cap:
        raise EnumerationTooLarge(f"{count} opponent tuples exceed the cap of {cap}")
    w = np.ones((batch, 1))
    for j in range(n):
        if j == i:
            continue
        w = (w[:, :, None] * probs[j][:, None, :]).reshape(batch, -1)
    return w


class MarkovGame:
    """Environment interface consumed by solvers, learners and metrics.

    Subclasses provide ``reset``/``step`` for simulation, ``features`` for
    function approximation, and optionally ``state_id``/``tabular_model`` for
    exact solving. States must be hashable; ``state_to_list``/``state_from_list``
    give the integer-vector form used on disk.
    """

    spec: GameSpec

    def reset(self, rng: np.random.Generator) -> Any:
        raise NotImplementedError

    def step(self, state, joint_action, rng: Optional[np.random.Generator] = None):
        raise NotImplementedError

    def features(self, state, agent: int) -> np.ndarray:
        raise NotImplementedError

    @property
    def feature_size(self) -> int:
        raise NotImplementedError

    @property
    def is_tabular(self) -> bool:
        return False

    @property
    def n_states(self) -> int:
        raise TabularUnsupported(f"{type(self).__name__} is not enumerable")

    def state_id(self, state) -> int:
        raise TabularUnsupported(f"{type(self).__name__} is not enumerable")

    def state_from_id(self, sid: int):
        raise TabularUnsupported(f"{type(self).__name__} is not enumerable")

    def tabular_model(self):
        raise TabularUnsupported(f"{type(self).__name__} is not enumerable")

    def state_to_list(self, state) -> list:
        raise NotImplementedError

    def state_from_list(self, values: Sequence[int]):
        raise NotImplementedError

    def config_dict(self) -> dict:
        raise NotImplementedError


@dataclass
class TabularModel:
    """Finite game in array form.

    rewards:     ``(n, S, J)`` per-agent reward for every state and joint index.
    next_states: ``(S, J, K)`` successor ids; ``next_probs`` has matching shape.
    done:        ``(S, J)`` episode terminates after this step (successor ignored).
    initial:     ``(S,)`` start-state distribution.
    """

    n_agents: int
    action_count: int
    gamma: float
    rewards: np.ndarray
    next_states: np.ndarray
    next_probs: np.ndarray
    done: np.ndarray
    initial: np.ndarray

    def __post_init__(self):
        S = self.initial.shape[0]
        J = self.action_count**self.n_agents
        if self.rewards.shape != (self.n_agents, S, J):
            raise ValueError(f"rewards shape {self.rewards.shape} != {(self.n_agents, S, J)}")
        if self.next_states.shape[:2] != (S, J) or self.next_probs.shape != self.next_states.shape:
            raise ValueError("transition arrays must have shape (S, J, K)")
        if self.done.shape != (S, J):
            raise ValueError("done mask must have shape (S, J)")
        if not np.allclose(self.next_probs.sum(axis=-1), 1.0):
            raise ValueError("transition probabilities must sum to 1")

    @property
    def n_states(self) -> int:
        return self.initial.shape[0]

    @property
    def joint_count(self) -> int:
        return self.action_count**self.n_agents

    def expected_next(self, values: np.ndarray) -> np.ndarray:
        """``E[values(s')]`` per ``(s, j)``, zero on terminating steps."""
        ev = np.sum(self.next_probs * values[self.next_states], axis=-1)
        return np.where(self.done, 0.0, ev)
