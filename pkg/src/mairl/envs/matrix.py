"""Small stochastic games given directly by payoff and transition tables."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from ..markov_game import GameSpec, MarkovGame, TabularModel, joint_index, validate_joint


@dataclass
class MatrixGameConfig:
    """Payoffs are ``(n_agents, n_states, A^n)`` or ``(n_agents, n_states, A, ..., A)``.

    ``transitions`` may be omitted (every state loops to itself), a ``(S, A^n)``
    table of successor ids, or a ``(S, A^n, S)`` probability tensor.
    With ``horizon=None`` the game is an infinite-horizon discounted game; the
    tabular model then has no time index and cannot be rolled out.
    """

    payoffs: list
    n_agents: int = 2
    action_count: int = 2
    transitions: Optional[list] = None
    initial: Optional[list] = None
    gamma: float = 0.9
    horizon: Optional[int] = 10

    def __post_init__(self):
        n, A = self.n_agents, self.action_count
        pay = np.asarray(self.payoffs, dtype=np.float64)
        if pay.ndim == 2 + n and pay.shape[2:] == (A,) * n:
            pay = pay.reshape(pay.shape[0], pay.shape[1], A**n)
        if pay.ndim != 3 or pay.shape[0] != n or pay.shape[2] != A**n:
            raise ValueError(
                f"payoffs must have shape (n_agents, n_states, A^n) = ({n}, S, {A ** n}), got {pay.shape}"
            )
        self._pay = pay
        S = pay.shape[1]
        if self.transitions is None:
            probs = np.zeros((S, A**n, S))
            probs[np.arange(S), :, np.arange(S)] = 1.0
        else:
            t = np.asarray(self.transitions)
            if t.shape == (S, A**n):
                if np.any((t < 0) | (t >= S)) or not np.all(t == np.round(t)):
                    raise ValueError("deterministic transition table has invalid state ids")
                probs = np.zeros((S, A**n, S))
                idx = t.astype(np.int64)
                probs[np.arange(S)[:, None], np.arange(A**n)[None, :], idx] = 1.0
            elif t.shape == (S, A**n, S):
                probs = t.astype(np.float64)
                if np.any(probs < 0) or not np.allclose(probs.sum(-1), 1.0):
                    raise ValueError("transition probabilities must be non-negative and sum to 1")
            else:
                raise ValueError(f"transitions have shape {t.shape}; expected {(S, A ** n)} or {(S, A ** n, S)}")
        self._probs = probs
        if self.initial is None:
            init = np.zeros(S)
            init[0] = 1.0
        else:
            init = np.asarray(self.initial, dtype=np.float64)
            if init.shape != (S,) or np.any(init < 0) or not np.isclose(init.sum(), 1.0):
                raise ValueError("initial must be a probability vector over states")
        self._init = init
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.horizon is not None and self.horizon < 1:
            raise ValueError("horizon must be positive")

    @property
    def n_states(self) -> int:
        return self._pay.shape[1]

    def to_dict(self) -> dict:
        return {
            "payoffs": self._pay.tolist(),
            "n_agents": self.n_agents,
            "action_count": self.action_count,
            "transitions": self._probs.tolist(),
            "initial": self._init.tolist(),
            "gamma": self.gamma,
            "horizon": self.horizon,
        }

    def digest(self) -> str:
        payload = json.dumps({"env": "matrix", **self.to_dict()}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()


class MatrixState(NamedTuple):
    s: int
    t: int


def matrix_step(state: MatrixState, a, cfg: MatrixGameConfig, rng: Optional[np.random.Generator] = None):
    a = validate_joint(a, cfg.n_agents, cfg.action_count)
    j = joint_index(a, cfg.action_count)
    rewards = cfg._pay[:, state.s, j].copy()
    probs = cfg._probs[state.s, j]
    if np.count_nonzero(probs) == 1:
        nxt = int(np.argmax(probs))
    else:
        if rng is None:
            raise ValueError("stochastic transition requires an rng")
        nxt = int(rng.choice(len(probs), p=probs))
    t = state.t + 1
    done = cfg.horizon is not None and t >= cfg.horizon
    return MatrixState(nxt, t), rewards, done


class MatrixGameEnv(MarkovGame):
    def __init__(self, cfg: MatrixGameConfig):
        self.cfg = cfg
        self.spec = GameSpec(
            n_agents=cfg.n_agents,
            action_count=cfg.action_count,
            gamma=cfg.gamma,
            horizon=cfg.horizon,
            state_space_size=self.n_states,
        )
        self._model = None

    def reset(self, rng: np.random.Generator) -> MatrixState:
        init = self.cfg._init
        s = int(np.argmax(init)) if np.count_nonzero(init) == 1 else int(rng.choice(len(init), p=init))
        return MatrixState(s, 0)

    def step(self, state, joint_action, rng=None):
        return matrix_step(state, joint_action, self.cfg, rng)

    def features(self, state: MatrixState, agent: int) -> np.ndarray:
        S = self.cfg.n_states
        x = np.zeros(self.feature_size)
        x[state.s] = 1.0
        if self.cfg.horizon is not None:
            x[S + min(state.t, self.cfg.horizon - 1)] = 1.0
        return x

    @property
    def feature_size(self) -> int:
        return self.cfg.n_states + (self.cfg.horizon or 0)

    @property
    def is_tabular(self) -> bool:
        return True

    @property
    def n_states(self) -> int:
        return self.cfg.n_states * (self.cfg.horizon or 1)

    def state_id(self, state: MatrixState) -> int:
        if self.cfg.horizon is None:
            return state.s
        return state.t * self.cfg.n_states + state.s

    def state_from_id(self, sid: int) -> MatrixState:
        t, s = divmod(int(sid), self.cfg.n_states)
        return MatrixState(s, t)

    def tabular_model(self) -> TabularModel:
        if self._model is not None:
            return self._model
        cfg = self.cfg
        S0, J = cfg.n_states, cfg.action_count**cfg.n_agents
        succ = np.broadcast_to(np.arange(S0), (S0, J, S0))
        if cfg.horizon is None:
            self._model = TabularModel(
                cfg.n_agents, cfg.action_count, cfg.gamma, cfg._pay.copy(),
                succ.copy(), cfg._probs.copy(), np.zeros((S0, J), dtype=bool), cfg._init.copy(),
            )
            return self._model
        H = cfg.horizon
        steps = np.arange(H)
        nxt_t = np.minimum(steps + 1, H - 1)
        next_states = (nxt_t[:, None, None, None] * S0 + succ[None]).reshape(H * S0, J, S0)
        initial = np.zeros(H * S0)
        initial[:S0] = cfg._init
        done = np.broadcast_to((steps == H - 1)[:, None, None], (H, S0, J)).reshape(H * S0, J)
        self._model = TabularModel(
            cfg.n_agents, cfg.action_count, cfg.gamma,
            np.tile(cfg._pay, (1, H, 1)),
            next_states,
            np.tile(cfg._probs, (H, 1, 1)),
            done.copy(),
            initial,
        )
        return self._model

    def state_to_list(self, state: MatrixState) -> list:
        return [int(state.s), int(state.t)]

    def state_from_list(self, values: Sequence[int]) -> MatrixState:
        if len(values) != 2:
            raise ValueError("matrix-game states are [state, step]")
        return MatrixState(int(values[0]), int(values[1]))

    def config_dict(self) -> dict:
        return {"type": "matrix", **self.cfg.to_dict()}

    def digest(self) -> str:
        return self.cfg.digest()


def random_matrix_game(
    rng: np.random.Generator,
    n_states: int = 3,
    n_agents: int = 2,
    action_count: int = 2,
    gamma: float = 0.9,
    horizon: Optional[int] = None,
    stochastic: bool = True,
) -> MatrixGameConfig:
    J = action_count**n_agents
    payoffs = rng.uniform(-1.0, 1.0, size=(n_agents, n_states, J))
    if stochastic:
        transitions = rng.dirichlet(np.ones(n_states), size=(n_states, J))
    else:
        transitions = rng.integers(0, n_states, size=(n_states, J))
    return MatrixGameConfig(
        payoffs=payoffs.tolist(), n_agents=n_agents, action_count=action_count,
        transitions=transitions.tolist(), gamma=gamma, horizon=horizon,
    )
