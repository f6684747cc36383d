"""Multi-agent marginal soft-Q learning from demonstrations.

Each agent ``i`` owns a marginal critic ``Qbar_i(s, a_i)`` whose Boltzmann
policy is its behaviour, and a reward model ``R_i(s, a)`` over joint actions.
Per outer iteration one trajectory is rolled out with the joint Boltzmann
policy, then for every agent:

* the critic takes one inverse soft-Q step: minimise
  ``E_rollout[V(s) - gamma V(s')] - E_expert[phi(Qbar(s, a_i) - gamma V(s'))]``
  where ``V(s) = (1 - lam) E_pi[Qbar] + logsumexp(lam Qbar)``;
* the reward model regresses the opponent-averaged reward onto the critic's
  implied reward ``Qbar(s, a_i) - gamma V(s')`` on rollout samples.

Both table and MLP backends are supported; gradients are assembled by hand
from ``dL/dQ`` and pushed through :mod:`mairl.approx`.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import metrics
from .metrics import RunRecord
from .approx import Adam, Mlp, NumericError, Table, load_nets, polyak_update, save_nets
from .datasets import ReplayBuffer, record_to_transition, transition_to_record
from .exact_solver import boltzmann, soft_value_array, soft_value_grad
from .markov_game import (
    DEFAULT_ENUMERATION_CAP,
    MarkovGame,
    Transition,
    enumerate_opponent_actions,
    opponent_weights,
)

log = logging.getLogger(__name__)

PHI_KINDS = ("linear", "pearson")


def phi(x, kind: str = "pearson"):
    """Concave reward regularizer: ``x`` (total variation) or ``x - x^2/4`` (Pearson chi^2)."""
    if kind == "linear":
        return x
    if kind == "pearson":
        return x - 0.25 * np.square(x)
    raise ValueError(f"unknown phi kind {kind!r}; expected one of {PHI_KINDS}")


def phi_grad(x, kind: str = "pearson"):
    if kind == "linear":
        return np.ones_like(np.asarray(x, dtype=np.float64))
    if kind == "pearson":
        return 1.0 - 0.5 * np.asarray(x, dtype=np.float64)
    raise ValueError(f"unknown phi kind {kind!r}; expected one of {PHI_KINDS}")


@dataclass
class MamqlConfig:
    lam: float = 1.0
    gamma: Optional[float] = None  # None: use the environment's discount
    alpha: float = 3e-4
    reward_alpha: Optional[float] = None  # None: same as alpha
    batch_size: int = 64
    buffer_capacity: Optional[int] = None  # None: 400 x horizon
    phi: str = "pearson"
    beta: float = 1e-3
    loss_mode: str = "online"  # "online" | "offline"
    opponent_mode: str = "enumerate"  # "enumerate" | "one-sample"
    tau: Optional[float] = None  # None: 0.005 for mlp, no target network for table
    backend: str = "table"  # "table" | "mlp"
    hidden: int = 64
    depth: int = 4
    seed: int = 0
    max_episodes: int = 1000
    updates_per_episode: int = 1
    eval_interval: int = 100
    eval_episodes: int = 50
    enumeration_cap: int = DEFAULT_ENUMERATION_CAP
    ma_policy_iters: int = 10
    stop_on_convergence: bool = False
    convergence_window: int = 50
    convergence_fraction: float = 0.85

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if self.alpha <= 0 or (self.reward_alpha is not None and self.reward_alpha <= 0):
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.phi not in PHI_KINDS:
            raise ValueError(f"phi must be one of {PHI_KINDS}")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.loss_mode not in ("online", "offline"):
            raise ValueError("loss_mode must be 'online' or 'offline'")
        if self.opponent_mode not in ("enumerate", "one-sample"):
            raise ValueError("opponent_mode must be 'enumerate' or 'one-sample'")
        if self.backend not in ("table", "mlp"):
            raise ValueError("backend must be 'table' or 'mlp'")
        if self.tau is not None and not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if min(self.max_episodes, self.eval_episodes) < 0 or self.eval_interval < 1:
            raise ValueError("episode counts must be non-negative and eval_interval positive")
        if self.updates_per_episode < 1:
            raise ValueError("updates_per_episode must be positive")

    def target_tau(self) -> Optional[float]:
        if self.tau is not None:
            return self.tau
        return 0.005 if self.backend == "mlp" else None

    def capacity_for(self, env: MarkovGame) -> int:
        if self.buffer_capacity is not None:
            return self.buffer_capacity
        if env.spec.horizon is None:
            raise ValueError("buffer_capacity must be given for unbounded-horizon games")
        return 400 * env.spec.horizon


# --- representations ---------------------------------------------------------

class Encoder:
    """Maps states to backend inputs: integer ids (table) or feature rows (mlp)."""

    def __init__(self, env: MarkovGame, backend: str):
        self.env = env
        self.backend = backend
        self._cache: Dict = {}
        if backend == "table":
            self.n_rows = env.n_states
        else:
            self.n_features = env.feature_size

    def __call__(self, states: Sequence, agent: int) -> np.ndarray:
        if len(self._cache) > 500_000:
            self._cache.clear()
        if self.backend == "table":
            ids = []
            for s in states:
                k = self._cache.get(s)
                if k is None:
                    k = self._cache[s] = self.env.state_id(s)
                ids.append(k)
            return np.array(ids, dtype=np.int64)
        rows = []
        for s in states:
            key = (s, agent)
            x = self._cache.get(key)
            if x is None:
                x = self._cache[key] = self.env.features(s, agent)
            rows.append(x)
        return np.stack(rows) if rows else np.zeros((0, self.n_features))


def _make_net(backend: str, encoder: Encoder, n_extra: int, n_out: int, table_cols: int,
              hidden: int, depth: int, rng: np.random.Generator):
    if backend == "table":
        return Table(encoder.n_rows, table_cols)
    return Mlp([encoder.n_features + n_extra] + [hidden] * depth + [n_out], rng)


class ActionHead:
    """``f(s) -> R^A``."""

    def __init__(self, net):
        self.net = net

    @classmethod
    def build(cls, backend, encoder, n_actions, hidden=64, depth=4, rng=None):
        return cls(_make_net(backend, encoder, 0, n_actions, n_actions, hidden, depth, rng))

    @property
    def params(self):
        return self.net.params

    def forward(self, x):
        return self.net.forward(x)

    def backward(self, g):
        return self.net.backward(g)


class JointHead:
    """``f(s, a_slots) -> R`` evaluated for ``K`` action tuples per state.

    ``slots`` is the number of agent actions in the input: ``n`` for a
    joint-action model, 1 for an own-action model.
    """

    def __init__(self, net, slots: int, n_actions: int):
        self.net = net
        self.slots = slots
        self.n_actions = n_actions
        self._shape = None

    @classmethod
    def build(cls, backend, encoder, slots, n_actions, hidden=64, depth=4, rng=None):
        net = _make_net(backend, encoder, slots * n_actions, 1, n_actions**slots, hidden, depth, rng)
        return cls(net, slots, n_actions)

    @property
    def params(self):
        return self.net.params

    def _cols(self, joints):
        cols = np.zeros(joints.shape[:2], dtype=np.int64)
        for k in range(self.slots):
            cols = cols * self.n_actions + joints[..., k]
        return cols

    def forward(self, x, joints: np.ndarray) -> np.ndarray:
        joints = np.asarray(joints, dtype=np.int64)
        B, K, m = joints.shape
        if m != self.slots:
            raise ValueError(f"expected {self.slots} action slots, got {m}")
        self._shape = (B, K)
        if isinstance(self.net, Table):
            rows = self.net.forward(x)
            self._cols_cache = self._cols(joints)
            return rows[np.arange(B)[:, None], self._cols_cache]
        onehot = np.zeros((B, K, m, self.n_actions))
        np.put_along_axis(onehot, joints[..., None], 1.0, axis=-1)
        X = np.concatenate([np.repeat(x, K, axis=0), onehot.reshape(B * K, m * self.n_actions)], axis=1)
        return self.net.forward(X).reshape(B, K)

    def backward(self, g: np.ndarray):
        B, K = self._shape
        if isinstance(self.net, Table):
            full = np.zeros((B, self.n_actions**self.slots))
            np.add.at(full, (np.repeat(np.arange(B), K), self._cols_cache.ravel()), g.ravel())
            return self.net.backward(full)
        return self.net.backward(g.reshape(B * K, 1))


class MarginalCritic:
    def __init__(self, head: ActionHead, lam: float, agent: int, lr: float, tau: Optional[float]):
        self.head = head
        self.lam = lam
        self.agent = agent
        self.tau = tau
        self.target = head.net.copy() if tau else None
        self.opt = Adam(head.params, lr, lazy=isinstance(head.net, Table))

    def q(self, x) -> np.ndarray:
        return self.head.net.forward(x)

    def q_target(self, x) -> np.ndarray:
        return (self.target or self.head.net).forward(x)

    def policy(self, x) -> np.ndarray:
        return boltzmann(self.q(x), self.lam)

    def apply(self, grads) -> None:
        self.opt.step(self.head.params, grads)
        if self.target is not None:
            polyak_update(self.target.params, self.head.params, self.tau)


class RewardModel:
    def __init__(self, head: JointHead, agent: int, lr: float):
        self.head = head
        self.agent = agent
        self.opt = Adam(head.params, lr, lazy=isinstance(head.net, Table))

    def predict(self, x, joint_actions: np.ndarray) -> np.ndarray:
        """Reward for each row's actual joint action ``(B, n)``."""
        joint_actions = np.asarray(joint_actions, dtype=np.int64)
        if self.head.slots == 1:
            sel = joint_actions[:, None, self.agent : self.agent + 1]
        else:
            sel = joint_actions[:, None, :]
        return self.head.forward(x, sel)[:, 0]

    def apply(self, grads) -> None:
        self.opt.step(self.head.params, grads)


@dataclass
class Batch:
    s: np.ndarray
    s_next: np.ndarray
    actions: np.ndarray  # (B, n)
    done: np.ndarray  # (B,) bool

    def __len__(self):
        return len(self.actions)


def make_batch(transitions: Sequence[Transition], encoder: Encoder, agent: int) -> Batch:
    return Batch(
        s=encoder([t.state for t in transitions], agent),
        # terminal successors are never valued; encode s in their place so that
        # table ids stay in range
        s_next=encoder([t.state if t.done else t.next_state for t in transitions], agent),
        actions=np.array([t.joint_action for t in transitions], dtype=np.int64).reshape(len(transitions), -1),
        done=np.array([t.done for t in transitions], dtype=bool),
    )


# --- losses --------------------------------------------------------------------

def critic_loss(critic: MarginalCritic, expert: Batch, rollout: Optional[Batch], gamma: float,
                phi_kind: str = "pearson", mode: str = "online", initial=None):
    """Inverse soft-Q objective for one marginal critic; returns ``(loss, grads)``.

    ``online`` estimates the value term from rollout transitions as
    ``V(s) - gamma V(s')``; ``offline`` uses ``(1 - gamma) V(s0)`` over the
    encoded start states ``initial``. With a target network, ``V(s')`` inside
    the expert reward term is taken from the target copy and not differentiated.
    """
    lam, i = critic.lam, critic.agent
    n_e = len(expert)
    if n_e == 0:
        raise ValueError("empty expert batch")
    if mode == "online":
        if rollout is None or len(rollout) == 0:
            raise ValueError("online critic loss needs a non-empty rollout batch")
        value_parts = [rollout.s, rollout.s_next]
    elif mode == "offline":
        if initial is None or len(initial) == 0:
            raise ValueError("offline critic loss needs initial-state samples")
        value_parts = [initial]
    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    use_target = critic.target is not None
    parts = value_parts + [expert.s] + ([] if use_target else [expert.s_next])
    sizes = [len(p) for p in parts]
    q = critic.q(np.concatenate(parts, axis=0))
    offsets = np.cumsum([0] + sizes)
    blocks = [q[offsets[k]:offsets[k + 1]] for k in range(len(parts))]
    grad = np.zeros_like(q)
    gblocks = [grad[offsets[k]:offsets[k + 1]] for k in range(len(parts))]

    if mode == "online":
        n_r = len(rollout)
        cont_r = gamma * (~rollout.done)
        v_s, v_next = soft_value_array(blocks[0], lam), soft_value_array(blocks[1], lam)
        value_term = np.mean(v_s - cont_r * v_next)
        gblocks[0] += soft_value_grad(blocks[0], lam) / n_r
        gblocks[1] -= (cont_r / n_r)[:, None] * soft_value_grad(blocks[1], lam)
        k = 2
    else:
        n0 = len(initial)
        value_term = (1.0 - gamma) * np.mean(soft_value_array(blocks[0], lam))
        gblocks[0] += (1.0 - gamma) / n0 * soft_value_grad(blocks[0], lam)
        k = 1

    q_e = blocks[k]
    a_e = expert.actions[:, i]
    cont_e = gamma * (~expert.done)
    if use_target:
        v_e_next = soft_value_array(critic.q_target(expert.s_next), lam)
    else:
        v_e_next = soft_value_array(blocks[k + 1], lam)
    r = q_e[np.arange(n_e), a_e] - cont_e * v_e_next
    loss = value_term - np.mean(phi(r, phi_kind))
    dphi = phi_grad(r, phi_kind) / n_e
    gblocks[k][np.arange(n_e), a_e] -= dphi
    if not use_target:
        gblocks[k + 1] += (dphi * cont_e)[:, None] * soft_value_grad(blocks[k + 1], lam)
    if not np.isfinite(loss):
        raise NumericError("non-finite critic loss")
    return float(loss), critic.head.backward(grad)


def reward_estimate(critic: MarginalCritic, batch: Batch, gamma: float) -> np.ndarray:
    """Implied reward ``Qbar(s, a_i) - gamma V(s')`` with ``V(terminal) = 0``.

    ``V(s')`` comes from the target copy when the critic has one.
    """
    i = critic.agent
    q_s = critic.q(batch.s)
    v_next = soft_value_array(critic.q_target(batch.s_next), critic.lam)
    return q_s[np.arange(len(batch)), batch.actions[:, i]] - gamma * (~batch.done) * v_next


def regress_reward(reward: RewardModel, x, joints: np.ndarray, weights: np.ndarray,
                   actual: np.ndarray, target: np.ndarray, beta: float):
    """Squared error between ``target`` and the weighted model output plus ``beta * mean(R^2)``.

    ``joints`` is ``(B, T, slots)`` with ``weights`` ``(B, T)``; ``actual`` is
    ``(B, slots)``, the sampled action tuple used by the magnitude penalty.
    """
    B, T = weights.shape
    cols = np.concatenate([joints, actual[:, None, :]], axis=1)
    out = reward.head.forward(x, cols)
    pred = np.sum(weights * out[:, :T], axis=1)
    resid = target - pred
    loss = np.mean(resid**2) + beta * np.mean(out[:, T] ** 2)
    g = np.zeros_like(out)
    g[:, :T] = (-2.0 / B) * resid[:, None] * weights
    g[:, T] = (2.0 * beta / B) * out[:, T]
    if not np.isfinite(loss):
        raise NumericError("non-finite reward loss")
    return float(loss), reward.head.backward(g)


def opponent_tuples(n_agents, n_actions, i, opp_probs, mode, rng, cap):
    """Joint actions with agent ``i``'s slot left at 0, and their weights.

    ``enumerate`` returns every opponent tuple weighted by its probability;
    ``one-sample`` draws one tuple per row from the opponents' policies.
    """
    B = opp_probs.shape[1]
    if mode == "enumerate":
        tuples = np.array(enumerate_opponent_actions(n_agents, n_actions, i, cap), dtype=np.int64)
        tuples = tuples.reshape(len(tuples), n_agents - 1)
        weights = opponent_weights(opp_probs, i, cap)
        joints = np.zeros((B, len(tuples), n_agents), dtype=np.int64)
        others = [j for j in range(n_agents) if j != i]
        joints[:, :, others] = tuples[None]
        return joints, weights
    if mode == "one-sample":
        joints = np.zeros((B, 1, n_agents), dtype=np.int64)
        for j in range(n_agents):
            if j == i:
                continue
            cdf = np.cumsum(opp_probs[j], axis=1)
            u = rng.random(B)
            joints[:, 0, j] = np.minimum((cdf < u[:, None]).sum(axis=1), n_actions - 1)
        return joints, np.ones((B, 1))
    raise ValueError(f"unknown opponent mode {mode!r}")


def reward_loss(reward: RewardModel, critic: MarginalCritic, opp_probs: np.ndarray, batch: Batch,
                gamma: float, beta: float = 1e-3, opponent_mode: str = "enumerate",
                rng: Optional[np.random.Generator] = None, cap: int = DEFAULT_ENUMERATION_CAP):
    """Regress ``E_{a_-i ~ pi_-i} R(s, a_i, a_-i)`` onto the critic's implied reward.

    ``opp_probs`` is the frozen policy snapshot ``(n, B, A)`` at ``batch.s``.
    The target is a constant: no gradient reaches the critic. When exact
    enumeration exceeds ``cap`` a single sampled opponent tuple is used.
    """
    if len(batch) == 0:
        raise ValueError("empty rollout batch")
    i = reward.agent
    n, _, A = opp_probs.shape
    target = reward_estimate(critic, batch, gamma)
    mode = opponent_mode
    if mode == "enumerate" and A ** (n - 1) > cap:
        mode = "one-sample"
    if reward.head.slots == 1:
        # own-action reward model: no opponent expectation
        joints = batch.actions[:, None, i : i + 1]
        return regress_reward(reward, batch.s, joints, np.ones((len(batch), 1)),
                              batch.actions[:, i : i + 1], target, beta)
    joints, weights = opponent_tuples(n, A, i, opp_probs, mode, rng or np.random.default_rng(0), cap)
    joints[:, :, i] = batch.actions[:, i][:, None]
    return regress_reward(reward, batch.s, joints, weights, batch.actions, target, beta)


def act(critics: Sequence[MarginalCritic], inputs: Sequence[np.ndarray],
        rng: np.random.Generator) -> tuple:
    """Sample a joint action; ``inputs[i]`` is agent ``i``'s encoded state (one row)."""
    out = []
    for c, x in zip(critics, inputs):
        x = np.asarray(x)
        p = c.policy(x.reshape(1) if x.ndim == 0 else x.reshape(1, -1))[0]
        out.append(int(min(np.searchsorted(np.cumsum(p), rng.random()), len(p) - 1)))
    return tuple(out)


# --- training --------------------------------------------------------------------

class Trainer:
    """Online loop shared by MAMQL and the inverse soft-Q baselines.

    Subclasses build the models and implement :meth:`probs` and
    :meth:`update_agent`. The trainer doubles as a policy bundle for
    :mod:`mairl.metrics`.
    """

    algo = "base"

    def __init__(self, env: MarkovGame, expert: Sequence[Transition], cfg: MamqlConfig,
                 expert_policy=None, expert_return: Optional[float] = None):
        if len(expert) == 0:
            raise ValueError("expert dataset is empty")
        n = env.spec.n_agents
        for t in expert[:1]:
            if len(t.joint_action) != n:
                raise ValueError("expert dataset does not match the environment's agent count")
        self.env = env
        self.expert = list(expert)
        self.cfg = cfg
        self.n_agents = n
        self.n_actions = env.spec.action_count
        self.gamma = env.spec.gamma if cfg.gamma is None else cfg.gamma
        self.expert_policy = expert_policy
        self.expert_return = expert_return
        self.encoder = Encoder(env, cfg.backend)
        seeds = np.random.SeedSequence(cfg.seed).spawn(4)
        self.init_rng = np.random.default_rng(seeds[0])
        self.rollout_rng = np.random.default_rng(seeds[1])
        self.sample_rng = np.random.default_rng(seeds[2])
        self.loss_rng = np.random.default_rng(seeds[3])
        self.buffer = ReplayBuffer(cfg.capacity_for(env), self.sample_rng)
        self.episode = 0
        self.env_steps = 0
        self.records: List[RunRecord] = []
        self.losses: List[List[float]] = []  # per update round: [critic_0, reward_0, critic_1, ...]
        self._start_time = time.perf_counter()
        self.build_models()

    # hooks -------------------------------------------------------------------
    def build_models(self) -> None:
        raise NotImplementedError

    def probs(self, states: Sequence) -> np.ndarray:
        """Joint policy ``(n, B, A)`` at ``states``."""
        raise NotImplementedError

    def update_agent(self, i: int, expert: List[Transition], rollout: List[Transition]) -> List[float]:
        raise NotImplementedError

    def nets(self) -> Dict[str, object]:
        raise NotImplementedError

    def optimizers(self) -> Dict[str, Adam]:
        raise NotImplementedError

    def reward_predict(self, states: Sequence, joint_actions: np.ndarray, agent: int) -> np.ndarray:
        raise NotImplementedError

    # loop ----------------------------------------------------------------------
    def rollout_episode(self) -> List[Transition]:
        env, rng = self.env, self.rollout_rng
        state = env.reset(rng)
        out = []
        t = 0
        while True:
            p = self.probs([state])[:, 0]
            a = metrics.sample_actions(p[:, None, :], rng)[:, 0]
            nxt, rewards, done = env.step(state, tuple(int(x) for x in a), rng)
            out.append(Transition(state, tuple(int(x) for x in a), nxt, bool(done),
                                  tuple(float(r) for r in rewards), self.episode, t))
            if done:
                return out
            state, t = nxt, t + 1

    def sample_expert(self) -> List[Transition]:
        k = min(self.cfg.batch_size, len(self.expert))
        idx = self.sample_rng.choice(len(self.expert), size=k, replace=False)
        return [self.expert[j] for j in idx]

    def update(self) -> bool:
        """One update round for every agent; False if the buffer is not ready."""
        if len(self.buffer) < self.cfg.batch_size:
            return False
        round_losses: List[float] = []
        self.snapshot_round()
        for i in range(self.n_agents):
            expert = self.sample_expert()
            rollout = self.buffer.sample(self.cfg.batch_size)
            round_losses.extend(self.update_agent(i, expert, rollout))
        self.losses.append(round_losses)
        return True

    def snapshot_round(self) -> None:
        """Hook called once per round before the per-agent updates."""

    def evaluate(self) -> RunRecord:
        seed = self.cfg.seed
        ev = metrics.evaluate_bundle(
            self, self.env, self.expert, n_episodes=self.cfg.eval_episodes,
            seed=(seed, self.episode), expert_policy=self.expert_policy,
            reward_fn=self.reward_predict,
        )
        return RunRecord(
            episode=self.episode, env_steps=self.env_steps, seed=seed,
            total_return=ev["total_return"], total_return_stderr=ev["total_return_stderr"],
            returns=ev["returns"], return_ratio=ev["return_ratio"], reward_mse=ev["reward_mse"],
            nll=ev["nll"], tv=ev["tv"], wall_clock=time.perf_counter() - self._start_time,
        )

    def converged(self) -> bool:
        if self.expert_return is None:
            return False
        w = self.cfg.convergence_window
        if len(self.records) < w:
            return False
        recent = np.mean([r.total_return for r in self.records[-w:]])
        return recent >= self.cfg.convergence_fraction * self.expert_return

    def run(self, max_episodes: Optional[int] = None,
            on_record: Optional[Callable[[RunRecord], None]] = None,
            checkpoint_dir=None, checkpoint_every: Optional[int] = None,
            stop_after: Optional[int] = None) -> List[RunRecord]:
        """Train until ``max_episodes`` (total, including resumed ones).

        Evaluations happen before the first episode and then every
        ``eval_interval`` episodes. ``stop_after`` interrupts the loop after
        that many episodes in this call (used to test resumption).
        """
        max_episodes = self.cfg.max_episodes if max_episodes is None else max_episodes
        if max_episodes == 0:
            return self.records
        done_here = 0
        while True:
            if self.episode % self.cfg.eval_interval == 0 and (
                not self.records or self.records[-1].episode != self.episode
            ):
                rec = self.evaluate()
                self.records.append(rec)
                if on_record:
                    on_record(rec)
                if checkpoint_dir is not None and (
                    checkpoint_every is None or self.episode % checkpoint_every == 0
                ):
                    self.save(checkpoint_dir)
                if self.cfg.stop_on_convergence and self.converged():
                    break
            if self.episode >= max_episodes or (stop_after is not None and done_here >= stop_after):
                break
            try:
                traj = self.rollout_episode()
                self.buffer.extend(traj)
                self.env_steps += len(traj)
                for _ in range(self.cfg.updates_per_episode):
                    self.update()
            except NumericError as exc:
                raise NumericError(f"episode {self.episode}: {exc}") from exc
            self.episode += 1
            done_here += 1
        return self.records

    # checkpoints -------------------------------------------------------------------
    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        nets = dict(self.nets())
        opt_state, opt_arrays = {}, {}
        for name, opt in self.optimizers().items():
            arrays = opt.state_arrays()
            opt_state[name] = {"t": opt.t, "n": len(arrays)}
            for k, a in enumerate(arrays):
                opt_arrays[f"{name}/{k}"] = a
        items, head = self.buffer.raw_state()
        state = {
            "algo": self.algo,
            "config": asdict(self.cfg),
            "episode": self.episode,
            "env_steps": self.env_steps,
            "env_hash": self.env.digest(),
            "rng": {
                "init": self.init_rng.bit_generator.state,
                "rollout": self.rollout_rng.bit_generator.state,
                "sample": self.sample_rng.bit_generator.state,
                "loss": self.loss_rng.bit_generator.state,
            },
            "optimizers": opt_state,
            "buffer_head": head,
            "buffer_digest": self.buffer.digest(self.env),
            "records": [asdict(r) for r in self.records],
            "losses": self.losses,
            "elapsed": time.perf_counter() - self._start_time,
        }
        save_nets(d / "model.npz", nets)
        with open(d / "optim.npz", "wb") as fh:
            np.savez(fh, **opt_arrays)
        with open(d / "buffer.jsonl", "w") as fh:
            for t in items:
                fh.write(json.dumps(transition_to_record(t, self.env)) + "\n")
        (d / "state.json").write_text(json.dumps(state))

    def load(self, directory) -> None:
        d = Path(directory)
        state = json.loads((d / "state.json").read_text())
        if state["algo"] != self.algo:
            raise ValueError(f"checkpoint is for {state['algo']!r}, not {self.algo!r}")
        if state["env_hash"] != self.env.digest():
            raise ValueError("checkpoint was written for a different environment")
        nets, _ = load_nets(d / "model.npz")
        for name, net in self.nets().items():
            for p, q in zip(net.params, nets[name].params):
                if p.shape != q.shape:
                    raise ValueError(f"checkpoint parameter shape mismatch in {name}")
                p[...] = q
        with np.load(d / "optim.npz") as data:
            for name, opt in self.optimizers().items():
                meta = state["optimizers"][name]
                opt.load_state(meta["t"], [data[f"{name}/{k}"] for k in range(meta["n"])])
        for key, rng in (("init", self.init_rng), ("rollout", self.rollout_rng),
                         ("sample", self.sample_rng), ("loss", self.loss_rng)):
            rng.bit_generator.state = state["rng"][key]
        with open(d / "buffer.jsonl") as fh:
            items = [record_to_transition(json.loads(line), self.env) for line in fh if line.strip()]
        self.buffer.load_raw_state(items, state["buffer_head"])
        if self.buffer.digest(self.env) != state["buffer_digest"]:
            raise ValueError("buffer digest mismatch after restore")
        self.episode = state["episode"]
        self.env_steps = state["env_steps"]
        self.records = [RunRecord(**r) for r in state["records"]]
        self.losses = state["losses"]
        self._start_time = time.perf_counter() - state["elapsed"]


class MamqlTrainer(Trainer):
    algo = "mamql"
    reward_slots_joint = True

    def build_models(self) -> None:
        cfg, rng = self.cfg, self.init_rng
        tau = cfg.target_tau()
        reward_lr = cfg.reward_alpha or cfg.alpha
        self.critics: List[MarginalCritic] = []
        self.rewards: List[RewardModel] = []
        slots = self.n_agents if self.reward_slots_joint else 1
        for i in range(self.n_agents):
            head = ActionHead.build(cfg.backend, self.encoder, self.n_actions, cfg.hidden, cfg.depth, rng)
            self.critics.append(MarginalCritic(head, cfg.lam, i, cfg.alpha, tau))
        for i in range(self.n_agents):
            head = JointHead.build(cfg.backend, self.encoder, slots, self.n_actions, cfg.hidden, cfg.depth, rng)
            self.rewards.append(RewardModel(head, i, reward_lr))

    def probs(self, states: Sequence) -> np.ndarray:
        return np.stack([c.policy(self.encoder(states, c.agent)) for c in self.critics])

    def snapshot_round(self) -> None:
        self._snapshot = [c.head.net.copy() for c in self.critics]

    def snapshot_probs(self, states: Sequence) -> np.ndarray:
        return np.stack([
            boltzmann(net.forward(self.encoder(states, k)), self.cfg.lam)
            for k, net in enumerate(self._snapshot)
        ])

    def initial_states(self, k: int) -> List:
        return [self.env.reset(self.sample_rng) for _ in range(k)]

    def update_agent(self, i, expert, rollout):
        cfg = self.cfg
        critic, reward = self.critics[i], self.rewards[i]
        eb = make_batch(expert, self.encoder, i)
        rb = make_batch(rollout, self.encoder, i)
        initial = None
        if cfg.loss_mode == "offline":
            initial = self.encoder(self.initial_states(cfg.batch_size), i)
        c_loss, grads = critic_loss(critic, eb, rb, self.gamma, cfg.phi, cfg.loss_mode, initial)
        critic.apply(grads)
        opp = self.snapshot_probs([t.state for t in rollout])
        r_loss, rgrads = reward_loss(reward, critic, opp, rb, self.gamma, cfg.beta,
                                     cfg.opponent_mode, self.loss_rng, cfg.enumeration_cap)
        reward.apply(rgrads)
        return [c_loss, r_loss]

    def nets(self):
        out = {}
        for i, c in enumerate(self.critics):
            out[f"critic{i}"] = c.head.net
            if c.target is not None:
                out[f"critic{i}.target"] = c.target
        for i, r in enumerate(self.rewards):
            out[f"reward{i}"] = r.head.net
        return out

    def optimizers(self):
        out = {f"critic{i}": c.opt for i, c in enumerate(self.critics)}
        out.update({f"reward{i}": r.opt for i, r in enumerate(self.rewards)})
        return out

    def reward_predict(self, states, joint_actions, agent):
        return self.rewards[agent].predict(self.encoder(states, agent), joint_actions)


@dataclass
class TrainResult:
    critics: list
    reward_models: list
    records: List[RunRecord]
    trainer: Trainer


def train(env: MarkovGame, expert: Sequence[Transition], cfg: MamqlConfig, **kwargs) -> TrainResult:
    """Run MAMQL for ``cfg.max_episodes`` episodes."""
    trainer = MamqlTrainer(env, expert, cfg, **kwargs)
    records = trainer.run()
    return TrainResult(trainer.critics, trainer.rewards, records, trainer)
