"""Comparison learners: behavioural cloning and two inverse soft-Q variants.

* ``bc``: per-agent softmax classifier on expert (state, action) pairs.
* ``iql-indep``: each agent runs single-agent inverse soft-Q on its own
  action, treating the other agents as part of the environment. Its critic
  objective is the same as MAMQL's, so the two learn the same policies from
  the same seed; the reward model only sees the agent's own action.
* ``iql-ma``: each agent's critic takes the full joint action. Values and
  policies come from averaging that critic over the other agents' current
  Boltzmann policies, found by a few rounds of simultaneous best response.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .approx import Adam, NumericError, Table, polyak_update
from .exact_solver import boltzmann, log_sum_exp, marginalize, soft_value_array, soft_value_grad
from .markov_game import MarkovGame, Transition, joint_index, joint_table
from .mamql import (
    ActionHead,
    Batch,
    Encoder,
    JointHead,
    MamqlConfig,
    MamqlTrainer,
    RewardModel,
    Trainer,
    TrainResult,
    make_batch,
    phi,
    phi_grad,
    regress_reward,
)


# --- behavioural cloning ---------------------------------------------------------------

@dataclass
class BcConfig:
    backend: str = "table"
    alpha: float = 3e-4
    batch_size: int = 64
    n_updates: int = 5000
    full_batch: bool = False
    hidden: int = 64
    depth: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.backend not in ("table", "mlp"):
            raise ValueError("backend must be 'table' or 'mlp'")
        if self.alpha <= 0 or self.batch_size < 1 or self.n_updates < 0:
            raise ValueError("alpha and batch_size must be positive, n_updates non-negative")


def bc_loss(head: ActionHead, x, actions: np.ndarray):
    """Mean cross-entropy of ``actions`` under ``softmax(head(x))``; returns ``(loss, grads)``."""
    logits = head.forward(x)
    B = len(actions)
    if B == 0:
        raise ValueError("empty batch")
    logp = logits - log_sum_exp(logits)[:, None]
    loss = -float(np.mean(logp[np.arange(B), actions]))
    g = np.exp(logp)
    g[np.arange(B), actions] -= 1.0
    if not np.isfinite(loss):
        raise NumericError("non-finite cross-entropy")
    return loss, head.backward(g / B)


class BcPolicy:
    """Per-agent softmax policies; a policy bundle for :mod:`mairl.metrics`."""

    algo = "bc"

    def __init__(self, env: MarkovGame, cfg: BcConfig):
        self.env, self.cfg = env, cfg
        self.encoder = Encoder(env, cfg.backend)
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
        A = env.spec.action_count
        self.heads = [ActionHead.build(cfg.backend, self.encoder, A, cfg.hidden, cfg.depth, rng)
                      for _ in range(env.spec.n_agents)]
        self.opts = [Adam(h.params, cfg.alpha, lazy=isinstance(h.net, Table)) for h in self.heads]
        self.env_steps = 0
        self.losses: List[List[float]] = []

    def probs(self, states: Sequence) -> np.ndarray:
        return np.stack([boltzmann(h.forward(self.encoder(states, i)), 1.0)
                         for i, h in enumerate(self.heads)])

    def nets(self):
        return {f"policy{i}": h.net for i, h in enumerate(self.heads)}


def bc_train(env: MarkovGame, expert: Sequence[Transition], cfg: BcConfig,
             on_step=None) -> BcPolicy:
    """Fit every agent's policy by minibatch (or full-batch) cross-entropy descent."""
    if len(expert) == 0:
        raise ValueError("expert dataset is empty")
    pol = BcPolicy(env, cfg)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[1])
    states = [t.state for t in expert]
    acts = np.array([t.joint_action for t in expert], dtype=np.int64)
    inputs = [pol.encoder(states, i) for i in range(env.spec.n_agents)]
    for step in range(cfg.n_updates):
        if cfg.full_batch:
            idx = np.arange(len(expert))
        else:
            idx = rng.choice(len(expert), size=min(cfg.batch_size, len(expert)), replace=False)
        row = []
        for i, (head, opt) in enumerate(zip(pol.heads, pol.opts)):
            loss, grads = bc_loss(head, inputs[i][idx], acts[idx, i])
            opt.step(head.params, grads)
            row.append(loss)
        pol.losses.append(row)
        if on_step:
            on_step(step, row)
    return pol


# --- independent inverse soft-Q -------------------------------------------------------------

class IqlIndependentTrainer(MamqlTrainer):
    algo = "iql-indep"
    reward_slots_joint = False


def iql_independent_train(env, expert, cfg: MamqlConfig, **kwargs) -> TrainResult:
    trainer = IqlIndependentTrainer(env, expert, cfg, **kwargs)
    records = trainer.run()
    return TrainResult(trainer.critics, trainer.rewards, records, trainer)


# --- multi-agent inverse soft-Q with joint-action critics ---------------------------------------

class JointCritic:
    """``Q_i(s, a_1..a_n)`` with an optional Polyak target copy."""

    def __init__(self, head: JointHead, lam: float, agent: int, lr: float, tau: Optional[float]):
        self.head = head
        self.lam = lam
        self.agent = agent
        self.tau = tau
        self.target = JointHead(head.net.copy(), head.slots, head.n_actions) if tau else None
        self.opt = Adam(head.params, lr, lazy=isinstance(head.net, Table))

    def all_joint(self, x, joints: np.ndarray, target: bool = False) -> np.ndarray:
        """Values for every joint action: ``(B, A^n)``."""
        head = self.target if (target and self.target is not None) else self.head
        B = len(x)
        return head.forward(x, np.broadcast_to(joints, (B,) + joints.shape))

    def apply(self, grads) -> None:
        self.opt.step(self.head.params, grads)
        if self.target is not None:
            polyak_update(self.target.params, self.head.params, self.tau)


def opponent_fixed_point(q_full: Sequence[np.ndarray], lam: float, n_actions: int,
                         iters: int) -> np.ndarray:
    """Simultaneous Boltzmann best responses from uniform play.

    ``q_full[j]`` is agent ``j``'s ``(B, A^n)`` joint-action values. Returns
    the ``(n, B, A)`` policies after ``iters`` rounds.
    """
    n = len(q_full)
    B = q_full[0].shape[0]
    probs = np.full((n, B, n_actions), 1.0 / n_actions)
    if n == 2:
        # same recursion with the two marginalizations written as batched products
        q0 = q_full[0].reshape(B, n_actions, n_actions)
        q1t = q_full[1].reshape(B, n_actions, n_actions).transpose(0, 2, 1)
        p0, p1 = probs[0], probs[1]
        for _ in range(iters):
            p0, p1 = (boltzmann(np.einsum("bij,bj->bi", q0, p1), lam),
                      boltzmann(np.einsum("bij,bj->bi", q1t, p0), lam))
        return np.stack([p0, p1])
    for _ in range(iters):
        probs = np.stack([boltzmann(marginalize(q_full[j], probs, j), lam) for j in range(n)])
    return probs


def ma_critic_loss(critic: JointCritic, x_blocks: dict, probs: dict, expert_actions: np.ndarray,
                   done_r: Optional[np.ndarray], done_e: np.ndarray, gamma: float,
                   joints: np.ndarray, phi_kind: str = "pearson", mode: str = "online"):
    """Inverse soft-Q objective with a joint-action critic; returns ``(loss, grads)``.

    ``x_blocks`` holds encoded inputs under keys ``s_r``/``n_r`` (rollout
    states and successors, online) or ``s0`` (offline), plus ``s_e``/``n_e``
    for expert states and successors. ``probs`` holds the matching joint
    policies ``(n, B, A)``, treated as constants. ``V`` at each state is the
    soft value of the opponent-averaged critic.
    """
    i, lam = critic.agent, critic.lam
    use_target = critic.target is not None
    keys = (["s_r", "n_r"] if mode == "online" else ["s0"]) + ["s_e"] + ([] if use_target else ["n_e"])
    xs = np.concatenate([x_blocks[k] for k in keys], axis=0)
    q_all = critic.all_joint(xs, joints)
    sizes = np.cumsum([0] + [len(x_blocks[k]) for k in keys])
    sl = {k: slice(sizes[m], sizes[m + 1]) for m, k in enumerate(keys)}
    g_all = np.zeros_like(q_all)

    def value_and_grad_back(key, weight):
        # weight: (B,) multiplier on V; accumulates dL/dQ for the block
        q = q_all[sl[key]]
        qbar = marginalize(q, probs[key], i)
        v = soft_value_array(qbar, lam)
        dq_bar = weight[:, None] * soft_value_grad(qbar, lam)
        g_all[sl[key]] += _spread(dq_bar, probs[key], i)
        return v

    if mode == "online":
        n_r = len(x_blocks["s_r"])
        cont_r = gamma * (~done_r)
        v_s = value_and_grad_back("s_r", np.full(n_r, 1.0 / n_r))
        v_n = value_and_grad_back("n_r", -cont_r / n_r)
        value_term = float(np.mean(v_s - cont_r * v_n))
    else:
        n0 = len(x_blocks["s0"])
        v0 = value_and_grad_back("s0", np.full(n0, (1.0 - gamma) / n0))
        value_term = float((1.0 - gamma) * np.mean(v0))

    n_e = len(expert_actions)
    cols = np.array([joint_index(a, critic.head.n_actions) for a in expert_actions], dtype=np.int64)
    cont_e = gamma * (~done_e)
    q_e = q_all[sl["s_e"]][np.arange(n_e), cols]
    if use_target:
        q_next = critic.all_joint(x_blocks["n_e"], joints, target=True)
    else:
        q_next = q_all[sl["n_e"]]
    qbar_n = marginalize(q_next, probs["n_e"], i)
    v_e_next = soft_value_array(qbar_n, lam)
    r = q_e - cont_e * v_e_next
    loss = value_term - float(np.mean(phi(r, phi_kind)))
    dphi = phi_grad(r, phi_kind) / n_e
    g_all[sl["s_e"].start + np.arange(n_e), cols] -= dphi
    if not use_target:
        dq_bar = (dphi * cont_e)[:, None] * soft_value_grad(qbar_n, lam)
        g_all[sl["n_e"]] += _spread(dq_bar, probs["n_e"], i)
    if not np.isfinite(loss):
        raise NumericError("non-finite critic loss")
    return loss, critic.head.backward(g_all)


def _spread(dq_bar: np.ndarray, probs: np.ndarray, i: int) -> np.ndarray:
    """Pull a gradient on ``Qbar_i(s, a_i)`` back to ``Q_i(s, a)``: multiply by ``pi_-i(a_-i)``."""
    n, B, A = probs.shape
    out = dq_bar.reshape((B,) + tuple(A if k == i else 1 for k in range(n)))
    for j in range(n):
        if j != i:
            shape = [B] + [1] * n
            shape[j + 1] = A
            out = out * probs[j].reshape(shape)
    return np.broadcast_to(out, (B,) + (A,) * n).reshape(B, A**n)


class IqlMaTrainer(Trainer):
    algo = "iql-ma"

    def build_models(self) -> None:
        cfg, rng = self.cfg, self.init_rng
        tau = cfg.target_tau()
        n, A = self.n_agents, self.n_actions
        if A ** n > cfg.enumeration_cap:
            raise ValueError(f"joint action space {A ** n} exceeds the enumeration cap")
        self.joints = joint_table(n, A)
        self.critics: List[JointCritic] = []
        self.rewards: List[RewardModel] = []
        for i in range(n):
            head = JointHead.build(cfg.backend, self.encoder, n, A, cfg.hidden, cfg.depth, rng)
            self.critics.append(JointCritic(head, cfg.lam, i, cfg.alpha, tau))
        for i in range(n):
            head = JointHead.build(cfg.backend, self.encoder, n, A, cfg.hidden, cfg.depth, rng)
            self.rewards.append(RewardModel(head, i, cfg.reward_alpha or cfg.alpha))

    def _q_full(self, states, target=False) -> List[np.ndarray]:
        return [c.all_joint(self.encoder(states, c.agent), self.joints, target)
                for c in self.critics]

    def probs(self, states: Sequence) -> np.ndarray:
        return opponent_fixed_point(self._q_full(states), self.cfg.lam, self.n_actions,
                                    self.cfg.ma_policy_iters)

    def update_agent(self, i, expert, rollout):
        cfg = self.cfg
        critic, reward = self.critics[i], self.rewards[i]
        eb = make_batch(expert, self.encoder, i)
        rb = make_batch(rollout, self.encoder, i)
        state_sets = {"s_e": [t.state for t in expert],
                      "n_e": [t.state if t.done else t.next_state for t in expert]}
        x_blocks = {"s_e": eb.s, "n_e": eb.s_next}
        if cfg.loss_mode == "online":
            state_sets["s_r"] = [t.state for t in rollout]
            state_sets["n_r"] = [t.state if t.done else t.next_state for t in rollout]
            x_blocks["s_r"], x_blocks["n_r"] = rb.s, rb.s_next
        else:
            s0 = [self.env.reset(self.sample_rng) for _ in range(cfg.batch_size)]
            state_sets["s0"] = s0
            x_blocks["s0"] = self.encoder(s0, i)
        # one fixed-point solve over all state sets at once
        keys = list(state_sets)
        stacked = self.probs([st for k in keys for st in state_sets[k]])
        bounds = np.cumsum([0] + [len(state_sets[k]) for k in keys])
        probs = {k: stacked[:, bounds[m]:bounds[m + 1]] for m, k in enumerate(keys)}
        c_loss, grads = ma_critic_loss(critic, x_blocks, probs, eb.actions, rb.done, eb.done,
                                       self.gamma, self.joints, cfg.phi, cfg.loss_mode)
        critic.apply(grads)
        target = self.joint_reward_estimate(critic, rb, rollout)
        r_loss, rgrads = regress_reward(reward, rb.s, rb.actions[:, None, :], np.ones((len(rb), 1)),
                                        rb.actions, target, cfg.beta)
        reward.apply(rgrads)
        return [c_loss, r_loss]

    def joint_reward_estimate(self, critic: JointCritic, batch: Batch, rollout) -> np.ndarray:
        """``Q_i(s, a) - gamma V_i(s')`` at the sampled joint action; a regression target."""
        i = critic.agent
        cols = np.array([joint_index(a, self.n_actions) for a in batch.actions], dtype=np.int64)
        q_s = critic.all_joint(batch.s, self.joints)[np.arange(len(batch)), cols]
        nxt = [t.state if t.done else t.next_state for t in rollout]
        p_next = self.probs(nxt)
        q_next = critic.all_joint(batch.s_next, self.joints, target=True)
        v_next = soft_value_array(marginalize(q_next, p_next, i), critic.lam)
        return q_s - self.gamma * (~batch.done) * v_next

    def nets(self):
        out = {}
        for i, c in enumerate(self.critics):
            out[f"critic{i}"] = c.head.net
            if c.target is not None:
                out[f"critic{i}.target"] = c.target.net
        for i, r in enumerate(self.rewards):
            out[f"reward{i}"] = r.head.net
        return out

    def optimizers(self):
        out = {f"critic{i}": c.opt for i, c in enumerate(self.critics)}
        out.update({f"reward{i}": r.opt for i, r in enumerate(self.rewards)})
        return out

    def reward_predict(self, states, joint_actions, agent):
        return self.rewards[agent].predict(self.encoder(states, agent), joint_actions)


def iql_ma_train(env, expert, cfg: MamqlConfig, **kwargs) -> TrainResult:
    trainer = IqlMaTrainer(env, expert, cfg, **kwargs)
    records = trainer.run()
    return TrainResult(trainer.critics, trainer.rewards, records, trainer)


TRAINERS = {"mamql": MamqlTrainer, "iql-indep": IqlIndependentTrainer, "iql-ma": IqlMaTrainer}
