"""Evaluation: episodic returns, reward-recovery error, behavioural error, convergence.

A *policy bundle* is any object with ``probs(states) -> (n_agents, B, A)``;
trainers, :class:`TablePolicy` and :class:`UniformPolicy` all qualify.

Metrics CSV columns, in order::

    episode, env_steps, seed, total_return, total_return_stderr,
    return_<i>..., return_ratio, reward_mse_<i>..., nll_<i>..., tv_<i>..., wall_clock

``return_<i>`` is agent i's mean undiscounted episode return, ``total_return``
the mean of the summed return G over agents, ``return_ratio`` is
``return_0 / return_1`` for two-agent games, ``reward_mse_<i>`` the squared
error of the learned reward on the evaluation rollouts, ``nll_<i>`` the mean
negative log-likelihood of the dataset's actions and ``tv_<i>`` the mean
total-variation distance to the analytic expert policy on dataset states.
Empty cells mean "not available".
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .markov_game import MarkovGame, Transition


@dataclass
class RunRecord:
    episode: int
    env_steps: int
    seed: int
    total_return: float
    total_return_stderr: float
    returns: List[float]
    return_ratio: Optional[float]
    reward_mse: Optional[List[float]]
    nll: List[float]
    tv: Optional[List[float]]
    wall_clock: float = 0.0

    def metric_key(self) -> dict:
        """All fields except wall-clock time; equal across identically seeded runs."""
        d = asdict(self)
        d.pop("wall_clock")
        return d


# --- policy bundles --------------------------------------------------------------

class TablePolicy:
    """Joint policy given as a ``(n, n_states, A)`` table indexed by ``env.state_id``."""

    def __init__(self, env: MarkovGame, probs: np.ndarray):
        self.env = env
        self.table = np.asarray(probs, dtype=np.float64)

    def probs(self, states: Sequence) -> np.ndarray:
        ids = np.fromiter((self.env.state_id(s) for s in states), dtype=np.int64, count=len(states))
        return self.table[:, ids]


class UniformPolicy:
    def __init__(self, n_agents: int, n_actions: int):
        self.n_agents, self.n_actions = n_agents, n_actions

    def probs(self, states: Sequence) -> np.ndarray:
        return np.full((self.n_agents, len(states), self.n_actions), 1.0 / self.n_actions)


def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw from ``(n, B, A)`` rows; returns ``(n, B)`` action ids."""
    return sample_with_uniforms(probs, rng.random(probs.shape[:2]))


def sample_with_uniforms(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    return np.minimum((cdf < u[..., None]).sum(axis=-1), probs.shape[-1] - 1)


# --- returns -------------------------------------------------------------------------

def episodic_return(trajectory: Sequence[Transition]) -> float:
    """Undiscounted return summed over steps and agents."""
    total = 0.0
    for t in trajectory:
        if t.true_rewards is None:
            raise ValueError("trajectory lacks true rewards")
        total += float(sum(t.true_rewards))
    return total


def rollout_episodes(bundle, env: MarkovGame, n_episodes: int, seed=0) -> List[List[Transition]]:
    """Roll out ``n_episodes`` episodes in lockstep.

    Episode ``k`` draws all its randomness from ``default_rng([*seed, k])``,
    so results do not depend on how episodes are batched.
    """
    base = list(seed) if isinstance(seed, (tuple, list)) else [int(seed)]
    rngs = [np.random.default_rng(base + [k]) for k in range(n_episodes)]
    states = [env.reset(r) for r in rngs]
    trajs: List[List[Transition]] = [[] for _ in range(n_episodes)]
    active = list(range(n_episodes))
    n = env.spec.n_agents
    while active:
        p = bundle.probs([states[k] for k in active])
        u = np.stack([rngs[k].random(n) for k in active], axis=1)
        acts = sample_with_uniforms(p, u)
        still = []
        for col, k in enumerate(active):
            a = tuple(int(x) for x in acts[:, col])
            nxt, rewards, done = env.step(states[k], a, rngs[k])
            trajs[k].append(Transition(states[k], a, nxt, bool(done),
                                       tuple(float(r) for r in rewards), k, len(trajs[k])))
            if done:
                continue
            if env.spec.horizon is None and len(trajs[k]) >= 10_000:
                raise RuntimeError("episode did not terminate")
            states[k] = nxt
            still.append(k)
        active = still
    return trajs


def return_stats(trajectories: Sequence[Sequence[Transition]], n_agents: int) -> dict:
    per_agent = np.array([[sum(t.true_rewards[i] for t in tr) for i in range(n_agents)]
                          for tr in trajectories], dtype=np.float64).reshape(len(trajectories), n_agents)
    totals = per_agent.sum(axis=1)
    m = len(trajectories)

    def se(x):
        return float(np.std(x, ddof=1) / math.sqrt(m)) if m > 1 else 0.0

    means = per_agent.mean(axis=0) if m else np.zeros(n_agents)
    ratio = None
    if n_agents == 2 and means[1] != 0:
        ratio = float(means[0] / means[1])
    return {
        "returns": [float(x) for x in means],
        "return_stderr": [se(per_agent[:, i]) for i in range(n_agents)],
        "total_return": float(totals.mean()) if m else 0.0,
        "total_return_stderr": se(totals),
        "return_ratio": ratio,
    }


def average_return(bundle, env: MarkovGame, n_episodes: int = 1000, seed=0) -> dict:
    """Per-agent mean returns with standard errors, summed return G and the agent ratio."""
    return return_stats(rollout_episodes(bundle, env, n_episodes, seed), env.spec.n_agents)


# --- reward recovery ---------------------------------------------------------------

def reward_recovery_mse(reward_fn: Callable, env: MarkovGame = None, bundle=None,
                        n_samples: int = 1000, seed=0,
                        transitions: Optional[Sequence[Transition]] = None) -> List[float]:
    """Per-agent mean squared error between predicted and true rewards.

    ``reward_fn(states, joint_actions, agent)`` returns predictions. Samples
    come from ``transitions`` if given, otherwise from rollouts of ``bundle``
    until ``n_samples`` transitions are collected.
    """
    if transitions is None:
        horizon = env.spec.horizon or 1
        n_eps = max(1, -(-n_samples // horizon))
        transitions = [t for tr in rollout_episodes(bundle, env, n_eps, seed) for t in tr][:n_samples]
    if not transitions:
        raise ValueError("no transitions to evaluate")
    states = [t.state for t in transitions]
    joints = np.array([t.joint_action for t in transitions], dtype=np.int64)
    truth = np.array([t.true_rewards for t in transitions], dtype=np.float64)
    return [float(np.mean((reward_fn(states, joints, i) - truth[:, i]) ** 2))
            for i in range(truth.shape[1])]


# --- behavioural error ------------------------------------------------------------

def behavioral_error(bundle, dataset: Sequence[Transition], expert_policy=None) -> dict:
    """Expert-action NLL per agent and, given the analytic expert, mean TV distance.

    Both are averaged over the dataset's transitions, so states are weighted
    by how often the expert visits them.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    states = [t.state for t in dataset]
    acts = np.array([t.joint_action for t in dataset], dtype=np.int64)
    p = bundle.probs(states)
    n, B, _ = p.shape
    chosen = p[np.arange(n)[:, None], np.arange(B)[None, :], acts.T]
    nll = -np.log(np.maximum(chosen, 1e-300)).mean(axis=1)
    out = {"nll": [float(x) for x in nll], "tv": None}
    if expert_policy is not None:
        q = expert_policy.probs(states)
        out["tv"] = [float(x) for x in 0.5 * np.abs(p - q).sum(axis=-1).mean(axis=1)]
    return out


def evaluate_bundle(bundle, env: MarkovGame, dataset: Sequence[Transition], n_episodes: int,
                    seed=0, expert_policy=None, reward_fn: Optional[Callable] = None) -> dict:
    """Returns, reward MSE (on the evaluation rollouts) and behavioural error in one pass."""
    trajs = rollout_episodes(bundle, env, n_episodes, seed) if n_episodes > 0 else []
    out = return_stats(trajs, env.spec.n_agents) if trajs else {
        "returns": [0.0] * env.spec.n_agents, "return_stderr": [0.0] * env.spec.n_agents,
        "total_return": 0.0, "total_return_stderr": 0.0, "return_ratio": None,
    }
    out["reward_mse"] = None
    if reward_fn is not None and trajs:
        out["reward_mse"] = reward_recovery_mse(reward_fn, transitions=[t for tr in trajs for t in tr])
    out.update(behavioral_error(bundle, dataset, expert_policy))
    return out


# --- convergence --------------------------------------------------------------------

def episodes_to_convergence(records: Sequence[RunRecord], expert_return: float,
                            window: int = 50, threshold_fraction: float = 0.85) -> Optional[int]:
    """First episode from which the trailing-window mean return stays at or above target.

    The window counts evaluations; early points average over what is
    available. Returns ``None`` if the level is never held to the end.
    """
    if not records:
        return None
    target = threshold_fraction * expert_return
    vals = np.array([r.total_return for r in records])
    csum = np.concatenate([[0.0], np.cumsum(vals)])
    ok = []
    for k in range(len(vals)):
        lo = max(0, k + 1 - window)
        ok.append((csum[k + 1] - csum[lo]) / (k + 1 - lo) >= target)
    if not ok[-1]:
        return None
    k = len(ok) - 1
    while k > 0 and ok[k - 1]:
        k -= 1
    return records[k].episode


# --- persistence ---------------------------------------------------------------------

def csv_columns(n_agents: int) -> List[str]:
    cols = ["episode", "env_steps", "seed", "total_return", "total_return_stderr"]
    cols += [f"return_{i}" for i in range(n_agents)] + ["return_ratio"]
    cols += [f"reward_mse_{i}" for i in range(n_agents)]
    cols += [f"nll_{i}" for i in range(n_agents)]
    cols += [f"tv_{i}" for i in range(n_agents)] + ["wall_clock"]
    return cols


def _cells(values, n):
    return [repr(float(x)) for x in values] if values is not None else [""] * n


def record_row(r: RunRecord, n_agents: int) -> list:
    row = [r.episode, r.env_steps, r.seed, repr(r.total_return), repr(r.total_return_stderr)]
    row += _cells(r.returns, n_agents) + ["" if r.return_ratio is None else repr(r.return_ratio)]
    row += _cells(r.reward_mse, n_agents) + _cells(r.nll, n_agents) + _cells(r.tv, n_agents)
    row += [f"{r.wall_clock:.3f}"]
    return row


def write_records_csv(records: Sequence[RunRecord], path, n_agents: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(csv_columns(n_agents))
        for r in records:
            w.writerow(record_row(r, n_agents))


def read_records_csv(path) -> List[RunRecord]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        n = sum(1 for c in reader.fieldnames or [] if c.startswith("return_") and c[7:].isdigit())
        for row in reader:
            def vec(prefix):
                vals = [row[f"{prefix}_{i}"] for i in range(n)]
                return None if any(v == "" for v in vals) else [float(v) for v in vals]

            out.append(RunRecord(
                episode=int(row["episode"]), env_steps=int(row["env_steps"]), seed=int(row["seed"]),
                total_return=float(row["total_return"]),
                total_return_stderr=float(row["total_return_stderr"]),
                returns=vec("return"),
                return_ratio=None if row["return_ratio"] == "" else float(row["return_ratio"]),
                reward_mse=vec("reward_mse"), nll=vec("nll"), tv=vec("tv"),
                wall_clock=float(row["wall_clock"]),
            ))
    return out


def plot_records(runs: Dict[str, Sequence[RunRecord]], out_dir) -> List[Path]:
    """Three SVG line charts: return vs episodes, reward MSE vs env steps, NLL vs env steps."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    specs = [
        ("return.svg", "episode", lambda r: r.total_return, "episodes", "summed return G"),
        ("reward_mse.svg", "env_steps", lambda r: None if r.reward_mse is None else float(np.mean(r.reward_mse)),
         "environment steps", "reward MSE (mean over agents)"),
        ("behavioral_error.svg", "env_steps", lambda r: float(np.mean(r.nll)),
         "environment steps", "expert-action NLL (mean over agents)"),
    ]
    paths = []
    plt.rcParams["svg.hashsalt"] = "mairl"
    for fname, xkey, yfn, xlabel, ylabel in specs:
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, recs in runs.items():
            pts = [(getattr(r, xkey), yfn(r)) for r in recs if yfn(r) is not None]
            if pts:
                xs, ys = zip(*pts)
                ax.plot(xs, ys, label=label)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if runs:
            ax.legend()
        fig.tight_layout()
        path = out_dir / fname
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        paths.append(path)
    return paths
