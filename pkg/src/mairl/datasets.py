"""Expert-dataset files, the rollout replay buffer, and dataset down-scaling.

File format (line-delimited JSON, UTF-8):

* line 1: ``{"manifest": {...}}``
* every further line is one transition::

    {"episode": 0, "step": 3, "state": [...], "action": [2, 0],
     "next_state": [...], "done": false, "reward": [1.0, 0.0]}

States are the environment's integer-vector encoding (``state_to_list``).
Floats are written with ``repr`` precision, so a read after a write is
bit-exact.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .markov_game import MarkovGame, Transition

SCHEMA_VERSION = 1


class DatasetParseError(ValueError):
    def __init__(self, path, lineno: int, reason: str):
        super().__init__(f"{path}:{lineno}: {reason}")
        self.lineno = lineno


class ManifestMismatch(ValueError):
    """Dataset was produced for a different environment configuration."""


class BufferNotReady(RuntimeError):
    """Fewer stored transitions than the requested batch size."""


@dataclass
class DatasetManifest:
    env_hash: str
    solver_seed: Optional[int]
    n_transitions: int
    schema_version: int = SCHEMA_VERSION
    metadata: dict = field(default_factory=dict)

    def check_env(self, env: MarkovGame) -> None:
        if self.env_hash != env.digest():
            raise ManifestMismatch(
                f"dataset was generated for env {self.env_hash[:12]}, "
                f"but training env is {env.digest()[:12]}"
            )


def transition_to_record(t: Transition, env: MarkovGame) -> dict:
    return {
        "episode": int(t.episode),
        "step": int(t.step),
        "state": env.state_to_list(t.state),
        "action": [int(a) for a in t.joint_action],
        "next_state": env.state_to_list(t.next_state),
        "done": bool(t.done),
        "reward": None if t.true_rewards is None else [float(r) for r in t.true_rewards],
    }


def record_to_transition(rec: dict, env: MarkovGame) -> Transition:
    rewards = rec["reward"]
    return Transition(
        state=env.state_from_list(rec["state"]),
        joint_action=tuple(int(a) for a in rec["action"]),
        next_state=env.state_from_list(rec["next_state"]),
        done=bool(rec["done"]),
        true_rewards=None if rewards is None else tuple(float(r) for r in rewards),
        episode=int(rec["episode"]),
        step=int(rec["step"]),
    )


def write_dataset(path, transitions: Sequence[Transition], manifest: DatasetManifest,
                  env: MarkovGame) -> None:
    path = Path(path)
    manifest.n_transitions = len(transitions)
    lines = [json.dumps({"manifest": asdict(manifest)}, sort_keys=True)]
    lines += [json.dumps(transition_to_record(t, env)) for t in transitions]
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tmp.replace(path)


def read_dataset(path, env: MarkovGame, check_env: bool = True
                 ) -> Tuple[List[Transition], DatasetManifest]:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetParseError(path, 1, "missing manifest line")
    try:
        manifest = DatasetManifest(**json.loads(lines[0])["manifest"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetParseError(path, 1, f"bad manifest: {exc}") from None
    if manifest.schema_version != SCHEMA_VERSION:
        raise DatasetParseError(path, 1, f"unsupported schema version {manifest.schema_version}")
    if check_env:
        manifest.check_env(env)
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            out.append(record_to_transition(json.loads(line), env))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetParseError(path, lineno, f"bad transition record: {exc}") from None
    if len(out) != manifest.n_transitions:
        raise DatasetParseError(
            path, len(lines) + 1,
            f"expected {manifest.n_transitions} transitions, found {len(out)} (truncated file?)",
        )
    return out, manifest


def split_episodes(transitions: Sequence[Transition]) -> List[List[Transition]]:
    episodes: List[List[Transition]] = []
    current: List[Transition] = []
    for t in transitions:
        if current and t.episode != current[-1].episode:
            episodes.append(current)
            current = []
        current.append(t)
        if t.done:
            episodes.append(current)
            current = []
    if current:
        episodes.append(current)
    return episodes


def subsample(transitions: Sequence[Transition], n_steps: int, seed: int) -> List[Transition]:
    """Keep randomly chosen whole episodes until at least ``n_steps`` transitions remain."""
    if n_steps > len(transitions):
        raise ValueError(f"cannot keep {n_steps} of {len(transitions)} transitions")
    if n_steps <= 0:
        return []
    if n_steps == len(transitions):
        return list(transitions)
    episodes = split_episodes(transitions)
    order = np.random.default_rng(seed).permutation(len(episodes))
    chosen, total = [], 0
    for k in order:
        chosen.append(int(k))
        total += len(episodes[k])
        if total >= n_steps:
            break
    return [t for k in sorted(chosen) for t in episodes[k]]


class ReplayBuffer:
    """FIFO ring buffer; batches are drawn uniformly without replacement."""

    def __init__(self, capacity: int, rng: Optional[np.random.Generator] = None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._items: List[Transition] = []
        self._head = 0  # index of the oldest item once full

    def __len__(self) -> int:
        return len(self._items)

    def push(self, t: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(t)
        else:
            self._items[self._head] = t
            self._head = (self._head + 1) % self.capacity

    def extend(self, ts: Iterable[Transition]) -> None:
        for t in ts:
            self.push(t)

    def items(self) -> List[Transition]:
        """Contents from oldest to newest."""
        return self._items[self._head:] + self._items[: self._head]

    def sample(self, batch_size: int) -> List[Transition]:
        if batch_size > len(self._items):
            raise BufferNotReady(f"buffer holds {len(self._items)} < batch size {batch_size}")
        idx = self.rng.choice(len(self._items), size=batch_size, replace=False)
        return [self._items[k] for k in idx]

    def digest(self, env: MarkovGame) -> str:
        h = hashlib.sha256()
        for t in self.items():
            h.update(json.dumps(transition_to_record(t, env)).encode())
            h.update(b"\n")
        return h.hexdigest()

    def raw_state(self) -> Tuple[List[Transition], int]:
        """Internal storage order and head index (for exact checkpoint restore)."""
        return list(self._items), self._head

    def load_raw_state(self, items: Sequence[Transition], head: int) -> None:
        if len(items) > self.capacity or not 0 <= head < max(len(items), 1):
            raise ValueError("inconsistent buffer state")
        self._items = list(items)
        self._head = int(head)
