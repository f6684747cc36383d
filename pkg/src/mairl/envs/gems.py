"""Two-agent gem-collecting gridworld.

Agent 0 is Red and agent 1 is Blue. Each agent collects gems of its own color
by stepping onto them. Purple gems pay out to *both* agents, but only on a step
where both agents stand on alive purple gems (the same one or distinct ones).
Episodes last exactly ``horizon`` steps; gems never respawn.

Resolution order per step: both agents move simultaneously (off-grid moves
leave the agent in place, agents may share a cell), then same-color
collection, then the purple condition.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from ..markov_game import GameSpec, MarkovGame, TabularModel, TabularUnsupported, validate_joint

STOP, UP, DOWN, LEFT, RIGHT = range(5)
ACTION_NAMES = ("stop", "up", "down", "left", "right")
MOVES = np.array([(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)], dtype=np.int64)

RED, BLUE, PURPLE = 0, 1, 2
GEM_CHARS = {"R": RED, "B": BLUE, "P": PURPLE}

TABULAR_MAX_CELLS = 16
TABULAR_MAX_GEMS = 8


@dataclass
class GemsConfig:
    width: int = 5
    height: int = 5
    n_red: int = 2
    n_blue: int = 2
    n_purple: int = 2
    purple_reward: float = 6.0
    color_reward: float = 1.0
    horizon: int = 45
    gamma: float = 0.95
    seed: int = 0
    placement: str = "random"  # "random" | "fixed"
    layout: Optional[List[str]] = None

    def __post_init__(self):
        if self.layout is not None:
            self.layout = [row.replace(" ", "") for row in self.layout]
            self.placement = "fixed"
            self.height = len(self.layout)
            self.width = len(self.layout[0]) if self.layout else 0
            if any(len(row) != self.width for row in self.layout):
                raise ValueError("layout rows must all have the same width")
            text = "".join(self.layout)
            bad = set(text) - set(".RBP12")
            if bad:
                raise ValueError(f"unknown layout characters {sorted(bad)}")
            if text.count("1") != 1 or text.count("2") != 1:
                raise ValueError("layout needs exactly one '1' and one '2'")
            self.n_red, self.n_blue, self.n_purple = (text.count(c) for c in "RBP")
        if self.width < 1 or self.height < 1:
            raise ValueError("grid dimensions must be positive")
        if min(self.n_red, self.n_blue, self.n_purple) < 0:
            raise ValueError("gem counts must be non-negative")
        if self.n_gems + 2 > self.width * self.height:
            raise ValueError("too many gems for the grid")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")
        if self.placement not in ("random", "fixed"):
            raise ValueError(f"placement must be 'random' or 'fixed', got {self.placement!r}")

    @property
    def n_gems(self) -> int:
        return self.n_red + self.n_blue + self.n_purple

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        payload = json.dumps({"env": "gems", **self.to_dict()}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()


class GemsState(NamedTuple):
    pos: Tuple[Tuple[int, int], Tuple[int, int]]
    gems: Tuple[Tuple[int, int, int], ...]  # (kind, row, col), fixed within an episode
    alive: Tuple[bool, ...]
    step: int


def parse_layout(cfg: GemsConfig):
    starts = [None, None]
    gems = []
    for r, row in enumerate(cfg.layout):
        for c, ch in enumerate(row):
            if ch in "12":
                starts[int(ch) - 1] = (r, c)
            elif ch in GEM_CHARS:
                gems.append((GEM_CHARS[ch], r, c))
    gems.sort(key=lambda g: (g[0], g[1], g[2]))
    return tuple(starts), tuple(gems)


def random_placement(cfg: GemsConfig, rng: np.random.Generator):
    cells = rng.choice(cfg.width * cfg.height, size=2 + cfg.n_gems, replace=False)
    coords = [divmod(int(c), cfg.width) for c in cells]
    kinds = [RED] * cfg.n_red + [BLUE] * cfg.n_blue + [PURPLE] * cfg.n_purple
    gems = tuple(sorted((k, r, c) for k, (r, c) in zip(kinds, coords[2:])))
    return (coords[0], coords[1]), gems


def render_layout(starts, gems, width: int, height: int) -> List[str]:
    grid = [["."] * width for _ in range(height)]
    for kind, r, c in gems:
        grid[r][c] = "RBP"[kind]
    for k, (r, c) in enumerate(starts):
        grid[r][c] = str(k + 1)
    return ["".join(row) for row in grid]


def gems_step(state: GemsState, a: Sequence[int], cfg: GemsConfig):
    """Advance one step; returns ``(next_state, rewards, done)``."""
    a = validate_joint(a, 2, 5)
    if state.step >= cfg.horizon:
        raise ValueError("episode already finished")
    pos = []
    for (r, c), act in zip(state.pos, a):
        dr, dc = MOVES[act]
        nr, nc = r + int(dr), c + int(dc)
        if not (0 <= nr < cfg.height and 0 <= nc < cfg.width):
            nr, nc = r, c
        pos.append((nr, nc))
    alive = list(state.alive)
    rewards = np.zeros(2)
    for g, (kind, r, c) in enumerate(state.gems):
        if alive[g] and kind in (RED, BLUE) and pos[kind] == (r, c):
            alive[g] = False
            rewards[kind] += cfg.color_reward
    on_purple = [
        [g for g, (kind, r, c) in enumerate(state.gems) if alive[g] and kind == PURPLE and p == (r, c)]
        for p in pos
    ]
    if on_purple[0] and on_purple[1]:
        for g in set(on_purple[0]) | set(on_purple[1]):
            alive[g] = False
        rewards += cfg.purple_reward
    nxt = GemsState((pos[0], pos[1]), state.gems, tuple(alive), state.step + 1)
    return nxt, rewards, nxt.step == cfg.horizon


def gems_encode(state: GemsState, cfg: GemsConfig, perspective: int) -> np.ndarray:
    """Flattened 0/1 grid, channels: self, other, red, blue, purple."""
    cells = cfg.width * cfg.height
    x = np.zeros(5 * cells)
    me, other = state.pos[perspective], state.pos[1 - perspective]
    x[me[0] * cfg.width + me[1]] = 1.0
    x[cells + other[0] * cfg.width + other[1]] = 1.0
    for (kind, r, c), alive in zip(state.gems, state.alive):
        if alive:
            x[(2 + kind) * cells + r * cfg.width + c] = 1.0
    return x


class GemsEnv(MarkovGame):
    def __init__(self, cfg: Optional[GemsConfig] = None):
        self.cfg = cfg or GemsConfig()
        if self.cfg.placement == "fixed":
            if self.cfg.layout is None:
                starts, gems = random_placement(self.cfg, np.random.default_rng(self.cfg.seed))
                self.cfg.layout = render_layout(starts, gems, self.cfg.width, self.cfg.height)
            self.starts, self.gems = parse_layout(self.cfg)
        else:
            self.starts, self.gems = None, None
        self.spec = GameSpec(
            n_agents=2,
            action_count=5,
            gamma=self.cfg.gamma,
            horizon=self.cfg.horizon,
            state_space_size=self.n_states if self.is_tabular else None,
        )
        self._model = None

    # simulation -------------------------------------------------------------
    def reset(self, rng: np.random.Generator) -> GemsState:
        if self.cfg.placement == "fixed":
            starts, gems = self.starts, self.gems
        else:
            starts, gems = random_placement(self.cfg, rng)
        return GemsState(tuple(starts), gems, (True,) * len(gems), 0)

    def step(self, state, joint_action, rng=None):
        return gems_step(state, joint_action, self.cfg)

    def features(self, state: GemsState, agent: int) -> np.ndarray:
        # grid channels plus the fraction of the episode remaining
        x = gems_encode(state, self.cfg, agent)
        return np.append(x, (self.cfg.horizon - state.step) / self.cfg.horizon)

    @property
    def feature_size(self) -> int:
        return 5 * self.cfg.width * self.cfg.height + 1

    # tabular ----------------------------------------------------------------
    @property
    def is_tabular(self) -> bool:
        cfg = self.cfg
        return (
            cfg.placement == "fixed"
            and cfg.width * cfg.height <= TABULAR_MAX_CELLS
            and cfg.n_gems <= TABULAR_MAX_GEMS
        )

    def _require_tabular(self):
        if not self.is_tabular:
            raise TabularUnsupported(
                f"Gems {self.cfg.width}x{self.cfg.height} with {self.cfg.n_gems} gems "
                f"({self.cfg.placement} placement) exceeds the tabular limits"
            )

    @property
    def n_states(self) -> int:
        self._require_tabular()
        cells = self.cfg.width * self.cfg.height
        return cells * cells * (1 << self.cfg.n_gems) * self.cfg.horizon

    def state_id(self, state: GemsState) -> int:
        self._require_tabular()
        cfg = self.cfg
        cells = cfg.width * cfg.height
        mask = sum(1 << g for g, alive in enumerate(state.alive) if alive)
        c0 = state.pos[0][0] * cfg.width + state.pos[0][1]
        c1 = state.pos[1][0] * cfg.width + state.pos[1][1]
        return ((state.step * (1 << cfg.n_gems) + mask) * cells + c0) * cells + c1

    def state_from_id(self, sid: int) -> GemsState:
        self._require_tabular()
        cfg = self.cfg
        cells = cfg.width * cfg.height
        if not 0 <= sid < self.n_states:
            raise ValueError(f"state id {sid} out of range")
        rest, c1 = divmod(int(sid), cells)
        rest, c0 = divmod(rest, cells)
        step, mask = divmod(rest, 1 << cfg.n_gems)
        alive = tuple(bool(mask >> g & 1) for g in range(cfg.n_gems))
        return GemsState((divmod(c0, cfg.width), divmod(c1, cfg.width)), self.gems, alive, step)

    def tabular_model(self) -> TabularModel:
        self._require_tabular()
        if self._model is None:
            self._model = self._build_model()
        return self._model

    def _build_model(self) -> TabularModel:
        cfg = self.cfg
        cells = cfg.width * cfg.height
        G = cfg.n_gems
        n_base = cells * cells * (1 << G)
        base = np.arange(n_base)
        c1 = base % cells
        c0 = (base // cells) % cells
        mask = base // (cells * cells)

        def move(cell, act):
            r, c = cell // cfg.width, cell % cfg.width
            nr = np.clip(r + MOVES[act, 0], 0, cfg.height - 1)
            nc = np.clip(c + MOVES[act, 1], 0, cfg.width - 1)
            return nr * cfg.width + nc

        J = 25
        a0 = np.repeat(np.arange(5), 5)
        a1 = np.tile(np.arange(5), 5)
        n0 = move(c0[:, None], a0[None, :])  # (N, J)
        n1 = move(c1[:, None], a1[None, :])
        new_mask = np.broadcast_to(mask[:, None], (n_base, J)).copy()
        rewards = np.zeros((2, n_base, J))
        for g, (kind, r, c) in enumerate(self.gems):
            if kind == PURPLE:
                continue
            cell = r * cfg.width + c
            who = n0 if kind == RED else n1
            hit = (who == cell) & ((new_mask >> g) & 1).astype(bool)
            rewards[kind] += hit * cfg.color_reward
            new_mask = np.where(hit, new_mask & ~(1 << g), new_mask)
        on0 = np.zeros((n_base, J), dtype=bool)
        on1 = np.zeros((n_base, J), dtype=bool)
        for g, (kind, r, c) in enumerate(self.gems):
            if kind != PURPLE:
                continue
            cell = r * cfg.width + c
            alive = ((new_mask >> g) & 1).astype(bool)
            on0 |= alive & (n0 == cell)
            on1 |= alive & (n1 == cell)
        trigger = on0 & on1
        rewards += trigger * cfg.purple_reward
        for g, (kind, r, c) in enumerate(self.gems):
            if kind != PURPLE:
                continue
            cell = r * cfg.width + c
            consumed = trigger & ((n0 == cell) | (n1 == cell))
            new_mask = np.where(consumed, new_mask & ~(1 << g), new_mask)
        next_base = (new_mask * cells + n0) * cells + n1

        H = cfg.horizon
        steps = np.arange(H)
        next_states = (np.minimum(steps + 1, H - 1)[:, None, None] * n_base + next_base[None]).reshape(H * n_base, J, 1)
        done = np.broadcast_to((steps == H - 1)[:, None, None], (H, n_base, J)).reshape(H * n_base, J)
        initial = np.zeros(H * n_base)
        initial[self.state_id(self.reset(np.random.default_rng(0)))] = 1.0
        return TabularModel(
            n_agents=2,
            action_count=5,
            gamma=cfg.gamma,
            rewards=np.tile(rewards, (1, H, 1)),
            next_states=next_states,
            next_probs=np.ones_like(next_states, dtype=np.float64),
            done=done.copy(),
            initial=initial,
        )

    # serialization ----------------------------------------------------------
    def state_to_list(self, state: GemsState) -> list:
        out = [state.pos[0][0], state.pos[0][1], state.pos[1][0], state.pos[1][1], state.step]
        out += [int(a) for a in state.alive]
        for g in state.gems:
            out += list(g)
        return out

    def state_from_list(self, values: Sequence[int]) -> GemsState:
        v = [int(x) for x in values]
        G = self.cfg.n_gems
        if len(v) != 5 + 4 * G:
            raise ValueError(f"expected {5 + 4 * G} integers for a Gems state, got {len(v)}")
        alive = tuple(bool(x) for x in v[5 : 5 + G])
        flat = v[5 + G :]
        gems = tuple(tuple(flat[3 * g : 3 * g + 3]) for g in range(G))
        return GemsState(((v[0], v[1]), (v[2], v[3])), gems, alive, v[4])

    def config_dict(self) -> dict:
        return {"type": "gems", **self.cfg.to_dict()}

    def digest(self) -> str:
        return self.cfg.digest()

    def render(self, state: GemsState) -> str:
        alive_gems = [g for g, a in zip(state.gems, state.alive) if a]
        return "\n".join(render_layout(state.pos, alive_gems, self.cfg.width, self.cfg.height))
