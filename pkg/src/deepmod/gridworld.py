"""Deterministic Frozen-Lake-style gridworld.

States are integer indices laid out row-major; the default 4x4 layout labels
them A..P::

    A B C D        S . . .
    E F G H        . H . H
    I J K L        . . . H
    M N O P        H . . G

Two reward conventions are provided. ``DP_ARRIVAL`` pays only for the cell
entered (+10 goal, -10 hole) and drives every value target. ``EPISODE_EVAL``
adds a -1 step penalty and is used for reported episode rewards. Holes
penalise but do not end the episode; only the goal is terminal.
"""
from __future__ import annotations

import string
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Callable, FrozenSet, Iterator

import numpy as np


class Action(IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3


ACTIONS = tuple(Action)

_MOVES = {
    Action.UP: (-1, 0),
    Action.DOWN: (1, 0),
    Action.LEFT: (0, -1),
    Action.RIGHT: (0, 1),
}


class GridError(ValueError):
    """Invalid grid layout or illegal transition request."""


@dataclass(frozen=True)
class GridSpec:
    width: int = 4
    height: int = 4
    start: int = 0
    goal: int = 15
    holes: FrozenSet[int] = field(default_factory=lambda: frozenset({5, 7, 11, 12}))

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise GridError("grid dimensions must be positive")
        object.__setattr__(self, "holes", frozenset(int(h) for h in self.holes))
        n = self.n_states
        for s in (self.start, self.goal, *self.holes):
            if not 0 <= s < n:
                raise GridError(f"state {s} outside grid of {n} cells")
        if self.goal in self.holes:
            raise GridError("goal cannot be a hole")
        if self.start in self.holes:
            raise GridError("start cannot be a hole")
        if self.start == self.goal:
            raise GridError("start and goal must differ")

    @property
    def n_states(self) -> int:
        return self.width * self.height

    @property
    def states(self) -> range:
        return range(self.n_states)

    @property
    def nonterminal_states(self) -> list[int]:
        return [s for s in self.states if s != self.goal]

    def row_col(self, s: int) -> tuple[int, int]:
        self.check_state(s)
        return divmod(s, self.width)

    def index(self, row: int, col: int) -> int:
        if not (0 <= row < self.height and 0 <= col < self.width):
            raise GridError(f"cell ({row}, {col}) outside grid")
        return row * self.width + col

    def check_state(self, s: int) -> None:
        if not 0 <= int(s) < self.n_states:
            raise GridError(f"state {s} outside grid of {self.n_states} cells")

    def label(self, s: int) -> str:
        """Letter label (A, B, ...) for grids up to 26 cells, else the index."""
        self.check_state(s)
        if self.n_states <= 26:
            return string.ascii_uppercase[s]
        return str(s)

    def state_of(self, label: str) -> int:
        if self.n_states <= 26 and label in string.ascii_uppercase[: self.n_states]:
            return string.ascii_uppercase.index(label)
        s = int(label)
        self.check_state(s)
        return s

    def render(self) -> str:
        rows = []
        for r in range(self.height):
            line = []
            for c in range(self.width):
                s = self.index(r, c)
                if s == self.start:
                    line.append("S")
                elif s == self.goal:
                    line.append("G")
                elif s in self.holes:
                    line.append("H")
                else:
                    line.append(".")
            rows.append("".join(line))
        return "\n".join(rows) + "\n"


FROZEN_LAKE = GridSpec()


def parse_map(text: str) -> GridSpec:
    """Build a GridSpec from a text map (S start, G goal, H hole, . free)."""
    rows = [line.strip() for line in text.splitlines() if line.strip()]
    if not rows:
        raise GridError("empty map")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise GridError("ragged map rows")
    start = goal = None
    holes = set()
    for r, line in enumerate(rows):
        for c, ch in enumerate(line):
            s = r * width + c
            if ch == "S":
                if start is not None:
                    raise GridError("multiple start cells")
                start = s
            elif ch == "G":
                if goal is not None:
                    raise GridError("multiple goal cells")
                goal = s
            elif ch == "H":
                holes.add(s)
            elif ch != ".":
                raise GridError(f"unknown map character {ch!r}")
    if start is None or goal is None:
        raise GridError("map needs exactly one S and one G")
    return GridSpec(width, len(rows), start, goal, frozenset(holes))


def load_map(path: str | Path) -> GridSpec:
    return parse_map(Path(path).read_text())


class RewardVariant(IntEnum):
    DP_ARRIVAL = 0
    EPISODE_EVAL = 1


@dataclass(frozen=True)
class RewardModel:
    variant: RewardVariant
    goal_reward: float = 10.0
    hole_penalty: float = -10.0
    step_penalty: float = 0.0

    def arrival(self, spec: GridSpec, s_next: int) -> float:
        """Reward for entering ``s_next`` (excludes the step penalty)."""
        if s_next == spec.goal:
            return self.goal_reward
        if s_next in spec.holes:
            return self.hole_penalty
        return 0.0

    def reward(self, spec: GridSpec, s_next: int) -> float:
        r = self.arrival(spec, s_next)
        if self.variant == RewardVariant.EPISODE_EVAL:
            r += self.step_penalty
        return r


DP_ARRIVAL = RewardModel(RewardVariant.DP_ARRIVAL)
EPISODE_EVAL = RewardModel(RewardVariant.EPISODE_EVAL, step_penalty=-1.0)


@dataclass(frozen=True)
class TransitionOutcome:
    next: int
    reward: float
    terminal: bool


def successor(spec: GridSpec, s: int, a: int) -> int:
    """Cell reached by moving ``a`` from ``s``; off-grid moves stay put."""
    row, col = spec.row_col(s)
    dr, dc = _MOVES[Action(a)]
    r2, c2 = row + dr, col + dc
    if 0 <= r2 < spec.height and 0 <= c2 < spec.width:
        return r2 * spec.width + c2
    return s


def step(spec: GridSpec, model: RewardModel, s: int, a: int) -> TransitionOutcome:
    if s == spec.goal:
        raise GridError("no transitions leave the goal state")
    s2 = successor(spec, s, a)
    return TransitionOutcome(s2, model.reward(spec, s2), s2 == spec.goal)


def transitions(spec: GridSpec) -> Iterator[tuple[int, Action, int]]:
    """Every non-terminal (s, a, s') triple, in state then action order."""
    for s in spec.nonterminal_states:
        for a in ACTIONS:
            yield s, a, successor(spec, s, a)


def encode_one_hot(spec: GridSpec, s: int) -> np.ndarray:
    spec.check_state(s)
    x = np.zeros(spec.n_states)
    x[s] = 1.0
    return x


@dataclass(frozen=True)
class EpisodeResult:
    total_reward: float
    steps: int
    reached_goal: bool
    path: tuple[int, ...] = ()


def run_episode(
    spec: GridSpec,
    model: RewardModel,
    policy: Callable[[int], int],
    max_steps: int = 100,
    budget_floor: float = -100.0,
) -> EpisodeResult:
    """Roll out ``policy`` from the start cell.

    Stops on the goal, after ``max_steps`` moves, or once the running reward
    falls to ``budget_floor`` (the total is clamped there).
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    s = spec.start
    total = 0.0
    path = [s]
    steps = 0
    reached = False
    while steps < max_steps:
        out = step(spec, model, s, policy(s))
        total += out.reward
        steps += 1
        s = out.next
        path.append(s)
        if out.terminal:
            reached = True
            break
        if total <= budget_floor:
            break
    return EpisodeResult(max(total, budget_floor), steps, reached, tuple(path))
