"""Tabular value iteration, greedy policy extraction and Q-learning.

Values follow the arrival convention: a state's value includes the reward for
entering it, so ``V(s) = arrival(s) + gamma * max_a V(next(s, a))`` with the
goal pinned to its reward. Under this convention ``Q(s, a) == V(next(s, a))``
at convergence, which is what lets state values be read back out of a Q-table
by looking at the pair that leads into each state.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .gridworld import ACTIONS, DP_ARRIVAL, Action, GridSpec, RewardModel, step, successor

TIE_TOL = 1e-9


class ConvergenceError(RuntimeError):
    def __init__(self, msg: str, residual: float, sweeps: int):
        super().__init__(f"{msg} (residual={residual:.3g} after {sweeps} sweeps)")
        self.residual = residual
        self.sweeps = sweeps


class UndefinedValueError(LookupError):
    """A state's value was requested but the table has no entry for it."""


@dataclass
class ValueTable:
    spec: GridSpec
    v: np.ndarray
    sweeps: int = 0
    residual: float = 0.0
    defined: np.ndarray | None = None
    deltas: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float)
        if self.v.shape != (self.spec.n_states,):
            raise ValueError("value table must cover every state")
        if self.defined is None:
            self.defined = np.ones(self.spec.n_states, dtype=bool)

    def __getitem__(self, s: int) -> float:
        if not self.defined[s]:
            raise UndefinedValueError(f"state {self.spec.label(s)} has no predecessor")
        return float(self.v[s])

    def by_label(self) -> dict[str, float]:
        return {self.spec.label(s): float(self.v[s]) for s in self.spec.states}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["state_label", "value"])
        for s in self.spec.states:
            w.writerow([self.spec.label(s), repr(float(self.v[s])) if self.defined[s] else ""])
        return buf.getvalue()


@dataclass
class QTable:
    spec: GridSpec
    q: np.ndarray
    visits: np.ndarray | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["state_label", "action", "q"])
        for s in self.spec.nonterminal_states:
            for a in ACTIONS:
                w.writerow([self.spec.label(s), a.name, repr(float(self.q[s, a]))])
        return buf.getvalue()


@dataclass
class Policy:
    choice: dict[int, Action]

    def __call__(self, s: int) -> Action:
        return self.choice[s]


@dataclass
class QLearningConfig:
    alpha: float = 0.9
    gamma: float = 0.9
    episodes: int = 5000
    epsilon0: float = 0.9
    epsilon_decay: float = 0.99
    max_steps: int = 100
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0 < self.epsilon0 <= 1 or not 0 < self.epsilon_decay <= 1:
            raise ValueError("epsilon0 and epsilon_decay must lie in (0, 1]")
        if self.episodes < 0:
            raise ValueError("episodes must be non-negative")


def argmax_first(scores) -> int:
    """Index of the maximum; near-ties go to the lowest index."""
    scores = np.asarray(scores, dtype=float)
    best = scores.max()
    return int(np.flatnonzero(scores >= best - TIE_TOL)[0])


def successor_table(spec: GridSpec) -> np.ndarray:
    """(n_states, 4) array of successor indices; the goal row maps to itself."""
    nxt = np.empty((spec.n_states, len(ACTIONS)), dtype=int)
    for s in spec.states:
        for a in ACTIONS:
            nxt[s, a] = s if s == spec.goal else successor(spec, s, a)
    return nxt


def arrival_rewards(spec: GridSpec, model: RewardModel = DP_ARRIVAL) -> np.ndarray:
    return np.array([model.arrival(spec, s) for s in spec.states])


def bellman_backup(spec: GridSpec, model: RewardModel, v: np.ndarray, gamma: float) -> np.ndarray:
    """One synchronous backup of the arrival-convention value recurrence."""
    nxt = successor_table(spec)
    out = arrival_rewards(spec, model) + gamma * v[nxt].max(axis=1)
    out[spec.goal] = model.goal_reward
    return out


def value_iteration(
    spec: GridSpec,
    model: RewardModel = DP_ARRIVAL,
    gamma: float = 0.9,
    tolerance: float = 1e-6,
    max_sweeps: int = 10_000,
) -> ValueTable:
    if not 0 <= gamma < 1:
        raise ValueError("gamma must lie in [0, 1)")
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    nxt = successor_table(spec)
    r = arrival_rewards(spec, model)
    v = np.zeros(spec.n_states)
    v[spec.goal] = model.goal_reward
    deltas = []
    for sweep in range(1, max_sweeps + 1):
        new = r + gamma * v[nxt].max(axis=1)
        new[spec.goal] = model.goal_reward
        delta = float(np.abs(new - v).max())
        deltas.append(delta)
        v = new
        if delta < tolerance:
            return ValueTable(spec, v, sweeps=sweep, residual=delta, deltas=deltas)
    raise ConvergenceError("value iteration did not converge", deltas[-1], max_sweeps)


def lookahead_scores(spec: GridSpec, model: RewardModel, v, s: int, gamma: float) -> np.ndarray:
    """``r + gamma * V(s')`` for each action from ``s``."""
    out = np.empty(len(ACTIONS))
    for a in ACTIONS:
        o = step(spec, model, s, a)
        out[a] = o.reward + gamma * float(v[o.next])
    return out


def greedy_policy(spec: GridSpec, model: RewardModel, values, gamma: float = 0.9) -> Policy:
    v = values.v if isinstance(values, ValueTable) else np.asarray(values, dtype=float)
    return Policy(
        {s: Action(argmax_first(lookahead_scores(spec, model, v, s, gamma))) for s in spec.nonterminal_states}
    )


def epsilon_at(epsilon0: float, decay: float, episode: int) -> float:
    return epsilon0 * decay**episode


def q_learning(spec: GridSpec, model: RewardModel = DP_ARRIVAL, config: QLearningConfig | None = None) -> QTable:
    config = config or QLearningConfig()
    rng = np.random.default_rng(config.rng_seed)
    n_a = len(ACTIONS)
    q = np.zeros((spec.n_states, n_a))
    visits = np.zeros((spec.n_states, n_a), dtype=int)
    for ep in range(config.episodes):
        eps = epsilon_at(config.epsilon0, config.epsilon_decay, ep)
        s = spec.start
        for _ in range(config.max_steps):
            if rng.random() < eps:
                a = int(rng.integers(n_a))
            else:
                row = q[s]
                a = int(rng.choice(np.flatnonzero(row == row.max())))
            out = step(spec, model, s, a)
            bootstrap = 0.0 if out.terminal else q[out.next].max()
            q[s, a] += config.alpha * (out.reward + config.gamma * bootstrap - q[s, a])
            visits[s, a] += 1
            s = out.next
            if out.terminal:
                break
    return QTable(spec, q, visits)


def state_values_from_q(
    spec: GridSpec, q: QTable | np.ndarray, model: RewardModel = DP_ARRIVAL, reduce: str = "max"
) -> ValueTable:
    """Value of each state read from the Q of the pairs leading into it.

    At convergence every such pair holds the same number. ``reduce="max"``
    suits tabular tables; ``"mean"`` averages out function-approximation noise.
    """
    if reduce not in ("max", "mean"):
        raise ValueError(f"unknown reduction {reduce!r}")
    qa = q.q if isinstance(q, QTable) else np.asarray(q, dtype=float)
    incoming: list[list[float]] = [[] for _ in spec.states]
    for s in spec.nonterminal_states:
        for a in ACTIONS:
            incoming[successor(spec, s, a)].append(float(qa[s, a]))
    pick = max if reduce == "max" else (lambda xs: float(np.mean(xs)))
    v = np.array([pick(xs) if xs else np.nan for xs in incoming])
    defined = np.isfinite(v)
    v[spec.goal] = model.goal_reward
    defined[spec.goal] = True
    v[~defined] = np.nan
    return ValueTable(spec, v, defined=defined)
