"""Value-network learners: fitted value iteration (DDPN), distillation, DQN.

A DDPN maps a state encoding to a scalar value and is trained by repeatedly
regressing onto Bellman backups of its own predictions. Inputs come from an
``input_source`` callable so the same loop serves one-hot, noisy and
feature-vector encodings; a source that draws noise returns a fresh draw on
every call.
"""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .gridworld import (
    ACTIONS,
    DP_ARRIVAL,
    EPISODE_EVAL,
    Action,
    GridSpec,
    RewardModel,
    encode_one_hot,
    run_episode,
    step,
)
from .nn import AdamState, Network, adam_step, backward, fit, forward, init_network, mlp_specs
from .tabular import (
    Policy,
    ValueTable,
    argmax_first,
    arrival_rewards,
    epsilon_at,
    state_values_from_q,
    successor_table,
)

InputSource = Callable[[int], np.ndarray]

DDPN_HIDDEN = (
    (32, "tanh"),
    (32, "tanh"),
    (32, "tanh"),
    (32, "relu"),
    (32, "relu"),
)
REDUCED_HIDDEN = ((32, "relu"), (32, "relu"))


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, values: np.ndarray):
        super().__init__(
            f"value network diverged at iteration {iteration}: max |V|={np.abs(values).max():.3g}"
        )
        self.iteration = iteration
        self.values = values


@dataclass
class DDPNConfig:
    hidden: tuple = DDPN_HIDDEN
    gamma: float = 0.9
    bellman_iterations: int = 200
    epochs_per_iteration: int = 50
    learning_rate: float = 1e-3
    eval_every: int = 2
    test_episodes: int = 200
    init_gain: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        self.hidden = tuple((int(w), str(a)) for w, a in self.hidden)


@dataclass
class DQNConfig:
    hidden: tuple = DDPN_HIDDEN
    gamma: float = 0.9
    learning_rate: float = 1e-3
    episodes: int = 1500
    max_steps: int = 100
    epsilon0: float = 0.9
    epsilon_decay: float = 0.99
    epsilon_min: float = 0.5
    init_gain: float = 2.0
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple((int(w), str(a)) for w, a in self.hidden)


@dataclass
class TraceRecord:
    iteration: int
    phase: str
    reward: float
    loss: float
    seconds: float


@dataclass
class TrainingTrace:
    method: str = ""
    records: list[TraceRecord] = field(default_factory=list)
    seconds: float = 0.0

    def add(self, iteration, phase, reward, loss, seconds):
        if self.records and phase == self.records[-1].phase and iteration <= self.records[-1].iteration:
            raise ValueError("trace iterations must increase within a phase")
        self.records.append(TraceRecord(int(iteration), phase, float(reward), float(loss), float(seconds)))

    def phase(self, name: str) -> list[TraceRecord]:
        return [r for r in self.records if r.phase == name]

    def rewards(self, phase: str = "train") -> np.ndarray:
        return np.array([r.reward for r in self.phase(phase)])

    def iterations(self, phase: str = "train") -> np.ndarray:
        return np.array([r.iteration for r in self.phase(phase)])

    def to_csv(self, timings: bool = True) -> str:
        """CSV rows; pass ``timings=False`` for byte-reproducible output."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "phase", "reward", "loss", "seconds"])
        for r in self.records:
            w.writerow([r.iteration, r.phase, repr(r.reward), repr(r.loss), repr(r.seconds) if timings else ""])
        return buf.getvalue()


def stabilization_iteration(trace: TrainingTrace, target: float = 4.0, phase: str = "train") -> int | None:
    """First evaluated iteration from which every later reward equals ``target``."""
    its = trace.iterations(phase)
    rew = trace.rewards(phase)
    if len(rew) == 0 or not np.isclose(rew[-1], target):
        return None
    bad = np.flatnonzero(~np.isclose(rew, target))
    return int(its[0]) if len(bad) == 0 else int(its[bad[-1] + 1])


class OneHotSource:
    stochastic = False

    def __init__(self, spec: GridSpec):
        self.spec = spec

    def __call__(self, s: int) -> np.ndarray:
        return encode_one_hot(self.spec, s)


def one_hot_source(spec: GridSpec) -> OneHotSource:
    return OneHotSource(spec)


def is_stochastic(input_source) -> bool:
    return bool(getattr(input_source, "stochastic", False))


def stacked_inputs(n: int, input_source: InputSource) -> np.ndarray:
    return np.stack([np.asarray(input_source(i), dtype=float) for i in range(n)])


def state_inputs(spec: GridSpec, input_source: InputSource) -> np.ndarray:
    return stacked_inputs(spec.n_states, input_source)


def ddpn_state_values(net: Network, input_source: InputSource, spec: GridSpec) -> ValueTable:
    """Raw network prediction for every state; the goal is not pinned."""
    return ValueTable(spec, forward(net, state_inputs(spec, input_source)).output[:, 0])


def greedy_from_values(
    spec: GridSpec, v: np.ndarray, gamma: float, model: RewardModel = DP_ARRIVAL
) -> Policy:
    nxt = successor_table(spec)
    choice = {}
    for s in spec.nonterminal_states:
        scores = [model.reward(spec, nxt[s, a]) + gamma * v[nxt[s, a]] for a in ACTIONS]
        choice[s] = Action(argmax_first(scores))
    return Policy(choice)


def greedy_policy_from_network(
    net: Network,
    input_source: InputSource,
    spec: GridSpec,
    model_for_lookahead: RewardModel = DP_ARRIVAL,
    gamma: float = 0.9,
) -> Policy:
    v = forward(net, state_inputs(spec, input_source)).output[:, 0]
    return greedy_from_values(spec, v, gamma, model_for_lookahead)


def _evaluate(spec, net, input_source, gamma) -> float:
    policy = greedy_policy_from_network(net, input_source, spec, DP_ARRIVAL, gamma)
    return run_episode(spec, EPISODE_EVAL, policy).total_reward


def _new_network(n_in: int, config: DDPNConfig) -> tuple[Network, AdamState]:
    net = init_network(mlp_specs(n_in, config.hidden, 1), config.seed, zero_final=True, gain=config.init_gain)
    return net, AdamState.for_network(net, config.learning_rate)


def _check_divergence(iteration: int, v: np.ndarray, goal_reward: float) -> None:
    if not np.all(np.isfinite(v)) or np.abs(v).max() > 10 * abs(goal_reward):
        raise DivergenceError(iteration, v)


def run_test_phase(trace: TrainingTrace, episodes: int, evaluate: Callable[[], float]) -> None:
    for k in range(1, episodes + 1):
        t0 = time.perf_counter()
        reward = evaluate()
        trace.add(k, "test", reward, float("nan"), time.perf_counter() - t0)


def fitted_value_iteration(
    n_states: int,
    input_source: InputSource,
    targets_fn: Callable[[np.ndarray], np.ndarray],
    evaluate: Callable[[Network], float],
    n_inputs: int,
    config: DDPNConfig,
    method: str,
    goal_reward: float = 10.0,
    net: Network | None = None,
) -> tuple[Network, TrainingTrace]:
    """Generic synchronous fitted VI over ``n_states`` indexed inputs.

    ``targets_fn`` maps the current predictions (one per index) to regression
    targets; ``evaluate`` scores the current network with a greedy rollout.
    A stochastic input source is redrawn for every epoch.
    """
    if net is None:
        net, adam = _new_network(n_inputs, config)
    else:
        adam = AdamState.for_network(net, config.learning_rate)
    draw = lambda: stacked_inputs(n_states, input_source)  # noqa: E731
    trace = TrainingTrace(method)
    start = time.perf_counter()
    for it in range(1, config.bellman_iterations + 1):
        t0 = time.perf_counter()
        x = draw()
        v = forward(net, x).output[:, 0]
        _check_divergence(it, v, goal_reward)
        y = targets_fn(v)
        losses = fit(net, adam, draw if is_stochastic(input_source) else x, y, config.epochs_per_iteration)
        if it % config.eval_every == 0:
            reward = evaluate(net)
            trace.add(it, "train", reward, losses[-1] if losses else float("nan"), time.perf_counter() - t0)
    _check_divergence(config.bellman_iterations, forward(net, draw()).output[:, 0], goal_reward)
    trace.seconds = time.perf_counter() - start
    run_test_phase(trace, config.test_episodes, lambda: evaluate(net))
    return net, trace


def train_ddpn(
    spec: GridSpec,
    config: DDPNConfig | None = None,
    input_source: InputSource | None = None,
    model: RewardModel = DP_ARRIVAL,
    method: str = "ddpn",
) -> tuple[Network, TrainingTrace]:
    """Neural fitted value iteration against the true environment model."""
    config = config or DDPNConfig()
    input_source = input_source or one_hot_source(spec)
    nxt = successor_table(spec)
    r = arrival_rewards(spec, model)

    def targets(v):
        t = r + config.gamma * v[nxt].max(axis=1)
        t[spec.goal] = model.goal_reward
        return t

    n_in = len(np.asarray(input_source(spec.start)))
    return fitted_value_iteration(
        spec.n_states,
        input_source,
        targets,
        lambda net: _evaluate(spec, net, input_source, config.gamma),
        n_in,
        config,
        method,
        model.goal_reward,
    )


def train_ddpn_q_distill(
    spec: GridSpec,
    config: DDPNConfig | None,
    values: ValueTable,
    input_source: InputSource | None = None,
    method: str = "ddpn1",
) -> tuple[Network, TrainingTrace]:
    """Regress the DDPN architecture directly onto fixed state values."""
    config = config or DDPNConfig()
    input_source = input_source or one_hot_source(spec)
    target = np.array(values.v, dtype=float)
    if not np.all(np.isfinite(target)):
        raise ValueError("distillation targets must be defined for every state")
    n_in = len(np.asarray(input_source(spec.start)))
    return fitted_value_iteration(
        spec.n_states,
        input_source,
        lambda v: target,
        lambda net: _evaluate(spec, net, input_source, config.gamma),
        n_in,
        config,
        method,
        max(10.0, float(np.abs(target).max())),
    )


def train_dqn(
    spec: GridSpec,
    config: DQNConfig | None = None,
    input_source: InputSource | None = None,
    model: RewardModel = DP_ARRIVAL,
) -> tuple[Network, TrainingTrace]:
    """Online Q-learning with a network: one Adam step per transition.

    Only the taken action's output receives gradient. No replay buffer or
    target network.
    """
    config = config or DQNConfig()
    input_source = input_source or one_hot_source(spec)
    rng = np.random.default_rng(config.seed)
    n_in = len(np.asarray(input_source(spec.start)))
    net = init_network(mlp_specs(n_in, config.hidden, len(ACTIONS)), config.seed, zero_final=True, gain=config.init_gain)
    adam = AdamState.for_network(net, config.learning_rate)
    trace = TrainingTrace("dqn")
    start = time.perf_counter()
    for ep in range(config.episodes):
        t0 = time.perf_counter()
        eps = max(epsilon_at(config.epsilon0, config.epsilon_decay, ep), config.epsilon_min)
        s = spec.start
        x = np.asarray(input_source(s), dtype=float)
        losses = []
        for _ in range(config.max_steps):
            tr = forward(net, x)
            q = tr.output[0]
            if rng.random() < eps:
                a = int(rng.integers(len(ACTIONS)))
            else:
                a = int(rng.choice(np.flatnonzero(q >= q.max() - 1e-9)))
            out = step(spec, model, s, a)
            x2 = np.asarray(input_source(out.next), dtype=float)
            boot = 0.0 if out.terminal else float(forward(net, x2).output[0].max())
            target = out.reward + config.gamma * boot
            err = q[a] - target
            g = np.zeros_like(tr.output)
            g[0, a] = 2.0 * err
            adam_step(net, adam, backward(net, tr, g))
            losses.append(err * err)
            if not np.isfinite(err) or abs(q[a]) > 10 * abs(model.goal_reward):
                raise DivergenceError(ep, np.array([q[a]]))
            s, x = out.next, x2
            if out.terminal:
                break
        reward = run_episode(spec, EPISODE_EVAL, dqn_policy(net, input_source, spec)).total_reward
        trace.add(ep + 1, "train", reward, float(np.mean(losses)), time.perf_counter() - t0)
    trace.seconds = time.perf_counter() - start
    return net, trace


def dqn_q_values(net: Network, input_source: InputSource, spec: GridSpec) -> np.ndarray:
    return forward(net, state_inputs(spec, input_source)).output


def dqn_state_values(
    net: Network, input_source: InputSource, spec: GridSpec, samples: int = 20, model: RewardModel = DP_ARRIVAL
) -> ValueTable:
    """State values from a DQN: Q averaged over noise draws and over entering pairs."""
    n = samples if is_stochastic(input_source) else 1
    q = np.mean([dqn_q_values(net, input_source, spec) for _ in range(n)], axis=0)
    return state_values_from_q(spec, q, model, reduce="mean")


def dqn_policy(net: Network, input_source: InputSource, spec: GridSpec) -> Policy:
    q = dqn_q_values(net, input_source, spec)
    return Policy({s: Action(argmax_first(q[s])) for s in spec.nonterminal_states})

