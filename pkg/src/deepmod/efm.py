"""Extracted feature model (EFM) and the end-to-end feature-model pipeline.

The EFM is a lookup table ``(feature, action) -> (next feature, reward)``
recorded by exploring the real environment through a state->feature map. A
second value network (DDPN2) is then trained by fitted value iteration where
every lookahead goes through the table instead of the environment.
"""
from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .features import (
    FeatureMapWarning,
    FeatureVector,
    NoiseAugmenter,
    StateFeatureMap,
    build_state_feature_map,
    noisy_source,
)
from .gridworld import ACTIONS, DP_ARRIVAL, EPISODE_EVAL, Action, GridSpec, RewardModel, run_episode, step
from .learners import (
    REDUCED_HIDDEN,
    DDPNConfig,
    DQNConfig,
    TrainingTrace,
    dqn_policy,
    dqn_state_values,
    fitted_value_iteration,
    one_hot_source,
    train_ddpn_q_distill,
    train_dqn,
)
from .nn import Network, forward
from .tabular import (
    Policy,
    QLearningConfig,
    QTable,
    ValueTable,
    argmax_first,
    epsilon_at,
    greedy_policy,
    q_learning,
    state_values_from_q,
)

log = logging.getLogger(__name__)


class EFMMiss(KeyError):
    """No EFM entry for a (feature, action) key."""


class EFMConflict(ValueError):
    """Two transitions disagree for one key: the feature map is not injective."""


class CoverageError(RuntimeError):
    def __init__(self, missing, efm):
        super().__init__(f"EFM exploration left {len(missing)} state-action pairs uncovered")
        self.missing = missing
        self.efm = efm


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.__cause__ = cause


@dataclass
class ExplorationConfig:
    epsilon0: float = 0.9
    epsilon_decay: float = 0.99
    epsilon_min: float = 0.0
    max_episodes: int = 2000
    max_steps: int = 100
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.epsilon0 <= 1 or not 0 < self.epsilon_decay <= 1:
            raise ValueError("epsilon0 and epsilon_decay must lie in (0, 1]")
        if not 0 <= self.epsilon_min <= self.epsilon0:
            raise ValueError("epsilon_min must lie in [0, epsilon0]")

    def epsilon(self, episode: int) -> float:
        """Geometric decay, floored at ``epsilon_min`` so coverage can finish."""
        return max(epsilon_at(self.epsilon0, self.epsilon_decay, episode), self.epsilon_min)


@dataclass
class EFM:
    table: dict[tuple[FeatureVector, Action], tuple[FeatureVector, float]] = field(default_factory=dict)
    coverage: set[tuple[int, Action]] = field(default_factory=set)
    fmap_id: str = ""
    reward_variant: str = DP_ARRIVAL.variant.name
    episodes: int = 0
    missing: list[tuple[int, Action]] = field(default_factory=list)

    def __len__(self):
        return len(self.table)

    @property
    def complete(self) -> bool:
        return not self.missing

    def record(self, f: FeatureVector, a: Action, f2: FeatureVector, r: float) -> None:
        key = (f, Action(a))
        prev = self.table.get(key)
        if prev is not None and prev != (f2, r):
            raise EFMConflict(f"key (feature {f.signed_string()}, {Action(a).name}) has two successors")
        self.table[key] = (f2, float(r))

    def sources(self) -> list[FeatureVector]:
        return sorted({f for f, _ in self.table}, key=lambda f: f.bits)

    def features(self) -> list[FeatureVector]:
        """Every feature in the table, sources first then terminal ones."""
        src = set(self.sources())
        terminal = {f2 for f2, _ in self.table.values()} - src
        return self.sources() + sorted(terminal, key=lambda f: f.bits)

    def terminal_features(self) -> list[FeatureVector]:
        """Features that are entered but never left (the goal)."""
        src = set(self.sources())
        return sorted({f2 for f2, _ in self.table.values()} - src, key=lambda f: f.bits)

    def arrival_reward(self, f: FeatureVector) -> float:
        """Reward observed for entering ``f``; 0.0 if it was never entered."""
        for f2, r in self.table.values():
            if f2 == f:
                return r
        return 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["f", "action", "f_next", "reward"])
        for (f, a), (f2, r) in sorted(self.table.items(), key=lambda kv: (kv[0][0].bits, kv[0][1])):
            w.writerow([f.signed_string(), int(a), f2.signed_string(), repr(r)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> EFM:
        rows = list(csv.reader(io.StringIO(text)))
        if rows[0] != ["f", "action", "f_next", "reward"]:
            raise ValueError("unexpected EFM header")
        efm = cls()
        for f, a, f2, r in rows[1:]:
            efm.record(FeatureVector.from_signed_string(f), Action(int(a)), FeatureVector.from_signed_string(f2), float(r))
        return efm

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())


def build_efm(
    spec: GridSpec,
    model: RewardModel,
    fmap: StateFeatureMap,
    explore: ExplorationConfig | None = None,
    guide: ValueTable | Callable[[int], int] | None = None,
    gamma: float = 0.9,
    strict: bool = True,
) -> EFM:
    """Explore with epsilon-greedy episodes until every non-terminal pair is seen.

    ``guide`` drives the greedy branch: a ValueTable (one-step lookahead) or
    any state->action callable. Without a guide every action is random. The
    random branch picks uniformly among the actions not yet tried in the
    current state, falling back to all four.
    """
    explore = explore or ExplorationConfig()
    if isinstance(guide, ValueTable):
        guide = greedy_policy(spec, DP_ARRIVAL, guide, gamma)
    rng = np.random.default_rng(explore.seed)
    needed = {(s, a) for s in spec.nonterminal_states for a in ACTIONS}
    efm = EFM(fmap_id=fmap.checkpoint, reward_variant=model.variant.name)
    for ep in range(explore.max_episodes):
        if needed <= efm.coverage:
            break
        eps = explore.epsilon(ep)
        s = spec.start
        for _ in range(explore.max_steps):
            if guide is None or rng.random() < eps:
                untried = [a for a in ACTIONS if (s, a) not in efm.coverage]
                pool = untried or ACTIONS
                a = Action(pool[int(rng.integers(len(pool)))])
            else:
                a = Action(guide(s))
            out = step(spec, model, s, a)
            efm.record(fmap[s], a, fmap[out.next], out.reward)
            efm.coverage.add((s, a))
            s = out.next
            if out.terminal:
                break
        efm.episodes = ep + 1
    efm.missing = sorted(needed - efm.coverage)
    if efm.missing and strict:
        raise CoverageError(efm.missing, efm)
    return efm


def efm_lookup(efm: EFM, f: FeatureVector, a: Action) -> tuple[FeatureVector, float]:
    try:
        return efm.table[(f, Action(a))]
    except KeyError:
        raise EFMMiss(f"no EFM entry for ({f.signed_string()}, {Action(a).name})") from None


def _feature_values(net: Network, feats: list[FeatureVector]) -> dict[FeatureVector, float]:
    v = forward(net, np.stack([f.as_array() for f in feats])).output[:, 0]
    return dict(zip(feats, v.tolist()))


def _lookahead_action(efm: EFM, values: dict, f: FeatureVector, gamma: float) -> Action:
    scores = []
    for a in ACTIONS:
        f2, r = efm_lookup(efm, f, a)
        scores.append(r + gamma * values[f2])
    return Action(argmax_first(scores))


def efm_greedy_action(efm: EFM, net: Network, f: FeatureVector, gamma: float = 0.9) -> Action:
    succ = [efm_lookup(efm, f, a)[0] for a in ACTIONS]
    return _lookahead_action(efm, _feature_values(net, succ), f, gamma)


def efm_policy(efm: EFM, net: Network, fmap: StateFeatureMap, gamma: float = 0.9) -> Policy:
    """Greedy EFM policy pulled back to real states."""
    values = _feature_values(net, efm.features())
    spec = fmap.spec
    return Policy({s: _lookahead_action(efm, values, fmap[s], gamma) for s in spec.nonterminal_states})


class _IndexedFeatures:
    stochastic = False

    def __init__(self, feats: list[FeatureVector]):
        self.arrays = [f.as_array() for f in feats]

    def __call__(self, i: int) -> np.ndarray:
        return self.arrays[i]


def train_ddpn2(
    efm: EFM,
    config: DDPNConfig | None,
    fmap: StateFeatureMap,
    method: str = "ddpn2",
) -> tuple[Network, TrainingTrace]:
    """Fitted value iteration in feature space, with lookahead through the EFM.

    Each feature's target is its arrival reward plus the discounted best
    successor value; terminal features are pinned to their arrival reward.
    """
    config = config or DDPNConfig(hidden=REDUCED_HIDDEN)
    feats = efm.features()
    index = {f: i for i, f in enumerate(feats)}
    n = len(feats)
    terminal = np.array([f in set(efm.terminal_features()) for f in feats])
    arrival = np.array([efm.arrival_reward(f) for f in feats])
    succ = np.zeros((n, len(ACTIONS)), dtype=int)
    for f in feats:
        if terminal[index[f]]:
            succ[index[f]] = index[f]
            continue
        for a in ACTIONS:
            succ[index[f], a] = index[efm_lookup(efm, f, a)[0]]
    goal_reward = float(arrival[terminal].max()) if terminal.any() else DP_ARRIVAL.goal_reward

    def targets(v):
        t = arrival + config.gamma * v[succ].max(axis=1)
        t[terminal] = arrival[terminal]
        return t

    def evaluate(net):
        policy = efm_policy(efm, net, fmap, config.gamma)
        return run_episode(fmap.spec, EPISODE_EVAL, policy).total_reward

    return fitted_value_iteration(
        n, _IndexedFeatures(feats), targets, evaluate, len(feats[0]), config, method, goal_reward
    )


def ddpn2_state_values(net: Network, fmap: StateFeatureMap) -> ValueTable:
    spec = fmap.spec
    x = np.stack([fmap[s].as_array() for s in spec.states])
    return ValueTable(spec, forward(net, x).output[:, 0])


@dataclass
class PipelineConfig:
    noisy: bool = True
    use_dqn: bool = False
    n_noise: int = 20
    master_seed: int = 0
    gamma: float = 0.9
    q_episodes: int = 5000
    dqn_episodes: int = 1500
    bellman_iterations: int = 200
    epochs_per_iteration: int = 50
    learning_rate: float = 1e-3
    test_episodes: int = 200
    layer_index: int = 3
    ddpn1_init_gain: float = 3.0
    train_attempts: int = 3
    extract_attempts: int = 20
    explore_episodes: int = 2000


@dataclass
class PipelineArtifacts:
    config: PipelineConfig
    qtable: QTable | None
    dqn: Network | None
    step1_values: ValueTable
    ddpn1: Network
    fmap: StateFeatureMap
    efm: EFM
    ddpn2: Network
    traces: dict[str, TrainingTrace]
    ddpn2_values: ValueTable
    final_rewards: list[float]
    feature_attempts: int = 1
    seeds: dict[str, int] = field(default_factory=dict)


def derive_seeds(master: int) -> dict[str, int]:
    names = ["step1", "noise", "ddpn1", "extract", "explore", "ddpn2"]
    states = np.random.SeedSequence(master).generate_state(len(names))
    return {n: int(s) for n, s in zip(names, states)}


def injective_feature_map(
    net: Network, spec: GridSpec, n_noise: int, seed: int, attempts: int = 20, layer_index: int = 3
) -> StateFeatureMap:
    """Extract features, redrawing the per-state extraction noise until injective.

    Returns the last map tried, which may still collide.
    """
    tries = attempts if n_noise else 1
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FeatureMapWarning)
        for k in range(tries):
            extractor = NoiseAugmenter(n_noise, seed + k) if n_noise else None
            fmap = build_state_feature_map(net, spec, extractor, layer_index)
            if fmap.injective:
                break
    return fmap


def run_deepmod_pipeline(spec: GridSpec, config: PipelineConfig | None = None) -> PipelineArtifacts:
    """Steps (i)-(vi): Q estimation, DDPN1, features, EFM, DDPN2, EFM-greedy acting."""
    config = config or PipelineConfig()
    seeds = derive_seeds(config.master_seed)
    n_noise = config.n_noise if config.noisy else 0
    traces: dict[str, TrainingTrace] = {}

    def make_source(seed):
        if n_noise == 0:
            return one_hot_source(spec), None
        aug = NoiseAugmenter(n_noise, seed)
        return noisy_source(spec, aug), aug

    stage = "i: q-estimation"
    try:
        qtable = dqn = None
        if config.use_dqn:
            src, aug = make_source(seeds["noise"])
            dqn, traces["dqn"] = train_dqn(
                spec, DQNConfig(gamma=config.gamma, episodes=config.dqn_episodes, seed=seeds["step1"]), src
            )
            ext_src, _ = make_source(seeds["extract"])
            values = dqn_state_values(dqn, ext_src, spec)
            guide = dqn_policy(dqn, ext_src, spec)
        else:
            qtable = q_learning(
                spec, DP_ARRIVAL, QLearningConfig(gamma=config.gamma, episodes=config.q_episodes, rng_seed=seeds["step1"])
            )
            values = state_values_from_q(spec, qtable)
            guide = Policy({s: Action(argmax_first(qtable.q[s])) for s in spec.nonterminal_states})

        stage = "ii-iii: ddpn1 + features"
        attempts = 0
        for train_attempt in range(1, config.train_attempts + 1):
            src, aug = make_source(seeds["noise"] + train_attempt)
            cfg = DDPNConfig(
                gamma=config.gamma,
                bellman_iterations=config.bellman_iterations,
                epochs_per_iteration=config.epochs_per_iteration,
                learning_rate=config.learning_rate,
                test_episodes=config.test_episodes,
                init_gain=config.ddpn1_init_gain,
                seed=seeds["ddpn1"] + train_attempt,
            )
            ddpn1, traces["ddpn1"] = train_ddpn_q_distill(spec, cfg, values, src)
            fmap = injective_feature_map(
                ddpn1, spec, n_noise, seeds["extract"], config.extract_attempts, config.layer_index
            )
            attempts += 1
            if fmap.injective:
                break
            log.info("ddpn1 attempt %d gave no injective feature map", train_attempt)
        if not fmap.injective:
            warnings.warn(f"feature map not injective after {attempts} trainings", FeatureMapWarning)

        stage = "iv: efm"
        efm = build_efm(
            spec,
            DP_ARRIVAL,
            fmap,
            ExplorationConfig(max_episodes=config.explore_episodes, seed=seeds["explore"]),
            guide,
            config.gamma,
        )

        stage = "v: ddpn2"
        cfg2 = DDPNConfig(
            hidden=REDUCED_HIDDEN,
            gamma=config.gamma,
            bellman_iterations=config.bellman_iterations,
            epochs_per_iteration=config.epochs_per_iteration,
            learning_rate=config.learning_rate,
            test_episodes=config.test_episodes,
            seed=seeds["ddpn2"],
        )
        ddpn2, traces["ddpn2"] = train_ddpn2(efm, cfg2, fmap)

        stage = "vi: efm-greedy policy"
        policy = efm_policy(efm, ddpn2, fmap, config.gamma)
        final = [run_episode(spec, EPISODE_EVAL, policy).total_reward]
    except Exception as exc:  # noqa: BLE001
        raise PipelineError(stage, exc) from exc

    return PipelineArtifacts(
        config=config,
        qtable=qtable,
        dqn=dqn,
        step1_values=values,
        ddpn1=ddpn1,
        fmap=fmap,
        efm=efm,
        ddpn2=ddpn2,
        traces=traces,
        ddpn2_values=ddpn2_state_values(ddpn2, fmap),
        final_rewards=final,
        feature_attempts=attempts,
        seeds=seeds,
    )
