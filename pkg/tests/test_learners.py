import numpy as np
import pytest

from deepmod.features import NoiseAugmenter, noisy_source
from deepmod.gridworld import DP_ARRIVAL, EPISODE_EVAL, Action, GridSpec, run_episode
from deepmod.learners import (
    DDPNConfig,
    DivergenceError,
    DQNConfig,
    TrainingTrace,
    ddpn_state_values,
    dqn_q_values,
    dqn_state_values,
    fitted_value_iteration,
    greedy_policy_from_network,
    one_hot_source,
    stabilization_iteration,
    train_ddpn,
    train_ddpn_q_distill,
    train_dqn,
)
from deepmod.nn import init_network, mlp_specs
from deepmod.tabular import ValueTable, arrival_rewards, greedy_policy


def test_config_validation():
    with pytest.raises(ValueError):
        DDPNConfig(eval_every=0)
    with pytest.raises(ValueError):
        DDPNConfig(gamma=1.0)
    assert DDPNConfig(hidden=[[8, "relu"]]).hidden == ((8, "relu"),)


def test_clean_ddpn_matches_value_iteration(spec, vi, clean_ddpn):
    net, trace = clean_ddpn
    v = ddpn_state_values(net, one_hot_source(spec), spec)
    assert np.abs(v.v - vi.v).max() < 0.5
    assert len(trace.phase("train")) == 100 and len(trace.phase("test")) == 200
    assert list(trace.iterations()[:3]) == [2, 4, 6]
    assert np.all(trace.rewards("test")[-50:] == 4.0)
    assert trace.seconds > 0


def test_first_iteration_targets_are_arrival_rewards(spec):
    cfg = DDPNConfig(bellman_iterations=1, epochs_per_iteration=3000, learning_rate=3e-3, test_episodes=0)
    net, _ = train_ddpn(spec, cfg)
    expect = arrival_rewards(spec, DP_ARRIVAL)
    assert np.abs(ddpn_state_values(net, one_hot_source(spec), spec).v - expect).max() < 0.05


def test_distillation(spec, vi):
    cfg = DDPNConfig(bellman_iterations=40, test_episodes=5)
    net, trace = train_ddpn_q_distill(spec, cfg, vi)
    assert np.abs(ddpn_state_values(net, one_hot_source(spec), spec).v - vi.v).max() < 0.5
    assert trace.method == "ddpn1" and np.all(trace.rewards("test") == 4.0)
    zero = ValueTable(spec, np.zeros(16))
    znet, _ = train_ddpn_q_distill(spec, DDPNConfig(bellman_iterations=5, test_episodes=0), zero)
    assert np.abs(ddpn_state_values(znet, one_hot_source(spec), spec).v).max() < 1e-6
    with pytest.raises(ValueError):
        train_ddpn_q_distill(spec, cfg, ValueTable(spec, np.full(16, np.nan)))


def test_network_policy_matches_table_policy(spec, clean_ddpn):
    net, _ = clean_ddpn
    src = one_hot_source(spec)
    pi = greedy_policy_from_network(net, src, spec)
    ref = greedy_policy(spec, DP_ARRIVAL, ddpn_state_values(net, src, spec))
    assert pi.choice == ref.choice
    assert run_episode(spec, EPISODE_EVAL, pi).total_reward == 4.0


def test_zero_network_policy_avoids_adjacent_holes(spec):
    net = init_network(mlp_specs(16, [(8, "tanh")], 1), zero_final=True)
    pi = greedy_policy_from_network(net, one_hot_source(spec), spec)
    assert pi(spec.state_of("B")) == Action.UP
    assert pi(spec.state_of("O")) == Action.RIGHT


def test_divergence_is_reported():
    cfg = DDPNConfig(hidden=((8, "relu"),), bellman_iterations=5, epochs_per_iteration=500,
                     learning_rate=0.05, test_episodes=0)
    with pytest.raises(DivergenceError) as err:
        fitted_value_iteration(3, lambda i: np.eye(3)[i], lambda v: np.full(3, 1e4),
                               lambda net: 0.0, 3, cfg, "toy", goal_reward=10.0)
    assert err.value.iteration >= 1


def test_trace_records():
    t = TrainingTrace("m")
    t.add(2, "train", -100, 1.0, 0.1)
    t.add(4, "train", 4.0, 0.5, 0.1)
    t.add(1, "test", 4.0, float("nan"), 0.1)
    with pytest.raises(ValueError):
        t.add(1, "test", 4.0, 0.0, 0.0)
    lines = t.to_csv(timings=False).splitlines()
    assert lines[0] == "iteration,phase,reward,loss,seconds"
    assert lines[1] == "2,train,-100.0,1.0,"


@pytest.mark.parametrize(
    "rewards, expected",
    [([4, 4, 4], 2), ([-100, 4, 4], 4), ([4, -100, 4], 6), ([4, 4, -3], None), ([], None)],
)
def test_stabilization_iteration(rewards, expected):
    t = TrainingTrace()
    for k, r in enumerate(rewards, 1):
        t.add(2 * k, "train", r, 0.0, 0.0)
    assert stabilization_iteration(t) == expected


def test_dqn_gamma_zero_learns_immediate_rewards():
    # corridor S H G: every pair is visited often by a random walk
    corridor = GridSpec(3, 1, 0, 2, frozenset({1}))
    cfg = DQNConfig(gamma=0.0, episodes=200, learning_rate=3e-3, epsilon0=1.0, epsilon_decay=1.0, epsilon_min=1.0,
                    max_steps=20, seed=1)
    net, trace = train_dqn(corridor, cfg)
    q = dqn_q_values(net, one_hot_source(corridor), corridor)
    assert q[0, Action.RIGHT] == pytest.approx(-10, abs=0.5)
    assert q[1, Action.RIGHT] == pytest.approx(10, abs=0.5)
    assert q[0, Action.UP] == pytest.approx(0, abs=0.5)
    assert q[1, Action.LEFT] == pytest.approx(0, abs=0.5)
    assert len(trace.phase("train")) == 200


def test_noisy_dqn_values(spec):
    src = noisy_source(spec, NoiseAugmenter(20, seed=11))
    net, _ = train_dqn(spec, DQNConfig(seed=0), src)
    v = dqn_state_values(net, src, spec).v
    assert v[spec.start] == pytest.approx(5.35, abs=1.0)
    holes = sorted(spec.holes)
    assert np.all(v[holes] < 0) and np.all(np.delete(v, holes) > 0)
    assert np.argmax(v) == spec.goal
