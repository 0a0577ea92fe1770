"""Gridworld dynamic programming, value networks and extracted feature models."""
from .efm import EFM, PipelineConfig, build_efm, run_deepmod_pipeline
from .features import FeatureVector, NoiseAugmenter, StateFeatureMap, build_state_feature_map
from .gridworld import ACTIONS, DP_ARRIVAL, EPISODE_EVAL, FROZEN_LAKE, Action, GridSpec, RewardModel
from .learners import DDPNConfig, DQNConfig, train_ddpn, train_ddpn_q_distill, train_dqn
from .nn import Network, init_network
from .tabular import QLearningConfig, ValueTable, greedy_policy, q_learning, value_iteration

__version__ = "0.1.0"
