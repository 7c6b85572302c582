"""Iterated attacker/defender games on a three-node radial distribution feeder."""

from .agents import Level0Attacker, Level0Defender, StateCodec, TabularPolicy, load_policy, save_policy
from .learning import TrainConfig, train_level_k, train_policy
from .powerflow import ConfigError, ScenarioParams, attacker_reward, defender_reward, solve_flows
from .snfg import ObservationModel, run_episode, simulate_batch

__all__ = [
    "ConfigError", "Level0Attacker", "Level0Defender", "ObservationModel", "ScenarioParams",
    "StateCodec", "TabularPolicy", "TrainConfig", "attacker_reward", "defender_reward",
    "load_policy", "run_episode", "save_policy", "simulate_batch", "solve_flows",
    "train_level_k", "train_policy",
]
__version__ = "0.1.0"
