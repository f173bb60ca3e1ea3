"""Edge-aware graph attention policies for TSP and CVRP, with PPO and rollout-baseline training."""

from .decoding import DecodePolicy, Ensemble, greedy_decode, sample_decode
from .env import CVRP, TSP, Instance, check_solution, generate_cvrp, generate_tsp, opt_gap, tour_length
from .estimators import EGATRouter, HeuristicRouter
from .model import EGATModel, ModelConfig
from .problem_io import Checkpoint, load_checkpoint, parse_file, save_checkpoint
from .training import PPOConfig, PPOTrainer, RolloutConfig, RolloutTrainer

__version__ = "0.1.0"

__all__ = [
    "CVRP", "TSP", "Checkpoint", "DecodePolicy", "EGATModel", "EGATRouter", "Ensemble",
    "HeuristicRouter", "Instance", "ModelConfig", "PPOConfig", "PPOTrainer", "RolloutConfig",
    "RolloutTrainer", "check_solution", "generate_cvrp", "generate_tsp", "greedy_decode",
    "load_checkpoint", "opt_gap", "parse_file", "sample_decode", "save_checkpoint", "tour_length",
]
