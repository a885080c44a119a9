"""Learned multi-robot rendezvous on occupancy grids."""
from .env import EnvConfig, RendezvousEnv
from .gridmap import GridMap, generate_map, load_map, save_map, shortest_path_distances
from .neural import PolicyValueNet, load_model
from .ppo import PpoConfig, train

__version__ = "0.1.0"

__all__ = [
    "EnvConfig",
    "GridMap",
    "PolicyValueNet",
    "PpoConfig",
    "RendezvousEnv",
    "generate_map",
    "load_map",
    "load_model",
    "save_map",
    "shortest_path_distances",
    "train",
]
