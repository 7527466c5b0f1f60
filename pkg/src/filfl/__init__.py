"""Federated learning simulator with greedy client filtering on a public dataset."""

from .core import Dataset, RngStream, simple_average, weighted_average
from .filtering import RewardOracle, brute_force_opt, chi_gf, reward, weak_submodularity_check
from .models import LocalTrainConfig, ModelSpec

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "LocalTrainConfig",
    "ModelSpec",
    "RewardOracle",
    "RngStream",
    "brute_force_opt",
    "chi_gf",
    "reward",
    "simple_average",
    "weak_submodularity_check",
    "weighted_average",
]
