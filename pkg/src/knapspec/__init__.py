"""Self-speculative decoding with knapsack layer selection on a toy transformer."""

from .kernels import BACKEND
from .model import KVCache, LayerSet, ModelConfig, ModelWeights, ToyModel, greedy_token, init_weights

__all__ = [
    "BACKEND",
    "KVCache",
    "LayerSet",
    "ModelConfig",
    "ModelWeights",
    "ToyModel",
    "greedy_token",
    "init_weights",
]
