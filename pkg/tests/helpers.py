"""Small model builders shared by the test modules."""

import numpy as np

from knapspec.model import ModelConfig, ToyModel


def small_model(L=2, d=16, seed=0, V=32, heads=2, d_ff=32, **kwargs) -> ToyModel:
    return ToyModel.random(ModelConfig(L=L, d=d, n_heads=heads, d_ff=d_ff, V=V, max_seq=256), seed, **kwargs)


def zero_branch(model: ToyModel, i: int) -> ToyModel:
    """Copy of ``model`` with flattened sub-layer ``i`` turned into an exact identity."""
    w = model.weights
    b = (i - 1) // 2
    if i % 2 == 1:
        wo = np.array(w.wo)
        wo[b] = 0.0
        return ToyModel(model.config, w.replace(wo=wo))
    wd = np.array(w.w_down)
    wd[b] = 0.0
    return ToyModel(model.config, w.replace(w_down=wd))
