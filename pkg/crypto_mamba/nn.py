"""
Parameterized layers shared by the SSM block and the forecaster.
"""

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .autograd import ParamStore, Tensor, layer_norm, matmul


def make_rng(*seed: int) -> np.random.Generator:
    """Counter-based generator keyed by the given integers"""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(seed))))


def uniform(rng: np.random.Generator, shape: Tuple[int, ...], bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class Linear:
    """y = x @ weight + bias over the last axis; weight is (in, out)"""

    weight: Tensor
    bias: Optional[Tensor] = None

    @classmethod
    def create(cls, store: ParamStore, path: str, in_features: int, out_features: int,
               rng: np.random.Generator, bias: bool = True) -> "Linear":
        bound = 1.0 / math.sqrt(in_features)
        weight = store.add(f"{path}.weight", uniform(rng, (in_features, out_features), bound))
        b = store.add(f"{path}.bias", uniform(rng, (out_features,), bound)) if bias else None
        return cls(weight, b)

    def __call__(self, x) -> Tensor:
        y = matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


@dataclass
class LayerNorm:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5

    @classmethod
    def create(cls, store: ParamStore, path: str, features: int, eps: float = 1e-5) -> "LayerNorm":
        return cls(store.add(f"{path}.gamma", np.ones(features)),
                   store.add(f"{path}.beta", np.zeros(features)), eps)

    def __call__(self, x) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)
