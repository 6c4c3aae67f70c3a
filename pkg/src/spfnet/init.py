"""Parameter initialisation: centred uniform with fan-in scaling, zero biases."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor
from .rng import PrngState


def uniform_fan_in(rng: PrngState, name: str, shape: tuple[int, ...], fan_in: int) -> Tensor:
    # Each parameter has its own sub-stream, so adding a layer never reshuffles the others.
    bound = math.sqrt(3.0 / fan_in)
    values = (rng.spawn(name).uniform(int(np.prod(shape))) * 2.0 - 1.0) * bound
    return Tensor(values.reshape(shape).astype(np.float32), requires_grad=True, name=name)


def zeros(name: str, shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True, name=name)


def conv_params(rng: PrngState, prefix: str, c_out: int, c_in: int, k: int) -> dict[str, Tensor]:
    return {
        f"{prefix}.w": uniform_fan_in(rng, f"{prefix}.w", (c_out, c_in, k, k), c_in * k * k),
        f"{prefix}.b": zeros(f"{prefix}.b", (c_out,)),
    }


def dense_params(rng: PrngState, prefix: str, n_out: int, n_in: int) -> dict[str, Tensor]:
    return {
        f"{prefix}.w": uniform_fan_in(rng, f"{prefix}.w", (n_out, n_in), n_in),
        f"{prefix}.b": zeros(f"{prefix}.b", (n_out,)),
    }
