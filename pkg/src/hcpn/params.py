"""Flat named-parameter dictionaries and their initializers."""

from __future__ import annotations

import numpy as np

from . import tensor as T

RELU_GAIN = float(np.sqrt(2.0))
HEAD_GAIN = 0.1


def rng_from(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    """Uniform draw with standard deviation ``gain / sqrt(fan_in)``.

    Use ``gain = sqrt(2)`` for layers followed by a relu so activations keep their scale.
    """
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def add_conv(params: dict, rng, name: str, k: int, cin: int, cout: int, bias: bool = True,
             gain: float = 1.0) -> None:
    w = uniform(rng, (k, k, cin, cout), k * k * cin, gain)
    params[f"{name}.w"] = T.Tensor(w, requires_grad=True, name=f"{name}.w")
    if bias:
        params[f"{name}.b"] = T.Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.b")


def add_linear(params: dict, rng, name: str, cin: int, cout: int) -> None:
    params[f"{name}.w"] = T.Tensor(uniform(rng, (cin, cout), cin), requires_grad=True, name=f"{name}.w")
    params[f"{name}.b"] = T.Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.b")


def add_const(params: dict, name: str, value) -> None:
    params[name] = T.Tensor(value, requires_grad=True, name=name)


def conv(x, params: dict, name: str, **kw) -> T.Tensor:
    return T.conv2d(x, params[f"{name}.w"], params.get(f"{name}.b"), **kw)


def linear(x, params: dict, name: str) -> T.Tensor:
    return T.add(T.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def scope(params: dict, prefix: str) -> dict:
    """View of the entries under ``prefix`` with the prefix stripped."""
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def merge(target: dict, prefix: str, params: dict) -> dict:
    for k, v in params.items():
        target[prefix + k] = v
    return target


def cast(params: dict, dtype=None) -> dict:
    """Re-materialize every tensor at ``dtype`` (the run-wide precision by default)."""
    dtype = dtype or T.get_dtype()
    return {k: T.Tensor._wrap(v.data.astype(dtype), v.requires_grad) for k, v in params.items()}


def zeros_like(params: dict) -> dict:
    return {k: T.Tensor._wrap(np.zeros_like(v.data), v.requires_grad) for k, v in params.items()}
