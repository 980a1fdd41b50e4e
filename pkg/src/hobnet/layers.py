"""Small shared building blocks: affine layers, MLP stacks, initializers."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .rng import named_stream


def glorot(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform initial values; conv kernels count their window size."""
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    elif len(shape) == 2:
        fan_in, fan_out = shape
    elif len(shape) == 3:
        c_out, c_in, k = shape
        fan_in, fan_out = c_in * k, c_out * k
    else:
        raise ValueError(f"no fan convention for shape {shape}")
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_param(store, name: str, shape: tuple[int, ...], seed: int, kind: str = "glorot") -> Parameter:
    """Create one named parameter with a per-name deterministic stream."""
    rng = named_stream(seed, f"init/{name}")
    if kind == "glorot":
        values = glorot(shape, rng)
    elif kind == "zeros":
        values = np.zeros(shape)
    elif kind == "ones":
        values = np.ones(shape)
    elif kind == "small-normal":
        values = 0.1 * rng.normal(size=shape)
    elif kind == "small-positive":
        # keeps normalized activations off the ReLU kink at initialization
        values = np.full(shape, 0.01)
    else:
        raise ValueError(f"unknown init kind {kind!r}")
    return store.create(name, values)


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, weight), bias)


def init_mlp(store, prefix: str, widths: list[int], seed: int) -> None:
    """Parameters for an MLP given the full width chain [in, ..., out]."""
    for i, (w_in, w_out) in enumerate(zip(widths, widths[1:])):
        init_param(store, f"{prefix}.l{i}.w", (w_in, w_out), seed)
        init_param(store, f"{prefix}.l{i}.b", (w_out,), seed, kind="zeros")


def mlp_forward(x: Tensor, params, prefix: str) -> Tensor:
    """Affine+ReLU hidden layers, affine final layer; layer count from params."""
    n_layers = 0
    while f"{prefix}.l{n_layers}.w" in params:
        n_layers += 1
    if n_layers == 0:
        raise KeyError(f"no MLP parameters under prefix {prefix!r}")
    h = x
    for i in range(n_layers):
        h = affine(h, params[f"{prefix}.l{i}.w"].value, params[f"{prefix}.l{i}.b"].value)
        if i < n_layers - 1:
            h = ad.relu(h)
    return h
