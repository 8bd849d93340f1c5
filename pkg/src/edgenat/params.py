"""Parameter declarations and initialization."""

from __future__ import annotations

import zlib

import numpy as np

from .tensor import Tensor, trunc_normal


def norm_params(prefix: str, c: int) -> dict:
    return {f"{prefix}.weight": ("ones", (c,)), f"{prefix}.bias": ("zeros", (c,))}


def conv_params(prefix: str, c_in: int, c_out: int, k: int) -> dict:
    return {f"{prefix}.weight": ("normal", (c_out, c_in, k, k)), f"{prefix}.bias": ("zeros", (c_out,))}


def linear_params(prefix: str, n_in: int, n_out: int) -> dict:
    return {f"{prefix}.weight": ("normal", (n_out, n_in)), f"{prefix}.bias": ("zeros", (n_out,))}


def count(shapes: dict) -> int:
    return sum(int(np.prod(shape)) for _, shape in shapes.values())


def materialize(shapes: dict, seed: int) -> dict:
    """Draw initial arrays for ``{name: (kind, shape)}``.

    Weights are truncated normal (std 0.02), biases zero, norm scales one.
    Each name draws from its own seeded stream, so shared parameters are
    identical across builds that differ only in optional modules.
    """
    out = {}
    for name, (kind, shape) in shapes.items():
        if kind == "ones":
            out[name] = np.ones(shape, np.float32)
        elif kind == "zeros":
            out[name] = np.zeros(shape, np.float32)
        else:
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            out[name] = trunc_normal(rng, shape)
    return out


def as_parameters(arrays: dict, requires_grad: bool = True) -> dict:
    return {name: Tensor(arr, requires_grad=requires_grad) for name, arr in arrays.items()}
