"""Neighborhood and dilated neighborhood attention over 2-D token maps.

Each query attends to a k x k set of keys: the Cartesian product of two 1-D
windows. A 1-D window holds k positions spaced by the dilation and drawn from
the query's residue class modulo the dilation. Near the border the window
slides inward instead of shrinking, so every query sees exactly k keys per
axis.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .tensor import (
    ConfigurationError,
    DimensionError,
    Tensor,
    linear,
    make_op,
    reshape,
)

__all__ = [
    "AttentionParams",
    "neighbor_indices",
    "fit_window",
    "dina_forward",
    "na_forward",
]


def neighbor_indices(length: int, k: int, delta: int) -> np.ndarray:
    """Key positions for every query on a 1-D axis, shape ``[length, k]``.

    Interior queries get ``i + delta * (j - (k-1)//2)``. Near the ends the
    window shifts inward within the residue class of ``i`` mod ``delta``.
    """
    if k < 1 or delta < 1:
        raise ConfigurationError(f"need k >= 1 and delta >= 1, got k={k}, delta={delta}")
    if length < k:
        raise ConfigurationError(f"axis of length {length} cannot hold a window of {k}")
    if length < k * delta:
        # the smallest residue class has length // delta members
        raise ConfigurationError(
            f"axis of length {length} too short for k={k} at dilation {delta}"
        )
    i = np.arange(length)
    r = i % delta
    members = (length - r + delta - 1) // delta
    start = np.clip(i // delta - (k - 1) // 2, 0, members - k)
    return r[:, None] + delta * (start[:, None] + np.arange(k)[None, :])


def fit_window(length: int, k: int, delta: int) -> tuple:
    """Shrink ``(k, delta)`` so a window fits on an axis of ``length``.

    The kernel is capped at the axis length. The dilation is capped at
    ``(length-1)//(k-1)`` and further so every residue class holds k members.
    """
    k_eff = min(k, length)
    if k_eff <= 1:
        return k_eff, 1
    cap = min((length - 1) // (k_eff - 1), length // k_eff)
    return k_eff, max(1, min(delta, cap))


@dataclass
class AttentionParams:
    """Weights and geometry of one attention layer.

    ``rpb`` is the relative positional bias table ``[heads, 2k-1, 2k-1]``,
    indexed by the per-axis key offset divided by the dilation.
    """

    qkv_weight: Tensor
    qkv_bias: Tensor
    proj_weight: Tensor
    proj_bias: Tensor
    rpb: Tensor
    kernel_size: int
    heads: int
    dilation: int = 1
    scale_by_embed_dim: bool = False

    def __post_init__(self):
        k = self.kernel_size
        if k < 1 or k % 2 == 0:
            raise ConfigurationError(f"kernel size must be odd and positive, got {k}")
        if self.dilation < 1:
            raise ConfigurationError(f"dilation must be >= 1, got {self.dilation}")
        d = self.dim
        if d % self.heads:
            raise ConfigurationError(f"embedding dim {d} not divisible by {self.heads} heads")
        if self.qkv_weight.shape != (3 * d, d) or self.qkv_bias.shape != (3 * d,):
            raise DimensionError(f"qkv projection must map {d} -> {3 * d}")
        if self.proj_weight.shape != (d, d) or self.proj_bias.shape != (d,):
            raise DimensionError(f"output projection must map {d} -> {d}")
        if self.rpb.shape != (self.heads, 2 * k - 1, 2 * k - 1):
            raise DimensionError(f"rpb shape {self.rpb.shape} != {(self.heads, 2 * k - 1, 2 * k - 1)}")

    @property
    def dim(self) -> int:
        return self.proj_weight.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def with_dilation(self, dilation: int) -> "AttentionParams":
        return AttentionParams(
            self.qkv_weight, self.qkv_bias, self.proj_weight, self.proj_bias, self.rpb,
            self.kernel_size, self.heads, dilation, self.scale_by_embed_dim,
        )


@dataclass(frozen=True)
class _Geometry:
    neighbors: np.ndarray  # [N, K2] flat key index per query
    bias_index: np.ndarray  # [N, K2] flat index into the (2k-1)^2 table
    scatter: sp.csr_matrix  # [N, N*K2], sums gathered-key gradients back onto keys
    table_size: int


@functools.lru_cache(maxsize=128)
def _geometry(h: int, w: int, kh: int, kw: int, dh: int, dw: int, k_table: int) -> _Geometry:
    rows = neighbor_indices(h, kh, dh)
    cols = neighbor_indices(w, kw, dw)
    n = h * w
    k2 = kh * kw
    nbr = (rows[:, None, :, None] * w + cols[None, :, None, :]).reshape(n, k2)
    span = k_table - 1
    off_r = np.clip((rows - np.arange(h)[:, None]) // dh, -span, span) + span
    off_c = np.clip((cols - np.arange(w)[:, None]) // dw, -span, span) + span
    side = 2 * k_table - 1
    bias_index = (off_r[:, None, :, None] * side + off_c[None, :, None, :]).reshape(n, k2)
    scatter = sp.csr_matrix(
        (np.ones(n * k2), (nbr.reshape(-1), np.arange(n * k2))), shape=(n, n * k2)
    )
    for arr in (nbr, bias_index):
        arr.setflags(write=False)
    return _Geometry(nbr, bias_index, scatter, side * side)


def _attend(qkv: Tensor, rpb: Tensor, geom: _Geometry, heads: int, scale: float, keep: Optional[list]) -> Tensor:
    """Fused gather + softmax + weighted sum; ``qkv`` is ``[N, 3d]``, output ``[N, d]``."""
    n, d3 = qkv.shape
    d = d3 // 3
    dh = d // heads
    k2 = geom.neighbors.shape[1]
    parts = qkv.data.reshape(n, 3, heads, dh)
    q, k, v = parts[:, 0], parts[:, 1], parts[:, 2]
    kg = k[geom.neighbors]  # [N, K2, heads, dh]
    vg = v[geom.neighbors]
    table = rpb.data.reshape(heads, -1)
    bias = table[:, geom.bias_index].transpose(1, 0, 2)  # [N, heads, K2]
    logits = (np.einsum("nhd,njhd->nhj", q, kg) + bias) * scale
    logits -= logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    attn = (e / np.sum(e, axis=-1, keepdims=True, dtype=np.float64)).astype(qkv.data.dtype)
    out = np.einsum("nhj,njhd->nhd", attn, vg).reshape(n, d)
    if keep is not None:
        keep.append(attn)
    dt = qkv.data.dtype

    def backward(g):
        g = g.reshape(n, heads, dh)
        dattn = np.einsum("nhd,njhd->nhj", g, vg)
        dvg = np.einsum("nhj,nhd->njhd", attn, g)
        dz = attn * (dattn - np.sum(attn * dattn, axis=-1, keepdims=True))
        da = dz * scale
        dq = np.einsum("nhj,njhd->nhd", da, kg)
        dkg = np.einsum("nhj,nhd->njhd", da, q)
        dk = geom.scatter @ dkg.reshape(n * k2, d)
        dv = geom.scatter @ dvg.reshape(n * k2, d)
        dqkv = np.stack([dq.reshape(n, d), dk, dv], axis=1).reshape(n, 3 * d).astype(dt)
        idx = geom.bias_index.reshape(-1)
        drpb = np.stack(
            [
                np.bincount(idx, weights=da[:, hh, :].reshape(-1), minlength=geom.table_size)
                for hh in range(heads)
            ]
        )
        return dqkv, drpb.reshape(rpb.shape).astype(dt)

    return make_op(out, (qkv, rpb), backward, "neighborhood_attention")


def dina_forward(
    x: Tensor,
    params: AttentionParams,
    shrink_window: bool = True,
    weights_out: Optional[list] = None,
) -> Tensor:
    """Dilated neighborhood attention on a ``[H, W, d]`` token map.

    With ``shrink_window`` the kernel and dilation are fitted to small maps
    via :func:`fit_window`; otherwise an infeasible window raises
    :class:`ConfigurationError`. If ``weights_out`` is a list, the
    post-softmax weights ``[N, heads, K2]`` are appended to it.
    """
    if x.ndim != 3:
        raise DimensionError(f"expected [H,W,d] tokens, got {x.shape}")
    h, w, d = x.shape
    if d != params.dim:
        raise DimensionError(f"token dim {d} != attention dim {params.dim}")
    k, delta = params.kernel_size, params.dilation
    if shrink_window:
        kh, dh = fit_window(h, k, delta)
        kw, dw = fit_window(w, k, delta)
    else:
        kh = kw = k
        dh = dw = delta
    geom = _geometry(h, w, kh, kw, dh, dw, k)
    denom = d if params.scale_by_embed_dim else params.head_dim
    tokens = reshape(x, (h * w, d))
    qkv = linear(tokens, params.qkv_weight, params.qkv_bias)
    mixed = _attend(qkv, params.rpb, geom, params.heads, 1.0 / math.sqrt(denom), weights_out)
    return reshape(linear(mixed, params.proj_weight, params.proj_bias), (h, w, d))


def na_forward(x: Tensor, params: AttentionParams, shrink_window: bool = True) -> Tensor:
    """Neighborhood attention: the dilation-1 case of :func:`dina_forward`."""
    return dina_forward(x, params.with_dilation(1), shrink_window)
