"""Dense tensors with tape-based reverse-mode differentiation.

Storage is binary32 by default. Reductions accumulate in binary64 and cast
back. :func:`precision` switches the default dtype, which the gradient-check
harness uses to run finite differences in binary64.
"""

from __future__ import annotations

import contextlib
import functools
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf, expit

__all__ = [
    "Tensor",
    "DimensionError",
    "ContractError",
    "ConfigurationError",
    "NonFiniteError",
    "precision",
    "get_dtype",
    "make_op",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "linear",
    "conv2d",
    "bilinear_resize",
    "adaptive_avg_pool",
    "separable_map",
    "reduce_channel_mean_max",
    "global_avg_max_pool",
    "softmax",
    "sigmoid",
    "relu",
    "gelu",
    "log",
    "clip",
    "layer_norm",
    "concat",
    "reshape",
    "transpose",
    "sum_all",
    "mean_all",
    "trunc_normal",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class ConfigurationError(ValueError):
    """A configuration value is invalid or infeasible."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


_DTYPE = np.float32
CHECK_FINITE = True


def get_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


class Tensor:
    """N-dimensional array with an optional gradient buffer.

    A tensor produced by an op keeps references to its parents and a closure
    computing their gradients; that pair is the tape node.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.size == 0:
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        """Populate ``grad`` on every leaf that requires it.

        Gradients accumulate into existing buffers, so calling this twice
        without zeroing doubles them.
        """
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {self.shape}")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise DimensionError(
                        f"{node.op}: gradient shape {pg.shape} != input shape {parent.shape}"
                    )
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of an op over ``parents``.

    ``backward`` maps the output gradient to a tuple with one entry (array or
    None) per parent.
    """
    dtype = parents[0].data.dtype if parents else _DTYPE
    out = Tensor.__new__(Tensor)
    arr = np.asarray(data, dtype=dtype)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if CHECK_FINITE and not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out.data = arr
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return make_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return make_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return make_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return make_op(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (cdf + x.data * pdf),)

    return make_op(x.data * cdf, (x,), backward, "gelu")


def log(x: Tensor) -> Tensor:
    return make_op(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is zero where clamping was active."""
    inside = (x.data >= lo) & (x.data <= hi)
    return make_op(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


# ------------------------------------------------------------------- shapes


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from None
    return make_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_op(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: (g.transpose(inverse),),
        "transpose",
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return make_op(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


# --------------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    total = np.sum(x.data, dtype=np.float64)
    return make_op(
        np.array([total]), (x,), lambda g: (np.full(x.shape, g[0], dtype=x.data.dtype),), "sum"
    )


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    total = np.sum(x.data, dtype=np.float64) / n
    return make_op(
        np.array([total]),
        (x,),
        lambda g: (np.full(x.shape, g[0] / n, dtype=x.data.dtype),),
        "mean",
    )


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = (e / np.sum(e, axis=axis, keepdims=True, dtype=np.float64)).astype(x.data.dtype)

    def backward(g):
        dot = np.sum(g * s, axis=axis, keepdims=True, dtype=np.float64)
        return ((s * (g - dot)).astype(x.data.dtype),)

    return make_op(s, (x,), backward, "softmax")


def _check_chw(op: str, x: Tensor) -> None:
    if x.ndim != 3:
        raise DimensionError(f"{op}: expected [C,H,W], got {x.shape}")


class _Routing:
    def __init__(self):
        self.record: Optional[list] = None
        self.replay: Optional[list] = None


_ROUTING = _Routing()


@contextlib.contextmanager
def frozen_routing(recorded: Optional[list] = None):
    """Record, or replay, the argmax choices of max reductions.

    Without an argument the argmaxes picked inside the block are appended to
    the yielded list. Passing that list back replays them in call order, so
    a perturbed forward pass stays on the same piece of a piecewise-smooth
    function. Used by finite-difference checks.
    """
    prev = (_ROUTING.record, _ROUTING.replay)
    if recorded is None:
        recorded = []
        _ROUTING.record, _ROUTING.replay = recorded, None
    else:
        _ROUTING.record, _ROUTING.replay = None, list(recorded)
    try:
        yield recorded
    finally:
        _ROUTING.record, _ROUTING.replay = prev


def _argmax(values: np.ndarray, axis: int) -> np.ndarray:
    if _ROUTING.replay is not None:
        return _ROUTING.replay.pop(0)
    arg = np.argmax(values, axis=axis)
    if _ROUTING.record is not None:
        _ROUTING.record.append(arg)
    return arg


def reduce_channel_mean_max(x: Tensor) -> tuple:
    """Per-pixel mean and max over channels, each shaped ``[1,H,W]``.

    The max gradient goes to the lowest-index maximizer.
    """
    _check_chw("reduce_channel_mean_max", x)
    c = x.shape[0]
    mean = np.mean(x.data, axis=0, keepdims=True, dtype=np.float64)
    mean_t = make_op(
        mean, (x,), lambda g: (np.broadcast_to(g / c, x.shape).astype(x.data.dtype),), "channel_mean"
    )
    arg = _argmax(x.data, 0)[None]
    mx = np.take_along_axis(x.data, arg, axis=0)

    def max_backward(g):
        out = np.zeros_like(x.data)
        np.put_along_axis(out, arg, g, axis=0)
        return (out,)

    return mean_t, make_op(mx, (x,), max_backward, "channel_max")


def global_avg_max_pool(x: Tensor) -> tuple:
    """Spatial mean and max per channel, each shaped ``[C,1,1]``."""
    _check_chw("global_avg_max_pool", x)
    c, h, w = x.shape
    flat = x.data.reshape(c, h * w)
    avg = np.mean(flat, axis=1, dtype=np.float64).reshape(c, 1, 1)
    avg_t = make_op(
        avg,
        (x,),
        lambda g: (np.broadcast_to(g / (h * w), x.shape).astype(x.data.dtype),),
        "avg_pool",
    )
    arg = _argmax(flat, 1)
    mx = flat[np.arange(c), arg].reshape(c, 1, 1)

    def max_backward(g):
        out = np.zeros((c, h * w), dtype=x.data.dtype)
        out[np.arange(c), arg] = g.reshape(c)
        return (out.reshape(x.shape),)

    return avg_t, make_op(mx, (x,), max_backward, "max_pool")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply the affine ``gamma``, ``beta``."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm: affine shape must be ({c},)")
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    centered = x64 - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    dt = x.data.dtype

    def backward(g):
        g64 = g.astype(np.float64)
        gxhat = g64 * gamma.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * np.mean(gxhat * xhat, axis=-1, keepdims=True)
        )
        lead = tuple(range(x.ndim - 1))
        return (
            gx.astype(dt),
            np.sum(g64 * xhat, axis=lead).astype(dt),
            np.sum(g64, axis=lead).astype(dt),
        )

    return make_op(xhat * gamma.data + beta.data, (x, gamma, beta), backward, "layer_norm")


# ------------------------------------------------------------- linear maps


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_op(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; weight is ``[out, in]``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}")
    n_out, n_in = weight.shape
    if bias is not None and bias.shape != (n_out,):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({n_out},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, n_out)
        grads = [g @ weight.data, g2.T @ x.data.reshape(-1, n_in)]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return make_op(out, parents, backward, "linear")


def conv2d(
    x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """2-D cross-correlation of ``[C_in,H,W]`` with ``[C_out,C_in,kh,kw]``, zero padding."""
    _check_chw("conv2d", x)
    if weight.ndim != 4 or weight.shape[1] != x.shape[0]:
        raise DimensionError(f"conv2d: input {x.shape} vs weight {weight.shape}")
    c_out, c_in, kh, kw = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    _, h, w = x.shape
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise DimensionError(f"conv2d: padded input {h}x{w} smaller than kernel {kh}x{kw}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    cols = windows[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # [C_in, kh, kw, Ho, Wo] -> [C_in*kh*kw, Ho*Wo]
    cols2 = np.ascontiguousarray(cols.transpose(0, 3, 4, 1, 2)).reshape(c_in * kh * kw, ho * wo)
    w2 = weight.data.reshape(c_out, -1)
    out = (w2 @ cols2).reshape(c_out, ho, wo)
    if bias is not None:
        out = out + bias.data[:, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(c_out, ho * wo)
        gw = (g2 @ cols2.T).reshape(weight.shape)
        gcols = (w2.T @ g2).reshape(c_in, kh, kw, ho, wo)
        gxp = np.zeros(xp.shape, dtype=x.data.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += gcols[:, i, j]
        gx = gxp[:, padding : padding + h, padding : padding + w] if padding else gxp
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g2.sum(axis=1))
        return tuple(grads)

    return make_op(out, parents, backward, "conv2d")


def separable_map(x: Tensor, rows: np.ndarray, cols: np.ndarray, op: str = "separable_map") -> Tensor:
    """Apply fixed matrices along H and W: ``out[c] = rows @ x[c] @ cols.T``."""
    _check_chw(op, x)
    if rows.shape[1] != x.shape[1] or cols.shape[1] != x.shape[2]:
        raise DimensionError(f"{op}: maps {rows.shape}, {cols.shape} vs input {x.shape}")
    rows = rows.astype(x.data.dtype, copy=False)
    cols = cols.astype(x.data.dtype, copy=False)
    out = rows @ x.data @ cols.T
    return make_op(out, (x,), lambda g: (rows.T @ g @ cols,), op)


@functools.lru_cache(maxsize=256)
def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation weights for half-pixel-center sampling (align_corners=False)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == n_out:
        np.fill_diagonal(m, 1.0)
        return m
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        m[o, i0] += 1.0 - t
        m[o, i1] += t
    m.setflags(write=False)
    return m


@functools.lru_cache(maxsize=256)
def _adaptive_pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for o in range(n_out):
        start = (o * n_in) // n_out
        stop = -((-(o + 1) * n_in) // n_out)
        m[o, start:stop] = 1.0 / (stop - start)
    m.setflags(write=False)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"bilinear_resize: output size {out_h}x{out_w} must be positive")
    _check_chw("bilinear_resize", x)
    _, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return make_op(x.data.copy(), (x,), lambda g: (g,), "bilinear_resize")
    return separable_map(x, _bilinear_matrix(h, out_h), _bilinear_matrix(w, out_w), "bilinear_resize")


def adaptive_avg_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    _check_chw("adaptive_avg_pool", x)
    _, h, w = x.shape
    return separable_map(
        x, _adaptive_pool_matrix(h, out_h), _adaptive_pool_matrix(w, out_w), "adaptive_avg_pool"
    )


# ----------------------------------------------------------------------- init


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal samples redrawn until they fall within two standard deviations."""
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return (z * std).astype(_DTYPE)
