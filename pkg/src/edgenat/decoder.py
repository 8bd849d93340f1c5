"""SCAF-MLA decoder: SCAFM cascade, fusion head and side-map heads.

All decoder tensors are ``[C, H, W]``. Cascade wiring::

    X3 = SCAFM(high=E4, low=E3)      stride 16, 4c
    X2 = SCAFM(high=X3, low=E2)      stride 8,  2c
    X1 = SCAFM(high=X2, low=E1)      stride 4,  c
    X0 = conv3x3(E1)                 stride 4,  c
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .config import ModelConfig
from .encoder import FeaturePyramid
from .params import conv_params
from .tensor import (
    ConfigurationError,
    DimensionError,
    Tensor,
    adaptive_avg_pool,
    bilinear_resize,
    concat,
    conv2d,
    gelu,
    global_avg_max_pool,
    reduce_channel_mean_max,
    sigmoid,
    sub,
    transpose,
)

__all__ = [
    "DecoderOutputs",
    "decoder_param_shapes",
    "sam_weights",
    "cam_weights",
    "scafm_fuse",
    "ppm",
    "bottom_up_path",
    "decode",
]

PPM_BINS = (1, 2, 3, 6)


@dataclass
class DecoderOutputs:
    features: tuple  # X0..X3
    sides: tuple  # S1..S4, each [1, h, w]
    edge: Tensor  # [1, h, w]


def _scafm_shapes(prefix: str, c_hi: int, c_lo: int) -> dict:
    s = {}
    s.update(conv_params(f"{prefix}.lift", c_lo, c_hi, 3))
    s.update(conv_params(f"{prefix}.sam", 4, 1, 3))
    s.update(conv_params(f"{prefix}.cam", 4 * c_hi, c_hi, 1))
    s.update(conv_params(f"{prefix}.sc", 2 * c_hi, c_lo, 3))
    s.update(conv_params(f"{prefix}.high", c_hi, c_lo, 3))
    s.update(conv_params(f"{prefix}.out", 3 * c_lo, c_lo, 3))
    return s


def feature_channels(cfg: ModelConfig) -> tuple:
    c = cfg.base_dim
    return (c, c, 2 * c, 4 * c)


def ladder_channels(c_in: int, c: int, steps: int) -> list:
    """Channel sequence for ``steps`` 3x3 convs halving ``c_in`` down to ``c``."""
    seq = [c_in]
    for _ in range(steps):
        seq.append(max(seq[-1] // 2, c))
    if seq[-1] != c:
        raise ConfigurationError(f"{steps} halving convs cannot take {c_in} channels to {c}")
    return seq


def decoder_param_shapes(cfg: ModelConfig) -> dict:
    """Parameters for the configured decoder; optional modules only when enabled."""
    ch = cfg.channels
    c = cfg.base_dim
    xs = feature_channels(cfg)
    s = {}
    for n in (3, 2, 1):
        s.update(_scafm_shapes(f"dec.scafm{n}", ch[n], ch[n - 1]))
    s.update(conv_params("dec.x0", c, c, 3))
    if cfg.fusion_mode == "pre":
        for i in (1, 2, 3):
            seq = ladder_channels(xs[i], c, i)
            for j in range(i):
                s.update(conv_params(f"dec.prefusion.ladder{i}.conv{j}", seq[j], seq[j + 1], 3))
        s.update(conv_params("dec.prefusion.fuse1", 4 * c, c, 3))
        s.update(conv_params("dec.prefusion.fuse2", c, c, 3))
        s.update(conv_params("dec.prefusion.fuse3", c, 1, 1))
    else:
        for i in range(4):
            s.update(conv_params(f"dec.finalfusion.reduce{i}", xs[i], 1, 1))
        s.update(conv_params("dec.finalfusion.fuse", 4, 1, 1))
    for i in range(4):
        s.update(conv_params(f"dec.side{i + 1}.conv3", xs[i], c, 3))
        s.update(conv_params(f"dec.side{i + 1}.conv1", c, 1, 1))
    if cfg.use_ppm:
        top = ch[3]
        for b in PPM_BINS:
            s.update(conv_params(f"dec.ppm.bin{b}", top, top // 4, 1))
        s.update(conv_params("dec.ppm.fuse", top + len(PPM_BINS) * (top // 4), top, 1))
    if cfg.use_bottom_up:
        for i in (1, 2, 3):
            s.update(conv_params(f"dec.bottomup{i}", xs[i - 1], xs[i], 3))
    return s


def _conv(x: Tensor, params: dict, prefix: str, stride: int = 1, act: bool = False) -> Tensor:
    w = params[f"{prefix}.weight"]
    y = conv2d(x, w, params[f"{prefix}.bias"], stride=stride, padding=w.shape[-1] // 2)
    return gelu(y) if act else y


def _check_pair(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: inputs differ in shape, {a.shape} vs {b.shape}")


def sam_weights(f_up: Tensor, f_conv: Tensor, params: dict, prefix: str) -> Tensor:
    """Spatial weights ``[1, H, W]`` from channel-wise mean/max of both inputs."""
    _check_pair("sam_weights", f_up, f_conv)
    mu_up, mx_up = reduce_channel_mean_max(f_up)
    mu_cv, mx_cv = reduce_channel_mean_max(f_conv)
    return sigmoid(_conv(concat([mu_up, mx_up, mu_cv, mx_cv], 0), params, f"{prefix}.sam"))


def cam_weights(f_up: Tensor, f_conv: Tensor, params: dict, prefix: str) -> Tensor:
    """Channel weights ``[C, 1, 1]`` from global average/max pools of both inputs."""
    _check_pair("cam_weights", f_up, f_conv)
    av_up, mx_up = global_avg_max_pool(f_up)
    av_cv, mx_cv = global_avg_max_pool(f_conv)
    return sigmoid(_conv(concat([av_up, mx_up, av_cv, mx_cv], 0), params, f"{prefix}.cam"))


def _blend(f_up: Tensor, f_conv: Tensor, alpha: Tensor) -> Tensor:
    return f_up * alpha + f_conv * sub(1.0, alpha)


def scafm_fuse(
    f_high: Tensor,
    f_low: Tensor,
    params: dict,
    prefix: str,
    alpha_sp: Optional[Tensor] = None,
    alpha_ch: Optional[Tensor] = None,
    trace: Optional[dict] = None,
) -> Tensor:
    """Fuse an upper-level map ``[C_hi, H/2, W/2]`` into ``[C_lo, H, W]``.

    ``alpha_sp`` / ``alpha_ch`` replace the learned attention weights when
    given. ``trace`` (a dict) receives the intermediate maps by name.
    """
    _, h, w = f_low.shape
    if f_high.shape[1] * 2 != h or f_high.shape[2] * 2 != w:
        raise DimensionError(f"scafm: high {f_high.shape} is not half the size of low {f_low.shape}")
    f_up = bilinear_resize(f_high, h, w)
    f_conv = _conv(f_low, params, f"{prefix}.lift", act=True)
    if alpha_sp is None:
        alpha_sp = sam_weights(f_up, f_conv, params, prefix)
    if alpha_ch is None:
        alpha_ch = cam_weights(f_up, f_conv, params, prefix)
    f_sp = _blend(f_up, f_conv, alpha_sp)
    f_ch = _blend(f_up, f_conv, alpha_ch)
    f_sc = _conv(concat([f_sp, f_ch], 0), params, f"{prefix}.sc", act=True)
    f_h = bilinear_resize(_conv(f_high, params, f"{prefix}.high", act=True), h, w)
    out = _conv(concat([f_sc, f_h, f_low], 0), params, f"{prefix}.out", act=True)
    if trace is not None:
        trace.update(f_up=f_up, f_conv=f_conv, alpha_sp=alpha_sp, alpha_ch=alpha_ch,
                     f_sp=f_sp, f_ch=f_ch, f_sc=f_sc, f_h=f_h)
    return out


def ppm(x: Tensor, params: dict, prefix: str = "dec.ppm") -> Tensor:
    """Pyramid pooling over bins (1, 2, 3, 6); output has the input's shape."""
    _, h, w = x.shape
    branches = [x]
    for b in PPM_BINS:
        pooled = adaptive_avg_pool(x, b, b)
        branches.append(bilinear_resize(_conv(pooled, params, f"{prefix}.bin{b}", act=True), h, w))
    return _conv(concat(branches, 0), params, f"{prefix}.fuse", act=True)


def bottom_up_path(features, params: dict, enabled: bool = True) -> tuple:
    """Low-to-high refinement: ``X'_{i+1} = X_{i+1} + conv(X'_i)``."""
    features = tuple(features)
    if not enabled:
        return features
    out = [features[0]]
    for i in (1, 2, 3):
        stride = out[-1].shape[1] // features[i].shape[1]
        out.append(features[i] + _conv(out[-1], params, f"dec.bottomup{i}", stride=stride))
    return tuple(out)


def _head(x: Tensor, params: dict, prefix: str, h: int, w: int) -> Tensor:
    y = _conv(_conv(x, params, f"{prefix}.conv3", act=True), params, f"{prefix}.conv1")
    return sigmoid(bilinear_resize(y, h, w))


def _pre_fusion(xs, params: dict, out_h: int, out_w: int) -> Tensor:
    _, h0, w0 = xs[0].shape
    parts = [xs[0]]
    for i in (1, 2, 3):
        y = xs[i]
        for j in range(i):
            y = _conv(y, params, f"dec.prefusion.ladder{i}.conv{j}", act=True)
        parts.append(bilinear_resize(y, h0, w0))
    y = _conv(concat(parts, 0), params, "dec.prefusion.fuse1", act=True)
    y = _conv(y, params, "dec.prefusion.fuse2", act=True)
    y = _conv(y, params, "dec.prefusion.fuse3")
    return sigmoid(bilinear_resize(y, out_h, out_w))


def _final_fusion(xs, params: dict, out_h: int, out_w: int) -> Tensor:
    _, h0, w0 = xs[0].shape
    parts = [bilinear_resize(_conv(x, params, f"dec.finalfusion.reduce{i}"), h0, w0) for i, x in enumerate(xs)]
    y = _conv(concat(parts, 0), params, "dec.finalfusion.fuse")
    return sigmoid(bilinear_resize(y, out_h, out_w))


def decode(pyramid: FeaturePyramid, params: dict, cfg: ModelConfig, out_size: tuple) -> DecoderOutputs:
    """Run the decoder on an encoder pyramid; edge maps come out at ``out_size``."""
    e1, e2, e3, e4 = (transpose(e, (2, 0, 1)) for e in pyramid)
    if cfg.use_ppm:
        e4 = ppm(e4, params)
    x3 = scafm_fuse(e4, e3, params, "dec.scafm3")
    x2 = scafm_fuse(x3, e2, params, "dec.scafm2")
    x1 = scafm_fuse(x2, e1, params, "dec.scafm1")
    x0 = _conv(e1, params, "dec.x0", act=True)
    xs = bottom_up_path((x0, x1, x2, x3), params, cfg.use_bottom_up)
    h, w = out_size
    fuse = _pre_fusion if cfg.fusion_mode == "pre" else _final_fusion
    edge = fuse(xs, params, h, w)
    sides = tuple(_head(x, params, f"dec.side{i + 1}", h, w) for i, x in enumerate(xs))
    return DecoderOutputs(features=xs, sides=sides, edge=edge)
