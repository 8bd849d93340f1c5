"""Four-level hierarchical DiNAT backbone.

Tokens live in ``[H, W, C]`` layout inside the encoder; convolutions run on
``[C, H, W]`` and are wrapped with transposes.
"""

from __future__ import annotations

from dataclasses import dataclass

from .attention import AttentionParams, dina_forward
from .config import ModelConfig
from .params import conv_params, linear_params, norm_params
from .tensor import (
    ContractError,
    Tensor,
    conv2d,
    gelu,
    layer_norm,
    linear,
    transpose,
)

__all__ = [
    "FeaturePyramid",
    "encoder_param_shapes",
    "tokenizer",
    "downsample",
    "dinat_block",
    "encoder_forward",
]


@dataclass
class FeaturePyramid:
    """Encoder outputs at strides 4/8/16/32, each ``[H, W, C]``."""

    e1: Tensor
    e2: Tensor
    e3: Tensor
    e4: Tensor

    def __iter__(self):
        return iter((self.e1, self.e2, self.e3, self.e4))


def encoder_param_shapes(cfg: ModelConfig) -> dict:
    """Map of parameter name to ``(init kind, shape)`` for the backbone."""
    c = cfg.base_dim
    k = cfg.kernel_size
    shapes = {}
    shapes.update(conv_params("enc.tokenizer.conv1", 3, c // 2, 3))
    shapes.update(norm_params("enc.tokenizer.norm1", c // 2))
    shapes.update(conv_params("enc.tokenizer.conv2", c // 2, c, 3))
    shapes.update(norm_params("enc.tokenizer.norm2", c))
    for lvl in range(4):
        ch, heads, hid = cfg.channels[lvl], cfg.heads[lvl], cfg.hidden(lvl)
        for b in range(cfg.layers[lvl]):
            p = f"enc.level{lvl + 1}.block{b}"
            shapes.update(norm_params(f"{p}.norm1", ch))
            shapes.update(linear_params(f"{p}.attn.qkv", ch, 3 * ch))
            shapes.update(linear_params(f"{p}.attn.proj", ch, ch))
            shapes[f"{p}.attn.rpb"] = ("normal", (heads, 2 * k - 1, 2 * k - 1))
            shapes.update(norm_params(f"{p}.norm2", ch))
            shapes.update(linear_params(f"{p}.mlp.fc1", ch, hid))
            shapes.update(linear_params(f"{p}.mlp.fc2", hid, ch))
        shapes.update(norm_params(f"enc.level{lvl + 1}.norm", ch))
        if lvl < 3:
            shapes.update(conv_params(f"enc.down{lvl + 1}.conv", ch, 2 * ch, 3))
            shapes.update(norm_params(f"enc.down{lvl + 1}.norm", 2 * ch))
    return shapes


def _hwc_to_chw(x: Tensor) -> Tensor:
    return transpose(x, (2, 0, 1))


def _chw_to_hwc(x: Tensor) -> Tensor:
    return transpose(x, (1, 2, 0))


def _ln(x: Tensor, params: dict, prefix: str) -> Tensor:
    return layer_norm(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"])


def tokenizer(image: Tensor, params: dict, cfg: ModelConfig) -> Tensor:
    """Two stride-2 3x3 convolutions: ``[3, h, w]`` -> ``[h/4, w/4, c]``."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ContractError(f"expected a [3,h,w] image, got {image.shape}")
    _, h, w = image.shape
    if h % 32 or w % 32:
        raise ContractError(f"image {h}x{w} must be padded to a multiple of 32")
    p = "enc.tokenizer"
    y = conv2d(image, params[f"{p}.conv1.weight"], params[f"{p}.conv1.bias"], stride=2, padding=1)
    y = gelu(_ln(_chw_to_hwc(y), params, f"{p}.norm1"))
    y = conv2d(_hwc_to_chw(y), params[f"{p}.conv2.weight"], params[f"{p}.conv2.bias"], stride=2, padding=1)
    return _ln(_chw_to_hwc(y), params, f"{p}.norm2")


def downsample(x: Tensor, params: dict, prefix: str) -> Tensor:
    """Stride-2 3x3 convolution doubling channels, then layer norm."""
    h, w, _ = x.shape
    if h % 2 or w % 2:
        raise ContractError(f"downsample needs even spatial dims, got {h}x{w}")
    y = conv2d(_hwc_to_chw(x), params[f"{prefix}.conv.weight"], params[f"{prefix}.conv.bias"], stride=2, padding=1)
    return _ln(_chw_to_hwc(y), params, f"{prefix}.norm")


def block_attention(params: dict, prefix: str, cfg: ModelConfig, level: int, delta: int) -> AttentionParams:
    a = f"{prefix}.attn"
    return AttentionParams(
        qkv_weight=params[f"{a}.qkv.weight"],
        qkv_bias=params[f"{a}.qkv.bias"],
        proj_weight=params[f"{a}.proj.weight"],
        proj_bias=params[f"{a}.proj.bias"],
        rpb=params[f"{a}.rpb"],
        kernel_size=cfg.kernel_size,
        heads=cfg.heads[level],
        dilation=delta,
        scale_by_embed_dim=cfg.scale_by_embed_dim,
    )


def dinat_block(x: Tensor, attn: AttentionParams, params: dict, prefix: str) -> Tensor:
    """Pre-norm transformer block: attention residual, then MLP residual."""
    x = x + dina_forward(_ln(x, params, f"{prefix}.norm1"), attn)
    h = _ln(x, params, f"{prefix}.norm2")
    h = gelu(linear(h, params[f"{prefix}.mlp.fc1.weight"], params[f"{prefix}.mlp.fc1.bias"]))
    return x + linear(h, params[f"{prefix}.mlp.fc2.weight"], params[f"{prefix}.mlp.fc2.bias"])


def encoder_forward(image: Tensor, cfg: ModelConfig, params: dict) -> FeaturePyramid:
    x = tokenizer(image, params, cfg)
    outs = []
    for lvl in range(4):
        for b, delta in enumerate(cfg.dilations[lvl]):
            prefix = f"enc.level{lvl + 1}.block{b}"
            x = dinat_block(x, block_attention(params, prefix, cfg, lvl, delta), params, prefix)
        outs.append(_ln(x, params, f"enc.level{lvl + 1}.norm"))
        if lvl < 3:
            x = downsample(x, params, f"enc.down{lvl + 1}")
    return FeaturePyramid(*outs)

