"""Finite-difference gradient checks for the differentiable building blocks.

Each suite builds a random float64 instance per seed, projects the output
onto a fixed random direction to get a scalar, and compares the taped
gradient with central differences on a random subset of coordinates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .attention import AttentionParams, dina_forward
from .config import tiny_config
from .decoder import _scafm_shapes, decode, decoder_param_shapes, scafm_fuse
from .encoder import FeaturePyramid, dinat_block
from .loss import balanced_bce, binarize
from .params import linear_params, norm_params
from .tensor import Tensor, concat, frozen_routing, mul, precision, sigmoid, sum_all

EPS = 1e-3
TOLERANCE = 1e-3
# relative errors are measured against max(|analytic|, |numeric|, floor) where
# floor = max(FLOOR, REL_FLOOR * largest |analytic| entry of the same tensor)
FLOOR = 1e-6
REL_FLOOR = 1e-2
SUITES = ("attn", "scafm", "loss", "block", "decode")


@dataclass
class CheckResult:
    suite: str
    seed: int
    max_rel_error: float
    worst: str  # parameter holding the worst coordinate
    checked: int
    seconds: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: dict,
    rng: np.random.Generator,
    probes: int = 4,
    eps: float = EPS,
) -> tuple:
    """Compare taped and central-difference gradients of ``fn`` w.r.t. ``inputs``.

    Max reductions keep the argmax chosen at the unperturbed point, so the
    differences measure the piece whose gradient the tape computes even when
    a step of ``eps`` would cross a tie.

    ``inputs`` maps names to float64 tensors that ``fn`` reads; up to
    ``probes`` coordinates are tested per tensor. Returns
    ``(max relative error, name of worst tensor, coordinates checked)``.
    """
    for t in inputs.values():
        t.requires_grad = True
        t.grad = None
    with frozen_routing() as routes:
        out = fn()
    proj = rng.standard_normal(out.shape)

    def scalar() -> float:
        with frozen_routing(routes):
            return float(np.sum(fn().data * proj, dtype=np.float64))

    sum_all(mul(out, proj)).backward()
    worst, worst_name, n = 0.0, "", 0
    for name, t in inputs.items():
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(probes, flat.size), replace=False)
        numeric = np.empty(len(picks))
        for j, idx in enumerate(picks):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = scalar()
            flat[idx] = orig - eps
            down = scalar()
            flat[idx] = orig
            numeric[j] = (up - down) / (2 * eps)
        floor = max(FLOOR, REL_FLOOR * float(np.abs(grad).max()))
        err = relative_error(grad.reshape(-1)[picks], numeric, floor)
        n += len(picks)
        if err.max() > worst:
            worst, worst_name = float(err.max()), name
    return worst, worst_name, n


def _random_params(shapes: dict, rng: np.random.Generator, scale: float = 0.3) -> dict:
    out = {}
    for name, (kind, shape) in shapes.items():
        if kind == "ones":
            arr = 1.0 + 0.1 * rng.standard_normal(shape)
        elif kind == "zeros":
            arr = 0.1 * rng.standard_normal(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else 1
            arr = rng.standard_normal(shape) * min(scale, 1.5 / np.sqrt(fan_in))
        out[name] = Tensor(arr, dtype=np.float64)
    return out


def _attn_shapes(prefix: str, d: int, heads: int, k: int) -> dict:
    s = {}
    s.update(linear_params(f"{prefix}.qkv", d, 3 * d))
    s.update(linear_params(f"{prefix}.proj", d, d))
    s[f"{prefix}.rpb"] = ("normal", (heads, 2 * k - 1, 2 * k - 1))
    return s


def _attention(p: dict, prefix: str, k: int, heads: int, delta: int, embed_scale: bool) -> AttentionParams:
    return AttentionParams(
        p[f"{prefix}.qkv.weight"], p[f"{prefix}.qkv.bias"],
        p[f"{prefix}.proj.weight"], p[f"{prefix}.proj.bias"], p[f"{prefix}.rpb"],
        kernel_size=k, heads=heads, dilation=delta, scale_by_embed_dim=embed_scale,
    )


def _geometry_for(seed: int) -> tuple:
    """(H, W, k, delta) cycling through plain and dilated windows."""
    return [(6, 7, 3, 1), (7, 6, 3, 2), (8, 8, 3, 2), (6, 6, 5, 1)][seed % 4]


def attn_case(seed: int, rng: np.random.Generator) -> tuple:
    h, w, k, delta = _geometry_for(seed)
    d, heads = 8, 2
    p = _random_params(_attn_shapes("attn", d, heads, k), rng)
    x = Tensor(rng.standard_normal((h, w, d)), dtype=np.float64)
    attn = _attention(p, "attn", k, heads, delta, embed_scale=bool(seed % 2))
    return (lambda: dina_forward(x, attn, shrink_window=False)), {"x": x, **p}


def scafm_case(seed: int, rng: np.random.Generator) -> tuple:
    c_hi, c_lo = 6, 4
    p = _random_params(_scafm_shapes("s", c_hi, c_lo), rng)
    hi = Tensor(rng.standard_normal((c_hi, 3, 4)), dtype=np.float64)
    lo = Tensor(rng.standard_normal((c_lo, 6, 8)), dtype=np.float64)
    return (lambda: scafm_fuse(hi, lo, p, "s")), {"f_high": hi, "f_low": lo, **p}


def loss_case(seed: int, rng: np.random.Generator) -> tuple:
    shape = (1, 5 + seed % 3, 6)
    labels = (rng.random(shape) < 0.3).astype(np.float64)
    labels.reshape(-1)[0] = 1.0
    labels.reshape(-1)[1] = 0.0
    gt = binarize(labels * rng.uniform(0.5, 1.0, shape), eta=0.3 if seed % 2 else None)
    z = Tensor(rng.standard_normal(shape) * 2.0, dtype=np.float64)
    return (lambda: balanced_bce(sigmoid(z), gt)), {"logits": z}


def block_case(seed: int, rng: np.random.Generator) -> tuple:
    h, w, k, delta = _geometry_for(seed)
    d, heads = 8, 2
    shapes = _attn_shapes("b.attn", d, heads, k)
    shapes.update(norm_params("b.norm1", d))
    shapes.update(norm_params("b.norm2", d))
    shapes.update(linear_params("b.mlp.fc1", d, 2 * d))
    shapes.update(linear_params("b.mlp.fc2", 2 * d, d))
    p = _random_params(shapes, rng)
    x = Tensor(rng.standard_normal((h, w, d)), dtype=np.float64)
    attn = _attention(p, "b.attn", k, heads, delta, embed_scale=False)
    return (lambda: dinat_block(x, attn, p, "b")), {"x": x, **p}


def decode_case(seed: int, rng: np.random.Generator) -> tuple:
    cfg = tiny_config(
        head_dim=2,
        fusion_mode=("pre", "final")[seed % 2],
        use_ppm=seed % 4 >= 2,
        use_bottom_up=seed % 3 == 0,
    )
    p = _random_params(decoder_param_shapes(cfg), rng)
    c = cfg.base_dim
    feats = [Tensor(rng.standard_normal((8 >> i, 8 >> i, c << i)), dtype=np.float64) for i in range(4)]
    pyramid = FeaturePyramid(*feats)

    def fn():
        out = decode(pyramid, p, cfg, (32, 32))
        return concat([out.edge, *out.sides], 0)

    return fn, {**{f"e{i + 1}": f for i, f in enumerate(feats)}, **p}


CASES = {
    "attn": (attn_case, 12),
    "scafm": (scafm_case, 4),
    "loss": (loss_case, 30),
    "block": (block_case, 8),
    "decode": (decode_case, 2),
}


def run_suite(suite: str, seeds: int = 20, probes: Optional[int] = None) -> list:
    """Check ``seeds`` random instances of one suite; returns a list of :class:`CheckResult`."""
    if suite not in CASES:
        raise ValueError(f"unknown gradcheck suite {suite!r}; choose from {SUITES}")
    build, default_probes = CASES[suite]
    results = []
    with precision(np.float64):
        for seed in range(seeds):
            t0 = time.perf_counter()
            rng = np.random.default_rng([seed, 911])
            fn, inputs = build(seed, rng)
            err, name, n = check_gradients(fn, inputs, rng, probes=probes or default_probes)
            results.append(CheckResult(suite, seed, err, name, n, time.perf_counter() - t0))
    return results


def run(suites=SUITES, seeds: int = 20) -> list:
    out = []
    for s in suites:
        out.extend(run_suite(s, seeds))
    return out
