"""Boundary evaluation: NMS thinning, tolerance matching, ODS/OIS sweeps."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching
from scipy.spatial import cKDTree

from .config import EvalConfig
from .loss import GroundTruth
from .tensor import ContractError, DimensionError, Tensor, bilinear_resize

logger = logging.getLogger(__name__)

__all__ = [
    "nms_thin",
    "match_boundaries",
    "candidate_pairs",
    "EvalReport",
    "ods_ois",
    "multiscale_infer",
    "f_measure",
]

NMS_SIGMA = 1.0


def _plane(x) -> np.ndarray:
    arr = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise DimensionError(f"expected a [1,h,w] map, got {arr.shape}")
        arr = arr[0]
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-d map, got {arr.shape}")
    return arr


def edge_orientation(smoothed: np.ndarray) -> np.ndarray:
    """Direction of the edge normal in [0, pi), from second derivatives."""
    oy, ox = np.gradient(smoothed)
    _, oxx = np.gradient(ox)
    oyy, oxy = np.gradient(oy)
    # sign(0) must not zero the ratio, or exactly horizontal ridges read as vertical
    sgn = np.where(oxy > 0, -1.0, 1.0)
    return np.mod(np.arctan(oyy * sgn / (oxx + 1e-5)), np.pi)


def _nms_pass(e: np.ndarray) -> np.ndarray:
    s = ndimage.gaussian_filter(e, NMS_SIGMA, mode="nearest")
    theta = edge_orientation(s)
    ys, xs = np.nonzero(e)
    if ys.size == 0:
        return e.copy()
    c, sn = np.cos(theta[ys, xs]), np.sin(theta[ys, xs])
    keep = np.ones(ys.size, bool)
    v, vs = e[ys, xs], s[ys, xs]
    for d in (-1.0, 1.0):
        coords = np.stack([ys + d * sn, xs + d * c])
        ne = ndimage.map_coordinates(e, coords, order=1, mode="nearest")
        ns = ndimage.map_coordinates(s, coords, order=1, mode="nearest")
        tie = np.isclose(v, ne, rtol=1e-6, atol=1e-12)
        # a plateau along the normal keeps only the sample where the smoothed map peaks
        keep &= np.where(tie, vs >= ns, v > ne)
    out = np.zeros_like(e)
    out[ys[keep], xs[keep]] = v[keep]
    return out


def nms_thin(edge_prob):
    """Keep only pixels that are maximal along the local edge normal.

    The orientation comes from second derivatives of the map smoothed with
    a sigma-1 Gaussian; the two comparison samples at distance 1 along the
    normal are bilinearly interpolated. Passes repeat until nothing more is
    suppressed, so the result is a fixed point and thinning is idempotent.
    Returns the same container type and shape as the input.
    """
    e = _plane(edge_prob)
    while True:
        out = _nms_pass(e)
        if np.count_nonzero(out) == np.count_nonzero(e):
            break
        e = out
    if isinstance(edge_prob, Tensor):
        return Tensor(out.reshape(edge_prob.shape), dtype=edge_prob.data.dtype)
    return out.reshape(np.shape(edge_prob)).astype(np.asarray(edge_prob).dtype, copy=False)


# ----------------------------------------------------------------- matching


def candidate_pairs(pred_pts: np.ndarray, gt_pts: np.ndarray, radius: float) -> tuple:
    """All (pred index, gt index, distance) with distance <= radius, sorted by distance."""
    if len(pred_pts) == 0 or len(gt_pts) == 0:
        e = np.zeros(0, np.int64)
        return e, e.copy(), np.zeros(0)
    dm = cKDTree(pred_pts).sparse_distance_matrix(cKDTree(gt_pts), radius, output_type="coo_matrix")
    i, j, d = dm.row.astype(np.int64), dm.col.astype(np.int64), dm.data
    order = np.lexsort((j, i, d))
    return i[order], j[order], d[order]


def greedy_match(pi: np.ndarray, gj: np.ndarray, n_pred: int, n_gt: int) -> int:
    """Consume distance-sorted pairs, each pixel at most once; returns the match count."""
    used_p = np.zeros(n_pred, bool)
    used_g = np.zeros(n_gt, bool)
    tp = 0
    for a, b in zip(pi.tolist(), gj.tolist()):
        if not used_p[a] and not used_g[b]:
            used_p[a] = used_g[b] = True
            tp += 1
    return tp


def exact_match(pi: np.ndarray, gj: np.ndarray, n_pred: int, n_gt: int) -> int:
    """Size of a maximum bipartite matching over the candidate pairs."""
    if len(pi) == 0:
        return 0
    graph = csr_matrix((np.ones(len(pi)), (pi, gj)), shape=(n_pred, n_gt))
    return int((maximum_bipartite_matching(graph, perm_type="column") >= 0).sum())


_MATCHERS = {"greedy": greedy_match, "exact": exact_match}


def tolerance_radius(shape: tuple, max_dist: float) -> float:
    h, w = shape
    return max_dist * float(np.hypot(h, w))


def match_boundaries(pred_binary, gt_binary, max_dist: float, matcher: str = "greedy") -> tuple:
    """One-to-one matching of edge pixels within ``max_dist`` of the diagonal.

    Returns ``(tp, fp, fn)``.
    """
    p, g = _plane(pred_binary) > 0, _plane(gt_binary) > 0
    if p.shape != g.shape:
        raise DimensionError(f"prediction {p.shape} vs ground truth {g.shape}")
    if matcher not in _MATCHERS:
        raise ContractError(f"unknown matcher {matcher!r}")
    pp, gp = np.argwhere(p), np.argwhere(g)
    pi, gj, _ = candidate_pairs(pp, gp, tolerance_radius(p.shape, max_dist))
    tp = _MATCHERS[matcher](pi, gj, len(pp), len(gp))
    return tp, len(pp) - tp, len(gp) - tp


# ------------------------------------------------------------------- sweeps


def f_measure(tp, fp, fn) -> tuple:
    """``(P, R, F)``; P is 1 without detections, R is 1 without ground truth."""
    tp, fp, fn = (np.asarray(v, np.float64) for v in (tp, fp, fn))
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(tp + fp > 0, tp / (tp + fp), 1.0)
        r = np.where(tp + fn > 0, tp / (tp + fn), 1.0)
        f = np.where(p + r > 0, 2 * p * r / (p + r), 0.0)
    return p, r, f


def image_counts(pred, gt_labels, cfg: EvalConfig) -> np.ndarray:
    """``[T, 3]`` (tp, fp, fn) per threshold for one image."""
    thin = nms_thin(_plane(pred))
    g = _plane(gt_labels) > 0
    if thin.shape != g.shape:
        raise DimensionError(f"prediction {thin.shape} vs ground truth {g.shape}")
    cand = thin > 0
    pp, gp = np.argwhere(cand), np.argwhere(g)
    vals = thin[cand]
    pi, gj, _ = candidate_pairs(pp, gp, tolerance_radius(g.shape, cfg.max_dist))
    match = _MATCHERS[cfg.matcher]
    out = np.zeros((len(cfg.thresholds), 3), np.int64)
    for k, t in enumerate(cfg.thresholds):
        on = vals >= t
        sel = on[pi]
        tp = match(pi[sel], gj[sel], len(pp), len(gp))
        n_pred = int(on.sum())
        out[k] = (tp, n_pred - tp, len(gp) - tp)
    return out


@dataclass
class EvalReport:
    thresholds: np.ndarray
    counts: np.ndarray  # [T, 3] dataset totals
    precision: np.ndarray
    recall: np.ndarray
    f: np.ndarray
    ods: float
    ods_threshold: float
    ois: float
    image_best_f: np.ndarray
    image_best_threshold: np.ndarray
    ids: list = field(default_factory=list)

    def pr_table(self) -> str:
        lines = ["threshold,tp,fp,fn,precision,recall,f"]
        for t, (tp, fp, fn), p, r, f in zip(self.thresholds, self.counts, self.precision, self.recall, self.f):
            lines.append(f"{t:.4f},{tp},{fp},{fn},{p:.6f},{r:.6f},{f:.6f}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        return (
            f"ods = {self.ods:.6f}\n"
            f"ods_threshold = {self.ods_threshold:.4f}\n"
            f"ois = {self.ois:.6f}\n"
            f"images = {len(self.image_best_f)}\n"
        )


def ods_ois(predictions: Sequence, gts: Sequence, cfg: Optional[EvalConfig] = None, workers: int = 1) -> EvalReport:
    """Sweep thresholds over thinned predictions; report ODS and OIS.

    ``gts`` entries may be :class:`GroundTruth` or binary arrays.
    """
    cfg = cfg or EvalConfig()
    if len(predictions) != len(gts) or not predictions:
        raise ContractError(f"need aligned non-empty lists, got {len(predictions)} and {len(gts)}")
    labels = [g.labels if isinstance(g, GroundTruth) else g for g in gts]
    jobs = list(zip(predictions, labels))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            per_image = list(pool.map(lambda a: image_counts(a[0], a[1], cfg), jobs))
    else:
        per_image = [image_counts(p, g, cfg) for p, g in jobs]
    per_image = np.stack(per_image)  # [N, T, 3]
    totals = per_image.sum(axis=0)
    p, r, f = f_measure(totals[:, 0], totals[:, 1], totals[:, 2])
    thr = np.asarray(cfg.thresholds, np.float64)
    best = int(np.argmax(f))
    _, _, fi = f_measure(per_image[..., 0], per_image[..., 1], per_image[..., 2])
    ib = fi.argmax(axis=1)
    return EvalReport(
        thresholds=thr,
        counts=totals,
        precision=p,
        recall=r,
        f=f,
        ods=float(f[best]),
        ods_threshold=float(thr[best]),
        ois=float(fi.max(axis=1).mean()),
        image_best_f=fi.max(axis=1),
        image_best_threshold=thr[ib],
    )


# -------------------------------------------------------------- multi-scale

MIN_SIDE = 32


def _resize_plane(x: np.ndarray, h: int, w: int) -> np.ndarray:
    return bilinear_resize(Tensor(x, dtype=np.float32), h, w).data


def multiscale_infer(model, image: np.ndarray, scales: Sequence = (0.5, 1.0, 1.5)) -> np.ndarray:
    """Average of edge maps predicted on rescaled copies, each resized back first.

    Scales whose rescaled image has a side under 32 pixels are skipped.
    """
    if not len(scales):
        raise ContractError("need at least one scale")
    image = np.asarray(image, np.float32)
    _, h, w = image.shape
    maps = []
    for s in scales:
        hs, ws = int(round(h * s)), int(round(w * s))
        if min(hs, ws) < MIN_SIDE:
            logger.warning("skipping scale %s: %dx%d is below the %d-pixel minimum", s, hs, ws, MIN_SIDE)
            continue
        scaled = image if (hs, ws) == (h, w) else _resize_plane(image, hs, ws)
        edge = model.predict(scaled)
        maps.append(edge if (hs, ws) == (h, w) else _resize_plane(edge[None], h, w)[0])
    if not maps:
        raise ContractError(f"every scale in {tuple(scales)} is too small for a {h}x{w} image")
    if len(maps) == 1:
        return maps[0]
    return np.mean(np.stack(maps), axis=0, dtype=np.float64).astype(np.float32)
