"""Class-balanced binary cross-entropy for edge maps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .tensor import ConfigurationError, DimensionError, Tensor, clip, log, mul, sub, sum_all

LOG_EPS = 1e-7
DEFAULT_LAMBDA = 0.4


@dataclass(frozen=True)
class GroundTruth:
    prob: np.ndarray  # [1, h, w] annotator consensus in [0, 1]
    labels: np.ndarray  # [1, h, w] in {0, 1}
    eta: Optional[float]

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return int(self.labels.size - self.labels.sum())

    @property
    def alpha(self) -> float:
        """Fraction of negative pixels; the weight on positive terms."""
        return self.n_neg / self.labels.size


def binarize(prob, eta: Optional[float] = 0.3) -> GroundTruth:
    """Label pixels with probability strictly above ``eta`` as edges.

    ``eta=None`` is for single-annotator maps, which are taken as already
    binary (any nonzero value is an edge).
    """
    prob = np.asarray(getattr(prob, "data", prob), dtype=np.float32)
    if prob.ndim == 2:
        prob = prob[None]
    if eta is None:
        labels = (prob > 0).astype(np.float32)
    else:
        if not 0.0 <= eta < 1.0:
            raise ConfigurationError(f"eta must lie in [0, 1), got {eta}")
        labels = (prob > eta).astype(np.float32)
    return GroundTruth(prob=prob, labels=labels, eta=eta)


def balanced_bce(edge: Tensor, gt: GroundTruth) -> Tensor:
    """Sum over pixels of the class-balanced cross-entropy.

    Positive pixels are weighted by the negative fraction ``alpha`` and
    negatives by ``1 - alpha``. Predictions are clamped to
    ``[1e-7, 1 - 1e-7]`` before the logs.
    """
    if edge.shape != gt.labels.shape:
        raise DimensionError(f"prediction {edge.shape} vs ground truth {gt.labels.shape}")
    a = gt.alpha
    dt = edge.data.dtype
    w_pos = (gt.labels * a).astype(dt)
    w_neg = ((1.0 - gt.labels) * (1.0 - a)).astype(dt)
    e = clip(edge, LOG_EPS, 1.0 - LOG_EPS)
    terms = mul(log(e), w_pos) + mul(log(sub(1.0, e)), w_neg)
    return -sum_all(terms)


def total_loss(edge: Tensor, sides: Sequence[Tensor], gt: GroundTruth, lam: float = DEFAULT_LAMBDA) -> Tensor:
    """Primary loss plus ``lam`` times the summed side-map losses."""
    if lam < 0:
        raise ConfigurationError(f"lambda must be >= 0, got {lam}")
    loss = balanced_bce(edge, gt)
    if lam == 0:
        return loss
    side = balanced_bce(sides[0], gt)
    for s in sides[1:]:
        side = side + balanced_bce(s, gt)
    return loss + side * lam
