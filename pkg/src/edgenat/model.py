"""EdgeNAT: DiNAT encoder + SCAF-MLA decoder."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import serialize
from .config import ModelConfig
from .decoder import DecoderOutputs, decode, decoder_param_shapes
from .encoder import FeaturePyramid, encoder_forward, encoder_param_shapes
from .params import as_parameters, count, materialize
from .tensor import Tensor

__all__ = ["EdgePrediction", "EdgeNAT", "param_shapes", "param_count", "pad_to_multiple"]


@dataclass
class EdgePrediction:
    """Primary edge map and four side maps, each ``[1, h, w]`` in (0, 1)."""

    edge: Tensor
    sides: tuple

    def maps(self) -> tuple:
        return (self.edge, *self.sides)


def param_shapes(cfg: ModelConfig) -> dict:
    shapes = encoder_param_shapes(cfg)
    shapes.update(decoder_param_shapes(cfg))
    return shapes


def param_count(cfg: ModelConfig) -> int:
    """Number of scalar parameters, from the config alone."""
    return count(param_shapes(cfg))


def pad_to_multiple(image: np.ndarray, multiple: int = 32) -> np.ndarray:
    """Edge-replicate pad the trailing two axes up to a multiple."""
    h, w = image.shape[-2:]
    ph = -h % multiple
    pw = -w % multiple
    if not ph and not pw:
        return image
    pad = [(0, 0)] * (image.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(image, pad, mode="edge")


class EdgeNAT:
    def __init__(self, cfg: ModelConfig, params: dict):
        missing = set(param_shapes(cfg)) - set(params)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "EdgeNAT":
        return cls(cfg, as_parameters(materialize(param_shapes(cfg), seed)))

    def parameters(self) -> list:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def encode(self, image: Tensor) -> FeaturePyramid:
        return encoder_forward(image, self.cfg, self.params)

    def decode(self, pyramid: FeaturePyramid, out_size: tuple) -> DecoderOutputs:
        return decode(pyramid, self.params, self.cfg, out_size)

    def forward(self, image: Tensor) -> EdgePrediction:
        out = self.decode(self.encode(image), image.shape[1:])
        return EdgePrediction(out.edge, out.sides)

    __call__ = forward

    def predict(self, image: np.ndarray) -> np.ndarray:
        """Edge probabilities ``[h, w]`` for a ``[3, h, w]`` array of any size."""
        h, w = image.shape[1:]
        padded = pad_to_multiple(np.asarray(image, np.float32))
        pred = self.forward(Tensor(padded))
        return pred.edge.data[0, :h, :w].copy()

    def state_dict(self) -> dict:
        return {name: p.data for name, p in self.params.items()}

    def save(self, path, step: int = 0, extra: Optional[dict] = None, meta: Optional[dict] = None) -> Path:
        tensors = dict(self.state_dict())
        if extra:
            tensors.update(extra)
        info = {"step": step, "config": self.cfg.to_dict(), "config_hash": self.cfg.digest()}
        if meta:
            info.update(meta)
        return serialize.save(path, tensors, info)

    @classmethod
    def load(cls, path) -> tuple:
        """Returns ``(model, extra tensors, metadata)``."""
        tensors, meta = serialize.load(path)
        if not meta or "config" not in meta:
            raise serialize.FormatError(f"{path}: checkpoint lacks model metadata")
        cfg = ModelConfig.from_dict(meta["config"])
        names = set(param_shapes(cfg))
        params = as_parameters({k: v for k, v in tensors.items() if k in names})
        extra = {k: v for k, v in tensors.items() if k not in names}
        return cls(cfg, params), extra, meta
