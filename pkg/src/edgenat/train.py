"""Desk-scale training loop: AdamW with linear warmup and cosine decay."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .config import TrainConfig
from .loss import binarize, total_loss
from .model import EdgeNAT
from .tensor import ContractError, NonFiniteError, Tensor

logger = logging.getLogger(__name__)

__all__ = ["lr_at", "AdamWState", "adamw_step", "TrainResult", "TrainingDiverged", "train", "dataset_loss"]


class TrainingDiverged(RuntimeError):
    pass


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Learning rate for the update that follows ``step`` completed updates."""
    if not 0 <= step <= cfg.total_steps:
        raise ContractError(f"step {step} outside [0, {cfg.total_steps}]")
    w = cfg.warmup_steps
    if step < w:
        return cfg.peak_lr * step / w
    span = cfg.total_steps - w
    if span == 0:
        return cfg.peak_lr
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * (step - w) / span))


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_tensors(self) -> dict:
        out = {}
        for name in self.m:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    @classmethod
    def from_tensors(cls, tensors: dict, step: int) -> "AdamWState":
        state = cls(step=step)
        for key, arr in tensors.items():
            if key.startswith("opt.m."):
                state.m[key[6:]] = np.array(arr)
            elif key.startswith("opt.v."):
                state.v[key[6:]] = np.array(arr)
        return state


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float, cfg: TrainConfig) -> None:
    """One decoupled-weight-decay Adam update, in place.

    ``params`` maps names to arrays (updated in place); ``grads`` maps the
    same names to gradients, missing entries meaning zero.
    """
    bad = [n for n, g in grads.items() if g is not None and not np.isfinite(g).all()]
    if bad:
        raise NonFiniteError(f"non-finite gradients in {len(bad)} tensors, e.g. {bad[:3]}")
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if cfg.weight_decay:
            p *= 1.0 - lr * cfg.weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


@dataclass
class TrainResult:
    checkpoint: Path
    history: list  # (step, lr, loss) per completed update
    state: AdamWState


def _batch_indices(step: int, n: int, batch: int, seed: int) -> list:
    """Samples for update ``step``; a pure function of the step so resumes replay exactly."""
    out = []
    for slot in range(step * batch, (step + 1) * batch):
        epoch, pos = divmod(slot, n)
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        out.append(int(perm[pos]))
    return out


def dataset_loss(model: EdgeNAT, samples: Sequence, cfg: TrainConfig) -> float:
    """Mean total loss over ``samples`` without building a tape."""
    total = 0.0
    for s in samples:
        pred = model(Tensor(s.image))
        total += total_loss(pred.edge, pred.sides, binarize(s.gt_prob, cfg.eta), cfg.loss_weight).item()
    return total / len(samples)


def _save(model: EdgeNAT, path: Path, state: AdamWState, cfg: TrainConfig) -> Path:
    meta = {"train": dataclasses.asdict(cfg)}
    return model.save(path, step=state.step, extra=state.to_tensors(), meta=meta)


def train(
    model: EdgeNAT,
    samples: Sequence,
    cfg: TrainConfig,
    out_dir,
    state: Optional[AdamWState] = None,
    callback: Optional[Callable] = None,
    until: Optional[int] = None,
) -> TrainResult:
    """Optimize ``model`` in place on ``samples`` until ``cfg.total_steps``.

    Passing the ``state`` restored from a checkpoint resumes at its step;
    ``until`` stops early at that step while keeping the full schedule.
    The checkpoint is rewritten every ``checkpoint_interval`` updates and at
    the end; a divergent step raises :class:`TrainingDiverged` and leaves the
    previous checkpoint untouched.
    """
    if not samples:
        raise ContractError("training needs at least one sample")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "checkpoint.enat"
    state = state or AdamWState()
    gts = [binarize(s.gt_prob, cfg.eta) for s in samples]
    for s, gt in zip(samples, gts):
        if gt.n_neg == 0:
            logger.warning("sample %s has no negative pixels; its loss is identically zero", s.id)
    history = []
    if state.step == 0 or not ckpt.exists():
        _save(model, ckpt, state, cfg)
    names = list(model.params)
    stop = cfg.total_steps if until is None else min(until, cfg.total_steps)
    while state.step < stop:
        step = state.step
        lr = lr_at(step, cfg)
        model.zero_grad()
        batch = _batch_indices(step, len(samples), cfg.batch_size, cfg.seed)
        loss_sum = 0.0
        try:
            for i in batch:
                pred = model(Tensor(samples[i].image))
                loss = total_loss(pred.edge, pred.sides, gts[i], cfg.loss_weight) * (1.0 / len(batch))
                loss.backward()
                loss_sum += loss.item()
            if not math.isfinite(loss_sum):
                raise NonFiniteError("loss is not finite")
            adamw_step(
                {n: model.params[n].data for n in names},
                {n: model.params[n].grad for n in names},
                state,
                lr,
                cfg,
            )
        except NonFiniteError as exc:
            raise TrainingDiverged(f"step {step}: {exc}; last good checkpoint kept at {ckpt}") from exc
        history.append((step, lr, loss_sum))
        if callback is not None:
            callback(step, lr, loss_sum)
        if cfg.log_interval and (step % cfg.log_interval == 0 or state.step == cfg.total_steps):
            logger.info("step %d lr %.3e loss %.4f", step, lr, loss_sum)
        if cfg.checkpoint_interval and state.step % cfg.checkpoint_interval == 0:
            _save(model, ckpt, state, cfg)
    model.zero_grad()
    _save(model, ckpt, state, cfg)
    return TrainResult(ckpt, history, state)
