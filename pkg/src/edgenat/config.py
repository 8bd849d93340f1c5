"""Model, training, evaluation and run configuration.

Config files are INI-style (``[model]``, ``[train]``, ``[eval]``, ``[paths]``
sections of ``key = value`` lines). Precedence: dataclass defaults, then file
values, then command-line overrides.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .tensor import ConfigurationError

_LEVEL3_S0 = (1, 2, 1, 3, 1, 4)
_LEVEL3_FULL = _LEVEL3_S0 * 3
_LEVEL4 = (1, 2, 1, 2, 1)

# variant -> (layers, dilations, dim per head, heads at level 1, mlp ratio)
VARIANTS = {
    "S0": ((3, 4, 6, 5), ((1, 16, 1), (1, 4, 1, 8), _LEVEL3_S0, _LEVEL4), 32, 2, 3.0),
    "S1": ((3, 4, 18, 5), ((1, 16, 1), (1, 4, 1, 8), _LEVEL3_FULL, _LEVEL4), 32, 2, 3.0),
    "S2": ((3, 4, 18, 5), ((1, 16, 1), (1, 4, 1, 8), _LEVEL3_FULL, _LEVEL4), 32, 3, 2.0),
    "S3": ((3, 4, 18, 5), ((1, 16, 1), (1, 4, 1, 8), _LEVEL3_FULL, _LEVEL4), 32, 4, 2.0),
    "L": ((3, 4, 18, 5), ((1, 20, 1), (1, 5, 1, 10), _LEVEL3_FULL, _LEVEL4), 32, 6, 2.0),
}

FUSION_MODES = ("pre", "final")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "S0"
    layers: tuple = VARIANTS["S0"][0]
    dilations: tuple = VARIANTS["S0"][1]
    head_dim: int = 32
    base_heads: int = 2
    mlp_ratio: float = 3.0
    kernel_size: int = 7
    use_ppm: bool = False
    use_bottom_up: bool = False
    fusion_mode: str = "pre"
    scale_by_embed_dim: bool = False

    def __post_init__(self):
        if len(self.layers) != 4 or len(self.dilations) != 4:
            raise ConfigurationError("need exactly four levels")
        for lvl, (n, dil) in enumerate(zip(self.layers, self.dilations)):
            if len(dil) != n:
                raise ConfigurationError(
                    f"level {lvl + 1}: {len(dil)} dilations for {n} blocks"
                )
            if any(d < 1 for d in dil):
                raise ConfigurationError(f"level {lvl + 1}: dilations must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError(f"kernel size must be odd, got {self.kernel_size}")
        if self.head_dim < 1 or self.base_heads < 1 or self.mlp_ratio <= 0:
            raise ConfigurationError("head_dim, base_heads and mlp_ratio must be positive")
        if self.base_dim % 2:
            raise ConfigurationError("base channel count must be even (tokenizer halves it)")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigurationError(f"fusion_mode must be one of {FUSION_MODES}")

    @property
    def base_dim(self) -> int:
        return self.head_dim * self.base_heads

    @property
    def channels(self) -> tuple:
        c = self.base_dim
        return (c, 2 * c, 4 * c, 8 * c)

    @property
    def heads(self) -> tuple:
        return tuple(self.base_heads * 2**i for i in range(4))

    def hidden(self, level: int) -> int:
        return int(round(self.channels[level] * self.mlp_ratio))

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["layers"] = list(self.layers)
        d["dilations"] = [list(x) for x in self.dilations]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["layers"] = tuple(d["layers"])
        d["dilations"] = tuple(tuple(x) for x in d["dilations"])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def variant(name: str, **overrides) -> ModelConfig:
    if name not in VARIANTS:
        raise ConfigurationError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    layers, dilations, head_dim, heads, ratio = VARIANTS[name]
    base = dict(
        variant=name, layers=layers, dilations=dilations,
        head_dim=head_dim, base_heads=heads, mlp_ratio=ratio,
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_config(**overrides) -> ModelConfig:
    """S0 block and dilation layout at base width 32 (2 heads of 16)."""
    return variant("S0", **{"head_dim": 16, **overrides})


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 2000
    warmup_steps: int = 750
    peak_lr: float = 1e-3
    batch_size: int = 2
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_interval: int = 500
    loss_weight: float = 0.4
    eta: float = 0.3
    log_interval: int = 50

    def __post_init__(self):
        if self.total_steps < 0 or not 0 <= self.warmup_steps <= max(self.total_steps, 0):
            raise ConfigurationError("need 0 <= warmup_steps <= total_steps")
        if self.peak_lr <= 0:
            raise ConfigurationError("peak_lr must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.loss_weight < 0:
            raise ConfigurationError("loss_weight must be >= 0")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        base = dict(total_steps=40000, warmup_steps=15000, peak_lr=6e-5, batch_size=8)
        base.update(overrides)
        return cls(**base)


def default_thresholds(n: int = 99) -> tuple:
    return tuple(round((i + 1) / (n + 1), 10) for i in range(n))


@dataclass(frozen=True)
class EvalConfig:
    max_dist: float = 0.0075
    thresholds: tuple = field(default_factory=default_thresholds)
    matcher: str = "greedy"

    def __post_init__(self):
        if self.max_dist <= 0:
            raise ConfigurationError("max_dist must be positive")
        ts = self.thresholds
        if not ts or any(not 0 < t < 1 for t in ts) or any(b <= a for a, b in zip(ts, ts[1:])):
            raise ConfigurationError("thresholds must be strictly increasing within (0,1)")
        if self.matcher not in ("greedy", "exact"):
            raise ConfigurationError(f"unknown matcher {self.matcher!r}")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=tiny_config)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data_dir: Optional[str] = None
    out_dir: str = "runs/default"
    synth_n: int = 8
    synth_size: int = 64
    synth_seed: int = 7


def _parse_value(raw: str, current):
    raw = raw.strip()
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"not a boolean: {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        if current and isinstance(current[0], tuple):
            return tuple(tuple(int(v) for v in grp.split(",")) for grp in raw.split(";"))
        conv = float if current and isinstance(current[0], float) else int
        return tuple(conv(v) for v in raw.split(","))
    if current is None:
        return raw or None
    return raw


def _apply(obj, values: dict, section: str):
    names = {f.name: f for f in dataclasses.fields(obj)}
    changes = {}
    for key, raw in values.items():
        if key not in names:
            raise ConfigurationError(f"[{section}] unknown key {key!r}")
        changes[key] = _parse_value(raw, getattr(obj, key)) if isinstance(raw, str) else raw
    return dataclasses.replace(obj, **changes)


def _model_from(values: dict, base: ModelConfig) -> ModelConfig:
    values = dict(values)
    name = values.pop("variant", None)
    if name is not None:
        base = variant(name.strip())
    return _apply(base, values, "model")


def load_run_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    """Build a :class:`RunConfig` from defaults, an optional file, then overrides.

    ``overrides`` maps ``"section.key"`` to a value (string or already typed).
    """
    run = RunConfig()
    sections = {"model": {}, "train": {}, "eval": {}, "paths": {}}
    if path is not None:
        parser = configparser.ConfigParser()
        if not parser.read(Path(path)):
            raise ConfigurationError(f"cannot read config file {path}")
        for name in parser.sections():
            if name not in sections:
                raise ConfigurationError(f"unknown config section [{name}]")
            sections[name].update(parser[name])
    for dotted, value in (overrides or {}).items():
        sec, _, key = dotted.partition(".")
        if sec not in sections:
            raise ConfigurationError(f"unknown override section {sec!r}")
        sections[sec][key] = value
    model = _model_from(sections["model"], run.model)
    train = _apply(run.train, sections["train"], "train")
    ev = _apply(run.eval, sections["eval"], "eval")
    run = dataclasses.replace(run, model=model, train=train, eval=ev)
    return _apply(run, sections["paths"], "paths")
