"""Pipeline configuration and the ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .errors import ConfigError
from .losses import LossWeights

SCHEDULES = ("halves-drop-0.1", "milestones-40-70-90-drop-0.3", "constant")

# config-file key -> dataclass attribute, where they differ
KEY_ALIASES = {"lambda": "lam"}


@dataclass
class PipelineConfig:
    lam: float = 1e-3
    alpha: float = 0.7
    beta: float = 1e-6
    eta: float = 1e-3
    tau: float = 3.0
    confidence_tau: float | None = None
    prune_fraction: float = 0.7
    iterations_sparse: int = 300
    iterations_finetune: int | None = None
    lr_sparse: float = 0.003
    lr_finetune: float = 0.001
    lr_schedule: str = "milestones-40-70-90-drop-0.3"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_labeled: int = 32
    batch_unlabeled: int = 32
    disc_lr: float = 0.01
    disc_balance: float | None = None
    seed: int = 0
    distillation: bool = True
    confidence_weighting: bool = True
    adversarial: bool = True
    rademacher: bool = True
    distill_on_labeled: bool = True
    literal_eq10_aligner: bool = False
    finetune_unlabeled: bool = True
    augment: bool = True
    guard: bool = True
    class_count: int = 8
    widths: tuple[int, ...] = (8, 16, 32, 32)
    norm_mean: tuple[float, ...] | None = None
    norm_std: tuple[float, ...] | None = None
    metrics_path: str | None = None

    def __post_init__(self):
        if self.iterations_finetune is None:
            self.iterations_finetune = max(1, self.iterations_sparse // 2)
        self.weights()
        for name in ("lr_sparse", "lr_finetune", "disc_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not 0 <= self.prune_fraction < 1:
            raise ConfigError("prune_fraction must lie in [0, 1)")
        for name in ("iterations_sparse", "iterations_finetune", "batch_labeled", "class_count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.batch_unlabeled < 0:
            raise ConfigError("batch_unlabeled must be >= 0")
        if self.lr_schedule not in SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {SCHEDULES}")
        if self.confidence_tau is not None and not self.confidence_tau > 0:
            raise ConfigError("confidence_tau must be > 0")
        if self.disc_balance is not None and not self.disc_balance > 0:
            raise ConfigError("disc_balance must be > 0")
        if (self.norm_mean is None) != (self.norm_std is None):
            raise ConfigError("norm_mean and norm_std must be given together")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError("widths must be positive")

    def weights(self, lam: float | None = None) -> LossWeights:
        return LossWeights(self.lam if lam is None else lam, self.alpha, self.beta, self.eta,
                           self.tau)

    def replace(self, **changes) -> "PipelineConfig":
        if "iterations_sparse" in changes and "iterations_finetune" not in changes:
            changes["iterations_finetune"] = None
        return dataclasses.replace(self, **changes)

    def labeled_only(self) -> "PipelineConfig":
        """The baseline: no unlabeled data, supervision plus L1 only."""
        return self.replace(batch_unlabeled=0, distillation=False, confidence_weighting=False,
                            adversarial=False, rademacher=False, distill_on_labeled=False,
                            lr_schedule="halves-drop-0.1")

    def to_lines(self) -> list[str]:
        inv = {v: k for k, v in KEY_ALIASES.items()}
        out = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            out.append(f"{inv.get(f.name, f.name)} = {v}")
        return out


_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _parse(name: str, raw: str, default):
    kind = _FIELD_KINDS[name]
    raw = raw.strip()
    try:
        if raw.lower() in ("none", "") and kind in ("opt_float", "opt_int", "opt_str", "opt_ftuple"):
            return None
        if kind == "bool":
            if raw.lower() not in _BOOL:
                raise ValueError(raw)
            return _BOOL[raw.lower()]
        if kind in ("float", "opt_float"):
            return float(raw)
        if kind in ("int", "opt_int"):
            return int(raw)
        if kind == "itup":
            return tuple(int(x) for x in raw.split(","))
        if kind == "opt_ftuple":
            return tuple(float(x) for x in raw.split(","))
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from None


_FIELD_KINDS = {
    f.name: {
        "float": "float", "float | None": "opt_float", "int": "int", "int | None": "opt_int",
        "str": "str", "str | None": "opt_str", "bool": "bool", "tuple[int, ...]": "itup",
        "tuple[float, ...] | None": "opt_ftuple",
    }[f.type]
    for f in dataclasses.fields(PipelineConfig)
}


def _apply(values: dict, key: str, raw: str) -> None:
    key = key.strip()
    name = KEY_ALIASES.get(key, key)
    if name not in _FIELD_KINDS:
        raise ConfigError(f"unknown config key {key!r}")
    values[name] = _parse(name, raw, None)


def load_config(path=None, overrides: Iterable[str] = ()) -> PipelineConfig:
    """Read ``key = value`` lines (``#`` starts a comment), then apply
    ``key=value`` overrides, then validate."""
    values: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except UnicodeDecodeError:
            raise ConfigError(f"{path}: not UTF-8 text") from None
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = line.split("=", 1)
            _apply(values, key, raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        _apply(values, key, raw)
    try:
        return PipelineConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
