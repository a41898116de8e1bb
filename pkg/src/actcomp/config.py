"""Run configuration: a flat key=value text format, validated on load.

Flat on purpose: sweep grids then diff line by line. Every field has a
serialized form; ``dump_config`` followed by ``load_config`` reproduces the
config exactly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    dataset_dir: str = ""
    dataset_format: str = "idx"          # "idx" or "raw"
    num_classes: int = 10
    # reproducibility
    seed: int = 0
    # model / compression structure
    groups: int = 3                      # G, last group is pruned
    branches: int = 3                    # N quantizer branches per module
    init_bits: tuple[int, ...] = (6, 7, 8)
    b_min: int = 2
    # objective
    p: float = 0.05
    # dynamic search
    patience: int = 3
    patience_mode: str = "consecutive"   # or "cumulative"
    # optimization
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 6
    batch_size: int = 64
    baseline_epochs: int = 10
    baseline_lr: float = 0.05
    # co-design schedule
    refit_every: int = 1                 # epochs between PCA + partition refits
    thresholds: tuple[float, ...] = ()   # empty = derive from the pruning probe
    prune_accuracy_budget: float = 1.0   # max sample-set accuracy drop (points) for pruning
    calib_samples: int = 512
    finetune_samples: int = 5000
    ema_decay: float = 0.99

    def validate(self) -> "RunConfig":
        if not self.dataset_dir:
            raise ConfigError("missing config field: dataset_dir")
        if self.dataset_format not in ("idx", "raw"):
            raise ConfigError(f"dataset_format must be idx or raw, got {self.dataset_format}")
        if self.groups < 2:
            raise ConfigError(f"groups must be >= 2, got {self.groups}")
        if self.branches != len(self.init_bits):
            raise ConfigError(f"branches={self.branches} but init_bits has "
                              f"{len(self.init_bits)} entries")
        if any(b2 <= b1 for b1, b2 in zip(self.init_bits, self.init_bits[1:])):
            raise ConfigError(f"init_bits must be strictly ascending, got {self.init_bits}")
        if self.init_bits[0] < 1 or self.init_bits[-1] > 8:
            raise ConfigError(f"init_bits must stay within [1, 8], got {self.init_bits}")
        if not 1 <= self.b_min <= self.init_bits[0]:
            raise ConfigError(f"b_min must be in [1, {self.init_bits[0]}], got {self.b_min}")
        if self.p <= 0:
            raise ConfigError(f"p must be positive, got {self.p}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.patience_mode not in ("consecutive", "cumulative"):
            raise ConfigError(f"unknown patience_mode {self.patience_mode}")
        if self.thresholds:
            if len(self.thresholds) != self.groups - 1:
                raise ConfigError(f"{self.groups} groups need {self.groups - 1} "
                                  f"thresholds, got {len(self.thresholds)}")
            t = self.thresholds
            if any(x <= 0 or x > 1 for x in t) or any(b < a for a, b in zip(t, t[1:])):
                raise ConfigError(f"thresholds must be ascending in (0, 1], got {t}")
        for name in ("lr", "baseline_lr", "prune_accuracy_budget"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("epochs", "batch_size", "baseline_epochs", "refit_every",
                     "calib_samples", "finetune_samples", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must be in [0, 1), got {self.ema_decay}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        return self


_TUPLE_FIELDS = {"init_bits": int, "thresholds": float}


def _parse_value(name: str, text: str, target_type):
    text = text.strip()
    if name in _TUPLE_FIELDS:
        if text == "":
            return ()
        conv = _TUPLE_FIELDS[name]
        return tuple(conv(part.strip()) for part in text.split(","))
    if target_type is bool:
        return text.lower() in ("1", "true", "yes")
    try:
        return target_type(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {text!r}") from exc


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    known = {f.name: f.type for f in fields(RunConfig)}
    types = {f.name: type(getattr(RunConfig(), f.name)) for f in fields(RunConfig)}
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = line.split("=", 1)
        key = key.strip()
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown config field {key!r}")
        values[key] = _parse_value(key, val, types[key])
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in known:
            raise ConfigError(f"unknown config field {key!r}")
        values[key] = _parse_value(key, str(val), types[key])
    return RunConfig(**values).validate()


def load_config(path: str | Path, overrides: dict | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    return parse_config(text, overrides)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        val = getattr(cfg, f.name)
        if isinstance(val, tuple):
            val = ",".join(str(v) for v in val)
        lines.append(f"{f.name}={val}")
    return "\n".join(lines) + "\n"


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dump_config(cfg))


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode("utf-8")).hexdigest()[:16]
