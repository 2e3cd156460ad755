"""Flat ``key = value`` run configuration.

Precedence, lowest first: built-in defaults, a config file, the
``KPM_SEED`` environment variable, explicit command-line values.  The
effective configuration serialises back to the same text format, so an
echoed config replays a run exactly.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping

from .errors import ConfigError
from .model import MATCHING_MODES, SIMILARITY_SCALES, ModelConfig

SEED_ENV = "KPM_SEED"


@dataclass(frozen=True)
class RunConfig:
    # paths
    dataset: str = "data"
    out: str = "run"
    checkpoint: str = ""
    # dataset synthesis
    ids: int = 200
    per_id: int = 8
    seed: int = 0
    # model
    channels: tuple[int, int, int] = (32, 64, 128)
    stage_depth: int = 1
    rsa_hidden: int = 64
    tau_kpm: float = 0.05
    tau_rsa: float = 1.0
    matching: str = "warp"
    attention: bool = True
    hourglass: bool = True
    square: str = "after"
    similarity_scale: str = "channels"
    symmetric: bool = False
    # optimisation
    ratio: tuple[int, int] = (1, 3)
    batch_size: int = 16
    epochs: int = 30
    steps_per_epoch: int = 25
    lr: float = 0.01
    lr_low: float = 0.001
    drop_epoch: int = 50
    lr_mode: str = "step"
    momentum: float = 0.9
    flip_p: float = 0.5
    erase_p: float = 0.5
    # held-out split
    val_ids: int = 40
    val_pairs: int = 200
    force: bool = False

    def __post_init__(self):
        problems = []
        if not (self.tau_kpm > 0 and self.tau_rsa > 0):
            problems.append("temperatures must be > 0")
        if min(self.ratio) < 0 or sum(self.ratio) == 0:
            problems.append(f"ratio {self.ratio[0]}:{self.ratio[1]} needs non-negative parts with a positive sum")
        if self.batch_size < 2:
            problems.append("batch_size must be >= 2 (batch norm)")
        for name in ("ids", "per_id", "epochs", "steps_per_epoch", "stage_depth", "rsa_hidden", "val_pairs"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.val_ids < 0 or self.drop_epoch < 0:
            problems.append("val_ids and drop_epoch must be >= 0")
        if not (self.lr >= 0 and self.lr_low >= 0 and 0 <= self.momentum < 1):
            problems.append("lr must be >= 0 and momentum in [0, 1)")
        if not (0 <= self.flip_p <= 1 and 0 <= self.erase_p <= 1):
            problems.append("augmentation probabilities must lie in [0, 1]")
        if self.lr_mode not in ("step", "linear"):
            problems.append("lr_mode must be 'step' or 'linear'")
        if self.matching not in MATCHING_MODES:
            problems.append(f"matching must be one of {', '.join(MATCHING_MODES)}")
        if self.square not in ("after", "before"):
            problems.append("square must be 'after' or 'before'")
        if self.similarity_scale not in SIMILARITY_SCALES:
            problems.append(f"similarity_scale must be one of {', '.join(SIMILARITY_SCALES)}")
        if problems:
            raise ConfigError("; ".join(problems))

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            channels=self.channels, stage_depth=self.stage_depth, rsa_hidden=self.rsa_hidden,
            tau_kpm=self.tau_kpm, tau_rsa=self.tau_rsa, matching=self.matching,
            attention=self.attention, hourglass=self.hourglass, square=self.square,
            similarity_scale=self.similarity_scale,
        )

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out) / "model.ckpt"

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in fields(RunConfig)}
_DEFAULTS = RunConfig()


def parse_value(key: str, text: str):
    """Convert ``text`` to the type of field ``key``."""
    default = getattr(_DEFAULTS, key)
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if key == "ratio":
        parts = text.split(":")
        if len(parts) != 2:
            raise ValueError(f"expected pos:neg, got {text!r}")
        return tuple(int(p) for p in parts)
    if key == "channels":
        parts = tuple(int(p) for p in text.split(","))
        if len(parts) != 3:
            raise ValueError(f"expected three comma-separated widths, got {text!r}")
        return parts
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        sep = ":" if len(value) == 2 else ","
        return sep.join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str) -> dict:
    """Parse config text, collecting every bad line before raising."""
    values, errors, lines = {}, [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            errors.append(f"line {lineno}: expected 'key = value'")
        elif key not in _FIELDS:
            errors.append(f"line {lineno}: unknown key {key!r}")
        else:
            try:
                values[key] = parse_value(key, value)
                continue
            except ValueError as exc:
                errors.append(f"line {lineno}: {key}: {exc}")
        lines.append(lineno)
    if errors:
        raise ConfigError("; ".join(errors), lines)
    return values


def load_config_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config_text(text)


def resolve(file_values: Mapping | None = None, overrides: Mapping | None = None,
            environ: Mapping[str, str] | None = None) -> RunConfig:
    merged = dict(file_values or {})
    environ = os.environ if environ is None else environ
    if environ.get(SEED_ENV, "").strip():
        try:
            merged["seed"] = int(environ[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    for key, value in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}")
        if value is not None:
            merged[key] = value
    try:
        return RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {format_value(getattr(cfg, f.name))}\n" for f in fields(cfg))
