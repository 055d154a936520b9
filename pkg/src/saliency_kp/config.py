"""Experiment configuration and its key=value file format.

One setting per line, ``key = value``; ``#`` starts a comment. Lists are
comma separated. Scene and training settings use ``scene.`` and ``train.``
prefixes, e.g.::

    k_values = 128, 256
    detectors = skd, random
    scene.noise_sigma = 0.02
    train.epochs = 100
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

from .errors import ConfigError
from .synthetic import SceneConfig
from .training import TrainConfig

DETECTORS = ("skd", "random", "elf3d")


@dataclass
class ExperimentConfig:
    source: str = "synthetic"
    n_pairs: int = 10
    pair_seed: int = 0
    train_pairs: int = 10
    train_seed: int = 10_000
    detectors: list = field(default_factory=lambda: ["skd", "random"])
    k_values: list = field(default_factory=lambda: [128, 256])
    layer: int = 3
    tau: float = 0.5
    epsilon: float = 0.5
    overlap_radius: float = 0.5
    inlier_threshold: float = 0.5
    confidence: float = 0.99
    max_iterations: int = 10_000
    nms_radius: float = 0.5
    kapur_bins: int = 64
    seed: int = 0
    checkpoint: str = ""
    output_dir: str = "results"
    scene: SceneConfig = field(default_factory=SceneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self, need_checkpoint: bool = False) -> "ExperimentConfig":
        if any(int(k) < 1 for k in self.k_values) or not self.k_values:
            raise ConfigError("k_values must be a non-empty list of integers >= 1")
        unknown = [d for d in self.detectors if d not in DETECTORS]
        if unknown:
            raise ConfigError(f"unknown detectors {unknown}; choose from {DETECTORS}")
        if self.source != "synthetic" and not os.path.isdir(self.source):
            raise ConfigError(f"dataset directory does not exist: {self.source}")
        if need_checkpoint and "skd" in self.detectors and not os.path.exists(self.checkpoint):
            raise ConfigError(f"checkpoint not found: {self.checkpoint or '<unset>'}")
        if not 0.0 < self.confidence < 1.0:
            raise ConfigError("confidence must lie in (0, 1)")
        return self

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, layer=self.layer, tau=self.tau)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(value: str, current):
    value = value.strip()
    if isinstance(current, bool):
        if value.lower() not in ("1", "0", "true", "false", "yes", "no"):
            raise ConfigError(f"expected a boolean, got {value!r}")
        return value.lower() in ("1", "true", "yes")
    if isinstance(current, list):
        items = [v.strip() for v in value.split(",") if v.strip()]
        if current and isinstance(current[0], int):
            return [int(v) for v in items]
        return items
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value


def apply_setting(cfg: ExperimentConfig, key: str, value: str) -> None:
    """Set one dotted key (``scene.noise_sigma``) from its string value."""
    target = cfg
    parts = key.strip().split(".")
    for part in parts[:-1]:
        if part not in ("scene", "train") or target is not cfg:
            raise ConfigError(f"unknown config section in {key!r}")
        target = getattr(target, part)
    name = parts[-1]
    if name not in {f.name for f in dataclasses.fields(target)} or name in ("scene", "train"):
        raise ConfigError(f"unknown config key {key!r}")
    try:
        setattr(target, name, _coerce(value, getattr(target, name)))
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}") from None


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        apply_setting(cfg, key, value)
    SceneConfig(**dataclasses.asdict(cfg.scene))
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            for sub in dataclasses.fields(v):
                lines.append(f"{f.name}.{sub.name} = {_render(getattr(v, sub.name))}")
        else:
            lines.append(f"{f.name} = {_render(v)}")
    return "\n".join(lines) + "\n"


def _render(v):
    if isinstance(v, list):
        return ", ".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)
