"""Training configuration, presets and the YAML config file format.

A config file is a YAML mapping whose keys mirror :class:`TrainingConfig`
fields, with augmentation settings nested under ``augmentation:``. Overrides
use dotted paths (``augmentation.patch_size=64``). Precedence is
defaults < file < overrides; unknown keys are rejected before any work
starts, and the fully resolved config can be persisted next to run outputs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import AugmentationConfig
from .losses import Regime


class ConfigError(ValueError):
    """Unknown key, bad value or incompatible regime/pool combination."""


@dataclass(frozen=True)
class TrainingConfig:
    regime: Regime = Regime.ADVERSARIAL_AUGMENTATION
    alpha: float = 8e-5
    beta: float = 8e-5
    iterations: int = 150_000
    batch_pairs: int = 16
    batch_rough: int = 16
    batch_clean: int = 16
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    pretrain_iterations: int = 10_000
    seed: int = 0
    auto_balance: bool = False
    checkpoint_interval: int = 5_000
    simplifier_base_channels: int = 32
    simplifier_channel_cap: int = 256
    discriminator_base_channels: int = 16
    saturating_generator_loss: bool = True
    pencil_mode: bool = False
    num_threads: int = 1

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be non-negative")
        if self.iterations <= 0:
            raise ConfigError("iterations must be positive")
        if self.pretrain_iterations < 0:
            raise ConfigError("pretrain_iterations must be non-negative")

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["regime"] = self.regime.value
        d["augmentation"]["downsample_levels"] = list(
            self.augmentation.downsample_levels)
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainingConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(TrainingConfig)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "regime" in d:
            try:
                d["regime"] = Regime(d["regime"])
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        if "augmentation" in d and isinstance(d["augmentation"], dict):
            aug = dict(d["augmentation"])
            aug_known = {f.name for f in dataclasses.fields(AugmentationConfig)}
            aug_unknown = set(aug) - aug_known
            if aug_unknown:
                raise ConfigError(
                    f"unknown augmentation keys: {sorted(aug_unknown)}")
            if "downsample_levels" in aug:
                aug["downsample_levels"] = tuple(aug["downsample_levels"])
            try:
                d["augmentation"] = AugmentationConfig(**aug)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        try:
            return TrainingConfig(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def fingerprint(self) -> str:
        """Stable digest of the resolved configuration."""
        payload = json.dumps(self.to_dict(), sort_keys=True,
                             separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    def with_overrides(self, overrides: dict[str, object]) -> "TrainingConfig":
        """Apply dotted-path overrides (string values are parsed as YAML)."""
        d = self.to_dict()
        for dotted, value in overrides.items():
            if isinstance(value, str):
                value = yaml.safe_load(value)
            node = d
            *parents, leaf = dotted.split(".")
            for part in parents:
                if part not in node or not isinstance(node[part], dict):
                    raise ConfigError(f"unknown config key {dotted!r}")
                node = node[part]
            if leaf not in node:
                raise ConfigError(f"unknown config key {dotted!r}")
            node[leaf] = value
        return TrainingConfig.from_dict(d)


def load_config(path: str | Path | None = None,
                overrides: dict[str, object] | None = None,
                base: TrainingConfig | None = None) -> TrainingConfig:
    cfg = base or TrainingConfig()
    if path is not None:
        with open(path) as f:
            loaded = yaml.safe_load(f) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path} must contain a YAML mapping")
        merged = cfg.to_dict()
        for key, value in loaded.items():
            if key == "augmentation" and isinstance(value, dict):
                merged["augmentation"].update(value)
            else:
                merged[key] = value
        cfg = TrainingConfig.from_dict(merged)
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg


def save_config(cfg: TrainingConfig, path: str | Path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=True)


def desk_preset(**kwargs) -> TrainingConfig:
    """Laptop-scale preset: 64px patches, channel widths divided by four,
    4+4+4 batches and a 2,000-iteration budget."""
    base = dict(
        iterations=2_000,
        batch_pairs=4,
        batch_rough=4,
        batch_clean=4,
        pretrain_iterations=500,
        checkpoint_interval=500,
        simplifier_base_channels=8,
        simplifier_channel_cap=64,
        discriminator_base_channels=4,
        augmentation=AugmentationConfig(
            patch_size=64,
            downsample_levels=(7 / 6, 8 / 6, 9 / 6, 10 / 6)),
    )
    base.update(kwargs)
    return TrainingConfig(**base)
