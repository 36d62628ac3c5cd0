"""Experiment configuration: plain-text key=value files with typed
defaults.  Unknown keys are errors; precedence is flags > file > defaults."""

from __future__ import annotations

from dataclasses import dataclass, fields

from .deform import DeformParams
from .model import NetworkConfig
from .trainer import REGIMES, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # dataset
    n_total: int = 200
    scene_size: int = 64
    n_structures: int = 3
    data_seed: int = 0
    train_fraction: float = 0.5
    # model
    depth: int = 3
    base_channels: int = 8
    # deformation distribution (<= 0 means: derive from scene_size)
    amplitude: float = -1.0
    sigma: float = -1.0
    elastic_prob: float = 0.5
    invert_iters: int = 25
    invert_tol: float = 1e-3
    # training
    batch_size: int = 8
    lam: float = 1.0
    rho: float = 0.95
    epsilon: float = 1e-6
    stage1_steps: int = 600
    finetune_steps: int = 400
    patience: int = 8
    val_interval_steps: int = 25
    # experiment grid
    regimes: str = "baseline,suptc,semitc,semitc_plus"
    labeled_sizes: str = "5"
    seeds: str = "0,1,2,3,4"
    # evaluation
    pixel_size: float = 1.0

    @property
    def n_classes(self) -> int:
        return self.n_structures + 1

    def regime_list(self) -> list[str]:
        out = [r.strip() for r in self.regimes.split(",") if r.strip()]
        for r in out:
            if r not in REGIMES:
                raise ConfigError(f"unknown regime {r!r}; expected one of {REGIMES}")
        return out

    def labeled_size_list(self) -> list[int]:
        return [int(s) for s in self.labeled_sizes.split(",") if s.strip()]

    def seed_list(self) -> list[int]:
        return [int(s) for s in self.seeds.split(",") if s.strip()]

    def deform_params(self) -> DeformParams:
        base = DeformParams.for_size(self.scene_size)
        return DeformParams(
            width=self.scene_size, height=self.scene_size,
            amplitude=self.amplitude if self.amplitude > 0 else base.amplitude,
            sigma=self.sigma if self.sigma > 0 else base.sigma,
            elastic_prob=self.elastic_prob,
            invert_iters=self.invert_iters, invert_tol=self.invert_tol,
        )

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(input_size=self.scene_size, n_classes=self.n_classes,
                             depth=self.depth, base_channels=self.base_channels)

    def train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, lam=self.lam, rho=self.rho,
                           epsilon=self.epsilon, stage1_steps=self.stage1_steps,
                           finetune_steps=self.finetune_steps, patience=self.patience,
                           val_interval_steps=self.val_interval_steps,
                           n_classes=self.n_classes)


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _parse_value(key: str, raw: str):
    ftype = _FIELD_TYPES[key]
    try:
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {key}: cannot parse {raw!r} as {ftype}") from exc


def apply_overrides(cfg: ExperimentConfig, pairs: list[str]) -> ExperimentConfig:
    """Apply 'key=value' overrides in place; unknown keys are errors."""
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, _parse_value(key, raw.strip()))
    return cfg


def load_config(path) -> ExperimentConfig:
    """Read a key=value file ('#' comments, blank lines allowed)."""
    cfg = ExperimentConfig()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            apply_overrides(cfg, [line])
    return cfg


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        for f in fields(ExperimentConfig):
            fh.write(f"{f.name}={getattr(cfg, f.name)}\n")
