"""Experiment configuration: strict schema, defaults, fingerprints.

Configs are JSON with sections sim / model / train / adapt / eval plus a
global seed and output directory. Unknown keys anywhere are rejected with
the offending path; omitted keys take the defaults below, and the fully
resolved config (defaults included) is what gets fingerprinted and logged,
so silent defaults are always visible in reports.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .adapt import AdaptConfig
from .formats import fingerprint
from .model import ModelConfig
from .sim.world import WorldConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimSection:
    episodes_per_env: int = 334
    episode_length: int = 50
    n_balls: int = 4
    world: WorldConfig = field(default_factory=WorldConfig)


@dataclass(frozen=True)
class TrainSection:
    baseline_steps: int = 3000
    steps: int = 7000
    lr: float = 5e-5
    batch_size: int = 128
    lambda_init: float = 1e3
    alpha: float = 5e3
    beta_ma: float = 0.99
    lambda_min: float = 1e-2
    lambda_max: float = 1e6
    max_log_rate: float = 0.7
    val_fraction: float = 0.1
    val_every: int = 250
    log_every: int = 25

    def baseline_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            lr=self.lr, batch_size=self.batch_size, steps=self.baseline_steps,
            lambda_init=self.lambda_init, alpha=self.alpha, beta_ma=self.beta_ma,
            lambda_min=self.lambda_min, lambda_max=self.lambda_max,
            max_log_rate=self.max_log_rate, seed=seed,
            val_fraction=self.val_fraction, val_every=self.val_every,
            log_every=self.log_every,
        )

    def spartan_config(self, seed: int) -> TrainConfig:
        return dataclasses.replace(self.baseline_config(seed), steps=self.steps)


@dataclass(frozen=True)
class AdaptSection:
    n_trajectories: int = 5
    steps: int = 150
    lr: float = 1e-2
    init: str = "per-codebook-restart"
    heldout_trajectories: int = 20
    finetune_steps: int = 200
    finetune_lr: float = 1e-4
    envs: tuple = (0, 1, 2, 3, 4, 5, 6, 7)

    def adapt_config(self, seed: int) -> AdaptConfig:
        return AdaptConfig(n_trajectories=self.n_trajectories, steps=self.steps, lr=self.lr,
                           init=self.init, seed=seed)


@dataclass(frozen=True)
class EvalSection:
    protocols: tuple = ("shd", "rollout", "robustness", "targets")
    max_episodes: int = 200
    horizon: int = 10
    n_thresholds: int = 50
    robustness_transitions_per_env: int = 400
    export_graphs: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    sim: SimSection = field(default_factory=SimSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSection = field(default_factory=TrainSection)
    adapt: AdaptSection = field(default_factory=AdaptSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return _as_dict(self)

    def fingerprint(self) -> str:
        return fingerprint(self.to_dict())


def _as_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _as_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_as_dict(v) for v in obj]
    return obj


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {unknown}; valid keys: {sorted(known)}")
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        val = data[name]
        sub = f.type if isinstance(f.type, type) else None
        nested = {
            "world": WorldConfig, "sim": SimSection, "model": ModelConfig,
            "train": TrainSection, "adapt": AdaptSection, "eval": EvalSection,
        }.get(name)
        if nested is not None:
            kwargs[name] = _build(nested, val, f"{path}.{name}")
        elif isinstance(val, list):
            kwargs[name] = tuple(val)
        else:
            kwargs[name] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Load + strictly validate a config file; None gives pure defaults."""
    data = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if overrides:
        data = {**data, **overrides}
    return _build(ExperimentConfig, data, "config")
