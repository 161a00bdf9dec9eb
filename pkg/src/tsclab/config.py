"""Experiment configuration: one flat dataclass loaded from JSON."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .controllers import KINDS

VARIANTS = ("baseline", "latent", "latent+tran_rs", "latent+rew_rs", "full")
FLOWS = ("mixed_low", "mixed_high", "replay")


class ConfigError(ValueError):
    """Invalid or unknown configuration values."""


@dataclass
class ExperimentConfig:
    # scenario
    roadnet: str | None = None
    grid_rows: int = 2
    grid_cols: int = 2
    flow: str = "mixed_low"
    flow_path: str | None = None
    poisson_arrivals: bool = False
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    iterations: int = 100
    horizon: float = 3600.0
    control_interval: float = 5.0
    variant: str = "full"
    # reward
    reward_weight: float = -1.0
    queue_mode: str = "stopped"
    q_scale: float = 50.0
    alpha: float = 0.1
    # encoder and decoders
    latent_dim: int = 5
    encoder_embed: int = 40
    encoder_hidden: int = 64
    decoder_hidden: list[int] = field(default_factory=lambda: [32, 32])
    vae_lr: float = 1e-3
    vae_minibatch: int = 25
    elbo_coef: float = 1.0
    elbo_stride: int = 60
    vae_buffer_capacity: int = 100_000
    vae_updates_per_iteration: int = 1
    # policy
    policy_hidden: list[int] = field(default_factory=lambda: [32, 32])
    policy_lr: float = 7e-4
    adam_eps: float = 1e-5
    gamma: float = 0.95
    gae_lambda: float = 0.95
    ppo_clip: float = 0.2
    ppo_epochs: int = 4
    policy_minibatch: int = 16
    value_loss_coef: float = 0.5
    entropy_coef: float = 0.01
    rollout_capacity: int = 60
    # evaluation and ablation
    eval_mode: str = "greedy"
    ablation_scenarios: list[str] = field(default_factory=lambda: ["mixed_low", "mixed_high"])
    # classical controllers
    fixedtime_plan: list[float] = field(default_factory=lambda: [30.0, 30.0, 30.0, 30.0])
    fixedtime_offsets: list[float] = field(default_factory=list)
    sotl_threshold: float = 30.0
    sotl_min_green: float = 10.0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.control_interval <= 0 or self.horizon <= 0:
            raise ConfigError("horizon and control_interval must be positive")
        steps = self.horizon / self.control_interval
        if abs(steps - round(steps)) > 1e-9:
            raise ConfigError("horizon must be divisible by control_interval")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if self.variant not in VARIANTS and not self.variant.startswith("classical:"):
            raise ConfigError(f"variant {self.variant!r} not in {VARIANTS} or classical:<kind>")
        if self.variant.startswith("classical:") and self.variant.split(":", 1)[1] not in KINDS:
            raise ConfigError(f"unknown classical controller in variant {self.variant!r}")
        if self.flow not in FLOWS:
            raise ConfigError(f"flow {self.flow!r} not in {FLOWS}")
        if self.flow == "replay" and not self.flow_path:
            raise ConfigError("flow 'replay' needs flow_path")
        for name in ("q_scale", "vae_lr", "elbo_stride", "vae_minibatch", "vae_buffer_capacity",
                     "rollout_capacity", "policy_minibatch", "ppo_epochs", "latent_dim",
                     "encoder_embed", "encoder_hidden"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.alpha < 0 or self.policy_lr < 0:
            raise ConfigError("alpha and policy_lr must be non-negative")
        if self.reward_weight >= 0:
            raise ConfigError("reward_weight must be negative")
        if self.queue_mode not in ("stopped", "total"):
            raise ConfigError("queue_mode must be 'stopped' or 'total'")
        if self.eval_mode not in ("greedy", "sample"):
            raise ConfigError("eval_mode must be 'greedy' or 'sample'")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.control_interval))

    @property
    def classical_kind(self) -> str | None:
        return self.variant.split(":", 1)[1] if self.variant.startswith("classical:") else None

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> ExperimentConfig:
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path | None) -> ExperimentConfig:
        if path is None:
            return cls()
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(doc)
