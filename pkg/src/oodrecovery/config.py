"""Run configuration: defaults, a JSON config file, and flag overrides (flags > file > defaults)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .envs import DEFAULT_LAMBDA, make_env
from .pipeline import PIPELINE_TEMPERATURE
from .retrain import RetrainConfig, TrainConfig
from .sac import SacConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    env: str = "cartpole"
    seed: int = 0
    gamma: float = 0.99
    beta1: float = 0.9
    beta2: float = 0.99
    policy_lr: float = 3e-4
    q_lr: float = 3e-4
    alpha_lr: float = 3e-4
    hidden: int = 256  # width of both hidden layers
    batch_size: int = 256
    buffer_size: int = 1_000_000
    total_steps: int = 1_000_000
    eval_episodes: int = 5
    eval_interval: int = 5000
    temperature: float = PIPELINE_TEMPERATURE
    lam: float | None = None  # None: per-environment default
    grad_steps_per_env_step: int = 1
    learning_starts: int = 256
    random_steps: int = 1000
    checkpoint_interval: int = 50_000
    backend: str = "recorded"
    endpoint: str | None = None
    model: str | None = None
    transcript: str | None = None
    fewshot: str | None = None
    out: str = "runs"

    def validate(self) -> RunConfig:
        make_env(self.env)
        if self.backend not in ("live", "recorded"):
            raise ConfigError(f"backend must be 'live' or 'recorded', got {self.backend!r}")
        if self.temperature != PIPELINE_TEMPERATURE:
            raise ConfigError("temperature is fixed at 0.0")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must lie in (0, 1)")
        if self.lam is not None and not self.lam >= 0.0:
            raise ConfigError("lam must be >= 0")
        for name in ("batch_size", "buffer_size", "eval_interval", "checkpoint_interval", "hidden"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("total_steps", "eval_episodes", "grad_steps_per_env_step", "learning_starts", "random_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        return self

    @property
    def effective_lam(self) -> float:
        return DEFAULT_LAMBDA[self.env] if self.lam is None else self.lam

    def sac_config(self) -> SacConfig:
        return SacConfig(gamma=self.gamma, policy_lr=self.policy_lr, q_lr=self.q_lr, alpha_lr=self.alpha_lr,
                         beta1=self.beta1, beta2=self.beta2, hidden=(self.hidden, self.hidden))

    def retrain_config(self, seed: int | None = None) -> RetrainConfig:
        return RetrainConfig(
            lam=self.effective_lam, total_steps=self.total_steps, eval_interval=self.eval_interval,
            eval_episodes=self.eval_episodes, grad_steps_per_env_step=self.grad_steps_per_env_step,
            seed=self.seed if seed is None else seed, batch_size=self.batch_size, buffer_size=self.buffer_size,
            learning_starts=self.learning_starts, checkpoint_interval=self.checkpoint_interval,
            sac=self.sac_config())

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(
            total_steps=self.total_steps, eval_interval=self.eval_interval, eval_episodes=self.eval_episodes,
            seed=self.seed if seed is None else seed, batch_size=self.batch_size, buffer_size=self.buffer_size,
            random_steps=self.random_steps, checkpoint_interval=self.checkpoint_interval, sac=self.sac_config())

    def to_dict(self) -> dict:
        return asdict(self)


FIELD_NAMES = tuple(f.name for f in fields(RunConfig))


def load_config_file(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = sorted(set(doc) - set(FIELD_NAMES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return doc


def resolve(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file, then flags; ``None`` flag values mean "not given"."""
    values = RunConfig().to_dict()
    values.update(file_values or {})
    values.update({k: v for k, v in (overrides or {}).items() if v is not None and k in FIELD_NAMES})
    return RunConfig(**values).validate()


def show_defaults() -> str:
    return json.dumps(RunConfig().to_dict(), indent=2) + "\n"
