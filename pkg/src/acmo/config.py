"""Experiment configuration: pydantic models, loading, and hashing.

The same models serve as the JSON file schema consumed by the command line
and as the request bodies of the HTTP service.  ``ACMO_SEED`` in the
environment overrides the config's master seed at load time.
"""

from __future__ import annotations

import hashlib
import json
import os
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field

from acmo.problems import Problem, make_problem
from acmo.schedules import AlphaSchedule, ScheduleError, ScheduleSet, theory_alpha0_max

ENV_SEED = "ACMO_SEED"


class ConfigError(ValueError):
    """Raised when a config fails resolution against the registries."""


class AlphaConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["constant", "inv_sqrt", "step_decay"] = "constant"
    alpha0: float = Field(gt=0)
    factor: float = Field(default=0.1, gt=0, le=1)
    period: int = Field(default=1, ge=1)

    def build(self) -> AlphaSchedule:
        return AlphaSchedule(kind=self.kind, alpha0=self.alpha0,
                             factor=self.factor, period=self.period)


class ScheduleConfig(BaseModel):
    """Omitted fields resolve to regime defaults against the problem:
    practical uses ``beta0=0.9, delta0=1e-8``; theory uses ``beta0=1/50``,
    ``delta0=max(1.01*sigma, 1e-8)``, ``l_hat=L`` and the admissible maximal
    inverse-square-root step size."""

    model_config = ConfigDict(extra="forbid")

    mode: Literal["practical", "theory"] = "practical"
    alpha: Optional[AlphaConfig] = None
    beta0: Optional[float] = Field(default=None, ge=0, le=1)
    delta0: Optional[float] = Field(default=None, ge=0)
    l_hat: Optional[float] = Field(default=None, gt=0)


class ProblemConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    seed: int = 0
    params: Dict[str, Any] = Field(default_factory=dict)


class OptimizerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    params: Dict[str, Any] = Field(default_factory=dict)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    problem: ProblemConfig
    optimizer: OptimizerConfig
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    iterations: int = Field(ge=2)
    batch_size: int = Field(default=1, ge=1)
    weight_decay: float = Field(default=0.0, ge=0)
    decay_mode: Literal["coupled_l2", "decoupled"] = "coupled_l2"
    trials: int = Field(default=1, ge=1)
    seed: int = 0
    checks: List[str] = Field(default_factory=list)
    output_dir: Optional[str] = None
    log_full_metrics: bool = True
    store_vectors: bool = False
    store_batches: bool = False
    drop_remainder: bool = True
    workers: int = Field(default=1, ge=1)
    sweep: Optional[Dict[str, List[Any]]] = None


def apply_env_seed(data: dict) -> dict:
    raw = os.environ.get(ENV_SEED)
    if raw is not None and raw != "":
        try:
            data = dict(data)
            data["seed"] = int(raw)
        except ValueError as exc:
            raise ConfigError(f"{ENV_SEED} must be an integer, got {raw!r}") from exc
    return data


def load_config(path: str) -> ExperimentConfig:
    """Parse and validate a JSON config file, honoring ``ACMO_SEED``."""
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    return ExperimentConfig(**apply_env_seed(data))


def config_hash(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(cfg.model_dump(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def build_problem(cfg: ExperimentConfig) -> Problem:
    return make_problem(cfg.problem.name, cfg.problem.seed, cfg.problem.params)


def build_schedule(cfg: ScheduleConfig, problem: Problem) -> ScheduleSet:
    """Resolve a schedule config to a concrete :class:`ScheduleSet`."""
    if cfg.mode == "practical":
        if cfg.alpha is None:
            raise ConfigError("practical mode requires an explicit alpha schedule")
        beta0 = 0.9 if cfg.beta0 is None else cfg.beta0
        delta0 = 1e-8 if cfg.delta0 is None else cfg.delta0
        return ScheduleSet.practical(cfg.alpha.build(), beta0=beta0, delta0=delta0)

    l_hat = problem.meta.L if cfg.l_hat is None else cfg.l_hat
    if l_hat < problem.meta.L * (1 - 1e-12):
        raise ScheduleError(
            f"theory mode requires l_hat >= problem L ({problem.meta.L!r}), "
            f"got {l_hat!r}"
        )
    beta0 = 1.0 / 50.0 if cfg.beta0 is None else cfg.beta0
    delta0 = cfg.delta0
    if delta0 is None:
        delta0 = max(1.01 * problem.meta.sigma, 1e-8)
    if cfg.alpha is None:
        alpha = AlphaSchedule(kind="inv_sqrt", alpha0=theory_alpha0_max(l_hat))
    else:
        alpha = cfg.alpha.build()
    return ScheduleSet(mode="theory", alpha=alpha, beta0=beta0, delta0=delta0,
                       l_hat=l_hat, sigma=problem.meta.sigma)
