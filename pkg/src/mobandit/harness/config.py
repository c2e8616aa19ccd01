"""Experiment configuration: YAML documents validated with pydantic.

Unknown keys are rejected everywhere and validation errors carry the dotted
path of the offending field.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Annotated, Literal, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ..core import EnvSpec, RewardTable, TabularPolicy
from ..train import TrainConfig
from . import presets

OUTPUT_DIR_ENV = "MOBANDIT_OUTPUT_DIR"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending path."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class EnvSection(_Strict):
    num_prompts: int = Field(ge=1)
    vocab_size: int = Field(ge=1)
    out_len: int = Field(ge=1)
    num_objectives: int = Field(ge=1)
    reward_bound: float = Field(default=1.0, gt=0)
    enumeration_cap: int = Field(default=4096, ge=1)


class TableRewards(_Strict):
    mode: Literal["table"]
    values: list


class PresetRewards(_Strict):
    mode: Literal["preset"]
    name: str

    @field_validator("name")
    @classmethod
    def _known(cls, v):
        if v not in presets.REWARD_PRESETS:
            raise ValueError(f"unknown reward preset {v!r}; choose from {presets.REWARD_PRESETS}")
        return v


class RandomRewards(_Strict):
    mode: Literal["random"]
    seed: int = 0
    low: float = -1.0
    high: float = 1.0


Rewards = Annotated[Union[TableRewards, PresetRewards, RandomRewards], Field(discriminator="mode")]


class PolicySection(_Strict):
    init: Literal["zeros", "logits", "random", "preset"] = "zeros"
    logits: list | None = None
    seed: int = 0
    scale: float = 1.0


class TrainSection(_Strict):
    algorithm: Literal["reinforce", "grpo"] = "grpo"
    learning_rate: float = Field(default=presets.DESK_LEARNING_RATE, ge=0)
    group_size: int = Field(default=16, ge=1)
    batch_prompts: int = Field(default=32, ge=1)
    eps_clip: float = Field(default=0.2, gt=0, lt=1)
    beta_kl: float = Field(default=0.0, ge=0)
    lambda_entropy: float = Field(default=0.0, ge=0)
    steps: int = Field(default=100, ge=0)
    seed: int = 0
    inner_epochs: int = Field(default=1, ge=1)
    natural: bool = False
    normalize_surrogate: bool = False
    kl_reference: Literal["initial", "old"] = "initial"
    momentum: float = Field(default=0.0, ge=0, lt=1)
    diagnostics: bool = True

    @model_validator(mode="after")
    def _group(self):
        if self.algorithm == "grpo" and self.group_size < 2:
            raise ValueError("grpo requires group_size >= 2")
        return self


class LinearCtl(_Strict):
    tag: Literal["linear"]
    weights: list[float] | None = None


class CtwaCtl(_Strict):
    tag: Literal["ctwa"]
    init_weights: list[float] | None = None
    targets: list[float]
    ema_rate: float = Field(default=0.1, gt=0, le=1)
    weight_lr: float = Field(default=0.05, gt=0)


class TchebycheffCtl(_Strict):
    tag: Literal["tchebycheff"]
    weights: list[float] | None = None


class LagrangianCtl(_Strict):
    tag: Literal["lagrangian"]
    targets: list[float]
    dual_lr: float = Field(default=0.01, gt=0)
    primary: int = Field(default=0, ge=0)


class MgdaCtl(_Strict):
    tag: Literal["mgda"]


class GradNormCtl(_Strict):
    tag: Literal["gradnorm"]
    alpha: float = 1.5
    weight_lr: float = Field(default=0.025, gt=0)


Controller = Annotated[
    Union[LinearCtl, CtwaCtl, TchebycheffCtl, LagrangianCtl, MgdaCtl, GradNormCtl],
    Field(discriminator="tag"),
]


class OutputSection(_Strict):
    path: str = "trajectory.csv"
    format: Literal["csv", "jsonl"] = "csv"
    flush_every: int = Field(default=1, ge=1)


class ExperimentConfig(_Strict):
    env: EnvSection
    rewards: Rewards
    policy: PolicySection = PolicySection()
    train: TrainSection = TrainSection()
    controller: Controller
    output: OutputSection = OutputSection()

    @model_validator(mode="after")
    def _consistent(self):
        M = self.env.num_objectives
        c = self.controller
        for name in ("weights", "init_weights"):
            w = getattr(c, name, None)
            if w is not None and len(w) != M:
                raise ValueError(f"controller.{name} needs {M} entries, got {len(w)}")
        if c.tag == "ctwa" and len(c.targets) != M:
            raise ValueError(f"controller.targets needs {M} entries, got {len(c.targets)}")
        if c.tag == "lagrangian":
            if len(c.targets) != M - 1:
                raise ValueError(f"controller.targets needs {M - 1} entries, got {len(c.targets)}")
            if c.primary >= M:
                raise ValueError("controller.primary out of range")
        if self.policy.init == "logits" and self.policy.logits is None:
            raise ValueError("policy.logits is required when policy.init is 'logits'")
        return self

    # -- resolution ---------------------------------------------------------

    def env_spec(self) -> EnvSpec:
        return EnvSpec(**self.env.model_dump())

    def reward_table(self) -> RewardTable:
        env = self.env_spec()
        r = self.rewards
        if r.mode == "table":
            values = np.asarray(r.values, dtype=float)
        elif r.mode == "preset":
            penv, values, _ = presets.reward_preset(r.name)
            for key, val in penv.items():
                if getattr(self.env, key) != val:
                    raise ConfigError(f"env.{key} = {getattr(self.env, key)} does not match preset {r.name!r} ({val})")
            values = np.asarray(values, dtype=float)
        else:
            rng = np.random.default_rng(r.seed)
            shape = (env.num_prompts, env.num_completions, env.num_objectives)
            values = rng.uniform(r.low, r.high, size=shape)
        try:
            return RewardTable.for_env(env, values)
        except ValueError as exc:
            raise ConfigError(f"rewards: {exc}") from exc

    def initial_policy(self) -> TabularPolicy:
        env = self.env_spec()
        p = self.policy
        if p.init == "zeros":
            return TabularPolicy(env)
        if p.init == "random":
            return TabularPolicy.random(env, np.random.default_rng(p.seed), p.scale)
        if p.init == "preset":
            if self.rewards.mode != "preset":
                raise ConfigError("policy.init 'preset' requires rewards.mode 'preset'")
            _, _, logits = presets.reward_preset(self.rewards.name)
            return TabularPolicy(env) if logits is None else TabularPolicy(env, np.asarray(logits))
        logits = np.asarray(p.logits, dtype=float)
        if logits.size != env.num_params:
            raise ConfigError(f"policy.logits has {logits.size} entries, expected {env.num_params}")
        return TabularPolicy(env, logits)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        t = self.train.model_dump()
        if seed is not None:
            t["seed"] = seed
        params = self.controller.model_dump(exclude={"tag"}, exclude_none=True)
        return TrainConfig(controller=self.controller.tag, controller_params=params, **t)

    def output_path(self, override: str | None = None) -> Path:
        raw = Path(override or self.output.path)
        if raw.is_absolute():
            return raw
        base = os.environ.get(OUTPUT_DIR_ENV)
        return Path(base) / raw if base else raw


def _format_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return "; ".join(lines)


def parse_config(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config document must be a mapping")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_error(exc)) from None


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from None
    return parse_config(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)


def preset_config(name: str) -> ExperimentConfig:
    return parse_config(presets.experiment_preset(name))
