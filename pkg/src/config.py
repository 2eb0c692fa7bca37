# Allow referencing a class within its own body
from __future__ import annotations

import yaml
import schema

from enum import Enum
from typing import Optional
from dataclasses import dataclass, field
from schema import Schema, And, Or, Use
from backend import BackendConfig
from metrics import RewardParams
from synthesis import LIST_CAP, POOL_SIZE
from training import GrpoParams
from window import WindowParams


class PromptStyle(Enum):
    SINGLE = "single"
    MULTI_TURN = "multi-turn"


PositiveInt = And(int, lambda n: 0 <= n)
StriclyPositiveInt = And(int, lambda n: 0 < n)
PositiveNumber = And(Or(int, float), lambda x: 0 <= x, Use(float))
StriclyPositiveNumber = And(Or(int, float), lambda x: 0 < x, Use(float))
Probability = And(Or(int, float), lambda x: 0 < x < 1, Use(float))
PromptStyleSchema = Use(PromptStyle)
Path = str


@dataclass
class RerankConfig:
    params: WindowParams = field(default_factory=WindowParams)
    max_passage_chars: Optional[int] = None
    prompt_style: PromptStyle = PromptStyle.SINGLE
    template: Optional[Path] = None

    schema = Schema(
        {
            schema.Optional("topn"): StriclyPositiveInt,
            schema.Optional("size"): StriclyPositiveInt,
            schema.Optional("stride"): StriclyPositiveInt,
            schema.Optional("max_passage_chars"): StriclyPositiveInt,
            schema.Optional("prompt_style"): PromptStyleSchema,
            schema.Optional("template"): Path,
        }
    )

    @staticmethod
    def build(d: dict) -> RerankConfig:
        return RerankConfig(
            params=WindowParams(
                n=d.get("topn", 100),
                w=d.get("size", 20),
                s=d.get("stride", 10),
            ),
            max_passage_chars=d.get("max_passage_chars"),
            prompt_style=PromptStyle(d.get("prompt_style", "single")),
            template=d.get("template"),
        )


@dataclass
class SynthesisConfig:
    """
    Labeling runs sample the labeling model at `temperature`, which is not the
    reranking temperature of the `backend` section.
    """

    alpha: float = 0.4
    cap: int = LIST_CAP
    pool_size: int = POOL_SIZE
    seed: int = 0
    max_passage_chars: Optional[int] = None
    temperature: float = 0.6
    max_tokens: Optional[int] = None

    schema = Schema(
        {
            schema.Optional("alpha"): PositiveNumber,
            schema.Optional("cap"): And(int, lambda n: 0 < n <= LIST_CAP),
            schema.Optional("pool_size"): StriclyPositiveInt,
            schema.Optional("seed"): PositiveInt,
            schema.Optional("max_passage_chars"): StriclyPositiveInt,
            schema.Optional("temperature"): PositiveNumber,
            schema.Optional("max_tokens"): StriclyPositiveInt,
        }
    )

    @staticmethod
    def build(d: dict) -> SynthesisConfig:
        return SynthesisConfig(
            alpha=float(d.get("alpha", 0.4)),
            cap=d.get("cap", LIST_CAP),
            pool_size=d.get("pool_size", POOL_SIZE),
            seed=d.get("seed", 0),
            max_passage_chars=d.get("max_passage_chars"),
            temperature=float(d.get("temperature", 0.6)),
            max_tokens=d.get("max_tokens"),
        )


BackendSchema = Schema(
    {
        schema.Optional("endpoint"): str,
        schema.Optional("model"): str,
        schema.Optional("temperature"): PositiveNumber,
        schema.Optional("max_tokens"): StriclyPositiveInt,
        schema.Optional("timeout"): StriclyPositiveNumber,
        schema.Optional("retries"): PositiveInt,
        schema.Optional("backoff_ms"): PositiveInt,
        schema.Optional("concurrency"): StriclyPositiveInt,
    }
)

RewardSchema = Schema(
    {
        schema.Optional("phi"): PositiveNumber,
        schema.Optional("gamma"): PositiveNumber,
        schema.Optional("rbo_p"): Probability,
        schema.Optional("k"): StriclyPositiveInt,
    }
)

GrpoSchema = Schema(
    {
        schema.Optional("epsilon"): StriclyPositiveNumber,
        schema.Optional("beta"): PositiveNumber,
    }
)


def build_backend(d: dict) -> BackendConfig:
    defaults = BackendConfig()
    return BackendConfig(
        endpoint=d.get("endpoint", defaults.endpoint),
        model=d.get("model", defaults.model),
        temperature=float(d.get("temperature", defaults.temperature)),
        max_tokens=d.get("max_tokens", defaults.max_tokens),
        timeout=float(d.get("timeout", defaults.timeout)),
        retries=d.get("retries", defaults.retries),
        backoff_ms=d.get("backoff_ms", defaults.backoff_ms),
        concurrency=d.get("concurrency", defaults.concurrency),
    )


def build_reward(d: dict) -> RewardParams:
    return RewardParams(
        phi=float(d.get("phi", 0.2)),
        gamma=float(d.get("gamma", 0.1)),
        p=float(d.get("rbo_p", 0.9)),
        k=d.get("k", 10),
    )


def build_grpo(d: dict) -> GrpoParams:
    return GrpoParams(
        epsilon=float(d.get("epsilon", 0.2)),
        beta=float(d.get("beta", 0.04)),
    )


@dataclass
class Configuration:
    backend: BackendConfig = field(default_factory=BackendConfig)
    rerank: RerankConfig = field(default_factory=RerankConfig)
    reward: RewardParams = field(default_factory=RewardParams)
    grpo: GrpoParams = field(default_factory=GrpoParams)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)

    schema = Schema(
        {
            schema.Optional("backend"): BackendSchema,
            schema.Optional("window"): Schema(RerankConfig.schema),
            schema.Optional("reward"): RewardSchema,
            schema.Optional("grpo"): GrpoSchema,
            schema.Optional("synthesis"): Schema(SynthesisConfig.schema),
        }
    )

    @staticmethod
    def build(d: dict) -> Configuration:
        return Configuration(
            backend=build_backend(d.get("backend", {})),
            rerank=RerankConfig.build(d.get("window", {})),
            reward=build_reward(d.get("reward", {})),
            grpo=build_grpo(d.get("grpo", {})),
            synthesis=SynthesisConfig.build(d.get("synthesis", {})),
        )

    @staticmethod
    def load(file_path: str) -> Configuration:
        with open(file_path, "r") as file:
            data_dictionnary = yaml.load(file, Loader=yaml.SafeLoader)
        if data_dictionnary is None:
            data_dictionnary = {}
        Configuration.schema.validate(data_dictionnary)
        return Configuration.build(data_dictionnary)
