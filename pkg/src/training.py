from __future__ import annotations

import numpy as np

from typing import Iterable, Optional, Sequence, Union
from dataclasses import dataclass, replace

EPSILON_STD = 1e-8
# Cap on log-ratios before exponentiation
MAX_LOG_RATIO = 50.0


@dataclass(frozen=True)
class TokenLogProbs:
    """Log-probabilities of the generated tokens, one per token."""

    values: tuple[float, ...]

    def __post_init__(self):
        array = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(array)):
            raise ValueError("token log-probabilities must be finite")
        if np.any(array > 0):
            raise ValueError("token log-probabilities must be <= 0")

    @staticmethod
    def of(values: Iterable[float]) -> TokenLogProbs:
        return TokenLogProbs(tuple(float(v) for v in values))

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class Rollout:
    """One sampled response of a group.

    The likelihood ratio is taken against `old` when given (pre-update
    policy snapshot), otherwise against `reference`. The KL penalty always
    uses `reference`.
    """

    reward: float
    policy: TokenLogProbs
    reference: TokenLogProbs
    old: Optional[TokenLogProbs] = None
    advantage: Optional[float] = None

    def __post_init__(self):
        if len(self.policy) != len(self.reference):
            raise ValueError(
                f"policy has {len(self.policy)} tokens, "
                f"reference has {len(self.reference)}"
            )
        if self.old is not None and len(self.old) != len(self.policy):
            raise ValueError("old policy log-probs are not aligned")
        if len(self.policy) == 0:
            raise ValueError("rollout has no tokens")

    @property
    def ratio_base(self) -> TokenLogProbs:
        return self.old if self.old is not None else self.reference


@dataclass(frozen=True)
class RolloutGroup:
    rollouts: tuple[Rollout, ...]

    @property
    def size(self) -> int:
        return len(self.rollouts)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.rollouts], dtype=float)

    def with_advantages(self) -> RolloutGroup:
        advantages = group_advantages(self.rewards)
        return RolloutGroup(
            tuple(
                replace(rollout, advantage=float(advantage))
                for rollout, advantage in zip(self.rollouts, advantages)
            )
        )


@dataclass(frozen=True)
class GrpoParams:
    epsilon: float = 0.2
    beta: float = 0.04

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"clip width {self.epsilon} must be positive")
        if self.beta < 0:
            raise ValueError(f"kl weight {self.beta} must be non-negative")


@dataclass(frozen=True)
class SftLoss:
    sum: float
    mean: float


@dataclass(frozen=True)
class GrpoLoss:
    loss: float
    surrogate: float
    kl: float


def sft_nll(label_logprobs: Union[TokenLogProbs, Sequence[float]]) -> SftLoss:
    """Negative log-likelihood of a label sequence."""
    if not isinstance(label_logprobs, TokenLogProbs):
        label_logprobs = TokenLogProbs.of(label_logprobs)
    if len(label_logprobs) == 0:
        raise ValueError("cannot compute a loss over zero tokens")
    total = -float(np.sum(label_logprobs.array))
    return SftLoss(sum=total, mean=total / len(label_logprobs))


def group_advantages(rewards: Sequence[float]) -> np.ndarray:
    """Rewards standardized within their group (population std)."""
    values = np.asarray(rewards, dtype=float)
    std = float(np.std(values))
    if std < EPSILON_STD:
        return np.zeros_like(values)
    return (values - values.mean()) / max(std, EPSILON_STD)


def kl_token(
    policy_lp: Union[float, np.ndarray], ref_lp: Union[float, np.ndarray]
) -> Union[float, np.ndarray]:
    """Non-negative per-token estimate of KL(policy || reference)."""
    delta = np.minimum(np.subtract(ref_lp, policy_lp), MAX_LOG_RATIO)
    return np.exp(delta) - delta - 1.0


def grpo_loss(group: RolloutGroup, params: GrpoParams) -> GrpoLoss:
    surrogates = []
    divergences = []
    low, high = 1.0 - params.epsilon, 1.0 + params.epsilon
    for rollout in group.rollouts:
        if rollout.advantage is None:
            raise ValueError("group advantages have not been computed")
        policy = rollout.policy.array
        log_ratio = policy - rollout.ratio_base.array
        ratio = np.exp(np.minimum(log_ratio, MAX_LOG_RATIO))
        advantage = rollout.advantage
        term = np.minimum(
            ratio * advantage, np.clip(ratio, low, high) * advantage
        )
        surrogates.append(term.mean())
        divergences.append(kl_token(policy, rollout.reference.array).mean())

    if len(surrogates) == 0:
        raise ValueError("empty rollout group")

    surrogate = float(np.mean(surrogates))
    kl = float(np.mean(divergences))
    return GrpoLoss(
        loss=-surrogate + params.beta * kl, surrogate=surrogate, kl=kl
    )
