from __future__ import annotations

import numpy as np

from typing import Mapping, Optional, Sequence
from dataclasses import dataclass, field, replace
from ranking import (
    FormatStatus,
    PermutationError,
    RankedList,
    parse_ranking,
    parse_response,
)

Grades = Mapping[str, int]


@dataclass
class RelevanceJudgments:
    """Graded labels per query, missing passages are graded 0."""

    grades: dict[str, dict[str, int]] = field(default_factory=dict)

    def __post_init__(self):
        for qid, per_query in self.grades.items():
            for id, grade in per_query.items():
                if grade < 0:
                    raise ValueError(f"negative grade for {qid}/{id}")

    def add(self, qid: str, id: str, grade: int):
        if grade < 0:
            raise ValueError(f"negative grade for {qid}/{id}")
        self.grades.setdefault(qid, {})[id] = grade

    def query(self, qid: str) -> Grades:
        return self.grades.get(qid, {})

    def __contains__(self, qid: object) -> bool:
        return qid in self.grades


@dataclass(frozen=True)
class RewardParams:
    phi: float = 0.2
    gamma: float = 0.1
    p: float = 0.9
    k: int = 10

    def __post_init__(self):
        if self.phi < 0 or self.gamma < 0:
            raise ValueError("reward weights must be non-negative")
        if not 0 < self.p < 1:
            raise ValueError(f"rbo persistence {self.p} not in (0, 1)")
        if self.k < 1:
            raise ValueError(f"cutoff {self.k} must be at least 1")


@dataclass(frozen=True)
class RewardBreakdown:
    ndcg: float
    recall: float
    rbo: float
    r_m: float
    final: Optional[float] = None
    format_status: Optional[FormatStatus] = None

    def with_format(self, status: FormatStatus) -> RewardBreakdown:
        return replace(
            self, format_status=status, final=final_reward(status, self.r_m)
        )

    @staticmethod
    def gated(status: FormatStatus) -> RewardBreakdown:
        """Breakdown of a rollout whose ranking is not trusted."""
        return RewardBreakdown(0.0, 0.0, 0.0, 0.0).with_format(status)

    def as_dict(self) -> dict:
        return {
            "ndcg": self.ndcg,
            "recall": self.recall,
            "rbo": self.rbo,
            "r_m": self.r_m,
            "final": self.final,
            "format_status": (
                self.format_status.value if self.format_status else None
            ),
        }


def _dcg(grades: np.ndarray) -> float:
    discounts = np.log2(np.arange(2, grades.size + 2))
    return float(np.sum((np.exp2(grades) - 1.0) / discounts))


def ndcg_at_k(ranked: Sequence[str], grades: Grades, k: int = 10) -> float:
    if k < 1:
        raise ValueError(f"cutoff {k} must be at least 1")
    ideal = sorted((g for g in grades.values() if g > 0), reverse=True)
    if len(ideal) == 0:
        return 0.0
    gains = np.array([grades.get(id, 0) for id in ranked[:k]], dtype=float)
    idcg = _dcg(np.array(ideal[:k], dtype=float))
    return _dcg(gains) / idcg


def recall_at_k(ranked: Sequence[str], grades: Grades, k: int = 10) -> float:
    if k < 1:
        raise ValueError(f"cutoff {k} must be at least 1")
    relevant = {id for id, grade in grades.items() if grade > 0}
    if len(relevant) == 0:
        return 0.0
    return len(relevant.intersection(ranked[:k])) / len(relevant)


def rbo(rollout: Sequence[str], gold: Sequence[str], p: float = 0.9) -> float:
    """Rank-biased overlap truncated at the list length."""
    if not 0 < p < 1:
        raise ValueError(f"rbo persistence {p} not in (0, 1)")
    if not RankedList(rollout).is_permutation_of(gold):
        raise PermutationError("rbo needs two rankings of the same ids")
    length = len(gold)
    if length == 0:
        return 0.0

    gold_position = {id: i for i, id in enumerate(gold)}
    # Depth at which each id has entered both prefixes
    joined = [max(i, gold_position[id]) for i, id in enumerate(rollout)]
    overlap = np.cumsum(np.bincount(joined, minlength=length))
    depth = np.arange(1, length + 1)
    return float((1 - p) * np.sum(p ** (depth - 1) * overlap / depth))


def multi_view_reward(
    rollout: Sequence[str],
    grades: Grades,
    gold: Sequence[str],
    params: RewardParams = RewardParams(),
) -> RewardBreakdown:
    ndcg = ndcg_at_k(rollout, grades, params.k)
    recall = recall_at_k(rollout, grades, params.k)
    overlap = rbo(rollout, gold, params.p)
    r_m = ndcg + params.phi * recall + params.gamma * overlap
    return RewardBreakdown(ndcg, recall, overlap, r_m)


def final_reward(status: FormatStatus, r_m: float) -> float:
    match status:
        case FormatStatus.BOTH_GOOD:
            return r_m
        case FormatStatus.OUTPUT_ONLY:
            return 0.0
        case _:
            return -1.0


def score_rollout(
    raw: str,
    grades: Grades,
    gold: Sequence[str],
    window_ids: Sequence[str],
    params: RewardParams = RewardParams(),
) -> RewardBreakdown:
    """Gate a raw rollout on its format and score its ranking."""
    response = parse_response(raw, len(window_ids))
    if response.format_status != FormatStatus.BOTH_GOOD:
        return RewardBreakdown.gated(response.format_status)

    assert response.answer is not None
    ranked, _ = parse_ranking(response.answer, window_ids)
    breakdown = multi_view_reward(ranked, grades, gold, params)
    return breakdown.with_format(FormatStatus.BOTH_GOOD)
