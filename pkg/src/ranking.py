# Allow referencing a class within its own body
from __future__ import annotations

import re

from enum import Enum
from typing import Iterable, Optional, Sequence
from dataclasses import dataclass, asdict


class PermutationError(ValueError):
    pass


class FormatStatus(Enum):
    BOTH_GOOD = "BothGood"
    OUTPUT_ONLY = "OutputOnly"
    BAD = "Bad"


@dataclass(frozen=True)
class Passage:
    id: str
    text: str
    source: Optional[str] = None

    def __post_init__(self):
        if not self.id:
            raise ValueError("passage id must not be empty")


@dataclass(frozen=True)
class Query:
    """A search query.

    `rewritten` is only ever used upstream for retrieval, reranking prompts
    always carry `text`.
    """

    qid: str
    text: str
    rewritten: Optional[str] = None

    def __post_init__(self):
        if not self.qid:
            raise ValueError("query id must not be empty")
        if not self.text:
            raise ValueError(f"query {self.qid} has no text")


class RankedList(tuple[str, ...]):
    """Ordered sequence of distinct passage ids."""

    def __new__(cls, ids: Iterable[str] = ()) -> RankedList:
        self = super().__new__(cls, ids)
        if len(set(self)) != len(self):
            raise PermutationError(f"duplicate ids in ranking {self!r}")
        return self

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(self)

    def is_permutation_of(self, ids: Iterable[str]) -> bool:
        other = list(ids)
        return len(other) == len(self) and set(other) == set(self)

    def __repr__(self) -> str:
        return f"RankedList({tuple.__repr__(self)})"


@dataclass(frozen=True)
class CandidateList:
    """Retriever-ordered candidates for one query, best first."""

    qid: str
    entries: tuple[tuple[str, float], ...]

    def __post_init__(self):
        ids = [id for id, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise PermutationError(f"duplicate candidates for {self.qid}")
        scores = [score for _, score in self.entries]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError(f"candidate scores of {self.qid} increase")

    @property
    def ids(self) -> RankedList:
        return RankedList(id for id, _ in self.entries)

    def top(self, n: int) -> CandidateList:
        return CandidateList(self.qid, self.entries[:n])

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class ModelResponse:
    raw: str
    think: Optional[str]
    answer: Optional[str]
    format_status: FormatStatus


@dataclass(frozen=True)
class RepairReport:
    out_of_range: int = 0
    duplicates: int = 0
    appended: int = 0
    full_repair: bool = False

    @property
    def repaired(self) -> bool:
        return bool(self.out_of_range or self.duplicates or self.appended)

    def as_dict(self) -> dict:
        return asdict(self)


THINK = re.compile(r"<think>(.*?)</think>", re.DOTALL)
ANSWER = re.compile(r"<answer>(.*?)</answer>", re.DOTALL)
TOKEN = re.compile(r"\[(\d+)\]")
GRAMMAR = re.compile(r"\s*\[\d+\](?:\s*>\s*\[\d+\])*\s*")


def token_index(token: str, m: int) -> Optional[int]:
    """Value of a `[k]` token digit string, None unless 1 <= k <= m."""
    digits = token.lstrip("0")
    # Longer digit strings cannot be in range, and huge ones break int()
    if digits == "" or len(digits) > len(str(m)):
        return None
    k = int(digits)
    return k if k <= m else None


def validate_answer_grammar(answer: str, m: int) -> bool:
    """Strict check: `[i] > [j] > ...` listing each of 1..m exactly once."""
    if GRAMMAR.fullmatch(answer) is None:
        return False
    indices = []
    for token in TOKEN.findall(answer):
        k = token_index(token, m)
        if k is None:
            return False
        indices.append(k)
    return sorted(indices) == list(range(1, m + 1))


def parse_response(raw: str, m: Optional[int] = None) -> ModelResponse:
    """Split a model response into its reasoning and answer parts.

    When `m` is not given the answer is checked against its own token
    count, i.e. it must be a permutation of 1..len(tokens).
    """
    think_match = THINK.search(raw)
    answer_match = ANSWER.search(raw)
    think = think_match.group(1) if think_match else None
    answer = answer_match.group(1) if answer_match else None

    if think is None or answer is None:
        return ModelResponse(raw, think, answer, FormatStatus.BAD)

    if m is None:
        m = len(TOKEN.findall(answer))

    if m > 0 and validate_answer_grammar(answer, m):
        status = FormatStatus.BOTH_GOOD
    else:
        status = FormatStatus.OUTPUT_ONLY
    return ModelResponse(raw, think, answer, status)


def format_ranking(order: Sequence[int]) -> str:
    """0-based positions to `[i] > [j] > ...`."""
    return " > ".join(f"[{i + 1}]" for i in order)


def ranking_text(response: ModelResponse) -> str:
    """Text to read a ranking from, with or without answer tags."""
    if response.answer is not None:
        return response.answer
    return THINK.sub("", response.raw)


def parse_ranking(
    answer: str, window_ids: Sequence[str]
) -> tuple[RankedList, RepairReport]:
    """Map `[k]` tokens onto `window_ids`, repairing whatever is broken.

    Out-of-range indices are dropped, repeated indices keep their first
    occurrence and missing indices are appended in window order, so the
    result is always a permutation of `window_ids`.
    """
    m = len(window_ids)
    seen: list[int] = []
    out_of_range = 0
    duplicates = 0
    for token in TOKEN.findall(answer):
        k = token_index(token, m)
        if k is None:
            out_of_range += 1
        elif k in seen:
            duplicates += 1
        else:
            seen.append(k)

    missing = [k for k in range(1, m + 1) if k not in seen]
    order = seen + missing
    report = RepairReport(
        out_of_range=out_of_range,
        duplicates=duplicates,
        appended=len(missing),
        full_repair=len(seen) == 0,
    )
    return RankedList(window_ids[k - 1] for k in order), report
