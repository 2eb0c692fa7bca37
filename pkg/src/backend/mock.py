"""Deterministic local backends used in tests and dry runs."""

from __future__ import annotations

import re
import zlib
import numpy as np

from enum import Enum
from typing import Optional
from abc import abstractmethod
from metrics import RelevanceJudgments
from ranking import format_ranking
from backend import (
    Backend,
    BackendConfig,
    ChatRequest,
    ChatResponse,
    Purpose,
    TransportError,
)

PASSAGE_LINE = re.compile(r"^(?:Passage )?\[(\d+)\]", re.MULTILINE)


def window_size(request: ChatRequest) -> int:
    if len(request.passage_ids) != 0:
        return len(request.passage_ids)
    indices = [
        int(k)
        for message in request.messages
        if message.role == "user"
        for k in PASSAGE_LINE.findall(message.content)
    ]
    return max(indices, default=0)


def format_selection(order: list[int]) -> str:
    if len(order) == 0:
        return "None"
    return " ".join(f"[{i + 1}]" for i in order)


class MockBackend(Backend):
    think: str = "t"

    @abstractmethod
    def order(self, request: ChatRequest) -> list[int]:
        """0-based window positions, most relevant first."""
        raise NotImplementedError()

    def select(self, request: ChatRequest) -> list[int]:
        return []

    def answer(self, request: ChatRequest) -> str:
        if request.purpose == Purpose.RANK:
            ranking = format_ranking(self.order(request))
            return f"<think>{self.think}</think><answer>{ranking}</answer>"
        return format_selection(self.select(request))

    async def send(
        self, request: ChatRequest, config: BackendConfig
    ) -> ChatResponse:
        text = self.answer(request)
        prompt_tokens = sum(len(m.content.split()) for m in request.messages)
        return ChatResponse(
            text=text,
            prompt_tokens=prompt_tokens,
            completion_tokens=len(text.split()),
        )


class IdentityBackend(MockBackend):
    def order(self, request: ChatRequest) -> list[int]:
        return list(range(window_size(request)))


class ReverseBackend(MockBackend):
    def order(self, request: ChatRequest) -> list[int]:
        return list(reversed(range(window_size(request))))


class OracleBackend(MockBackend):
    """Ranks by hidden judgments, grade descending then window order.

    Selection requests list the graded passages as positives, and the
    configured hard negatives when asked for hard negatives.
    """

    judgments: RelevanceJudgments
    hard_negatives: dict[str, set[str]]

    def __init__(
        self,
        judgments: RelevanceJudgments,
        hard_negatives: Optional[dict[str, set[str]]] = None,
    ):
        self.judgments = judgments
        self.hard_negatives = hard_negatives or {}

    def grades(self, request: ChatRequest) -> list[int]:
        if request.qid is None or len(request.passage_ids) == 0:
            raise ValueError("oracle backend needs qid and passage ids")
        grades = self.judgments.query(request.qid)
        return [grades.get(id, 0) for id in request.passage_ids]

    def order(self, request: ChatRequest) -> list[int]:
        grades = self.grades(request)
        return sorted(range(len(grades)), key=lambda i: (-grades[i], i))

    def select(self, request: ChatRequest) -> list[int]:
        if request.purpose == Purpose.POSITIVES:
            grades = self.grades(request)
            return [i for i, grade in enumerate(grades) if grade > 0]
        assert request.qid is not None
        hard = self.hard_negatives.get(request.qid, set())
        return [i for i, id in enumerate(request.passage_ids) if id in hard]


class NoisyBackend(MockBackend):
    """Applies seeded adjacent swaps to another mock's ranking.

    The generator is derived from the seed and the prompt text, so the
    answer to a request does not depend on call order.
    """

    seed: int
    swap_rate: float
    inner: MockBackend

    def __init__(
        self,
        seed: int,
        swap_rate: float,
        inner: Optional[MockBackend] = None,
    ):
        if not 0 <= swap_rate <= 1:
            raise ValueError(f"swap rate {swap_rate} not in [0, 1]")
        self.seed = seed
        self.swap_rate = swap_rate
        self.inner = inner or IdentityBackend()

    def generator(self, request: ChatRequest) -> np.random.Generator:
        text = "\n".join(m.content for m in request.messages)
        return np.random.default_rng([self.seed, zlib.crc32(text.encode())])

    def order(self, request: ChatRequest) -> list[int]:
        order = self.inner.order(request)
        rng = self.generator(request)
        for i in range(len(order) - 1):
            if rng.random() < self.swap_rate:
                order[i], order[i + 1] = order[i + 1], order[i]
        return order

    def select(self, request: ChatRequest) -> list[int]:
        return self.inner.select(request)


class MalformedMode(Enum):
    NO_TAGS = "no-tags"
    NO_THINK = "no-think"
    BAD_ANSWER = "bad-answer"
    PARTIAL = "partial"
    DUPLICATES = "duplicates"
    EMPTY = "empty"


class MalformedBackend(MockBackend):
    mode: MalformedMode

    def __init__(self, mode: MalformedMode = MalformedMode.NO_TAGS):
        self.mode = mode

    def order(self, request: ChatRequest) -> list[int]:
        return list(range(window_size(request)))

    def answer(self, request: ChatRequest) -> str:
        m = window_size(request)
        ranking = format_ranking(self.order(request))
        match self.mode:
            case MalformedMode.NO_TAGS:
                return f"I think the order is {ranking}"
            case MalformedMode.NO_THINK:
                return f"<answer>{ranking}</answer>"
            case MalformedMode.BAD_ANSWER:
                return "<think>t</think><answer>hello</answer>"
            case MalformedMode.PARTIAL:
                partial = format_ranking(list(range(max(m - 1, 0))))
                return f"<think>t</think><answer>{partial}</answer>"
            case MalformedMode.DUPLICATES:
                return f"<think>t</think><answer>{ranking} > [1]</answer>"
            case _:
                return ""


class FlakyBackend(Backend):
    """Fails the first `failures` attempts with a transport error."""

    inner: Backend
    failures: int
    status: Optional[int]
    calls: int

    def __init__(
        self, inner: Backend, failures: int, status: Optional[int] = 503
    ):
        self.inner = inner
        self.failures = failures
        self.status = status
        self.calls = 0

    async def send(
        self, request: ChatRequest, config: BackendConfig
    ) -> ChatResponse:
        self.calls += 1
        if self.calls <= self.failures:
            raise TransportError(
                f"injected failure {self.calls}/{self.failures}",
                request.request_id,
                status=self.status,
            )
        return await self.inner.send(request, config)
