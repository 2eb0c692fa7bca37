from __future__ import annotations

import time

from logging import Logger
from typing import Mapping, Optional, Sequence
from dataclasses import dataclass, field
from prompts import RankingPrompt
from backend import BackendError, Gateway
from ranking import (
    CandidateList,
    FormatStatus,
    PermutationError,
    Query,
    RankedList,
    RepairReport,
    parse_ranking,
    parse_response,
    ranking_text,
)


class WindowError(ValueError):
    pass


@dataclass(frozen=True)
class WindowParams:
    """List length bound `n`, window size `w` and step `s`."""

    n: int = 100
    w: int = 20
    s: int = 10

    def __post_init__(self):
        if self.n < 1:
            raise WindowError(f"list length bound {self.n} must be >= 1")
        if not 1 <= self.s <= self.w:
            raise WindowError(
                f"step {self.s} must be between 1 and the window {self.w}"
            )


@dataclass(frozen=True)
class WindowPlan:
    """Half-open ranges, back of the list first."""

    ranges: tuple[range, ...]

    def __len__(self) -> int:
        return len(self.ranges)

    def __iter__(self):
        return iter(self.ranges)


def plan_windows(params: WindowParams, list_len: int) -> WindowPlan:
    if list_len < 1:
        raise WindowError("cannot plan windows over an empty list")
    if list_len <= params.w:
        return WindowPlan((range(0, list_len),))

    starts = list(range(list_len - params.w, 0, -params.s))
    # Clamp the last window to the front instead of dropping it
    starts.append(0)
    return WindowPlan(
        tuple(
            range(start, min(start + params.w, list_len)) for start in starts
        )
    )


def apply_window(
    ranked: Sequence[str], window: range, result: Sequence[str]
) -> RankedList:
    current = tuple(ranked[window.start:window.stop])
    if not RankedList(result).is_permutation_of(current):
        raise PermutationError(
            f"window result {tuple(result)} does not reorder {current}"
        )
    return RankedList(
        (*ranked[: window.start], *result, *ranked[window.stop:])
    )


@dataclass(frozen=True)
class WindowTrace:
    window: range
    raw: str
    format_status: FormatStatus
    repair: RepairReport
    duration: float
    attempts: int = 1
    completion_tokens: Optional[int] = None
    # None when the response has no <think> block
    think_chars: Optional[int] = None


@dataclass
class TraceLog:
    qid: str
    windows: list[WindowTrace] = field(default_factory=list)

    @property
    def calls(self) -> int:
        return len(self.windows)

    @property
    def duration(self) -> float:
        return sum(w.duration for w in self.windows)

    @property
    def completion_tokens(self) -> Optional[int]:
        counts = [w.completion_tokens for w in self.windows]
        if any(count is None for count in counts):
            return None
        return sum(count for count in counts if count is not None)

    @property
    def reasoning_chars(self) -> Optional[float]:
        """Mean `<think>` length per window that had one."""
        counts = [w.think_chars for w in self.windows]
        lengths = [count for count in counts if count is not None]
        if len(lengths) == 0:
            return None
        return sum(lengths) / len(lengths)

    @property
    def reasoning_tokens(self) -> Optional[float]:
        """Mean completion tokens per window, when the backend counts them."""
        total = self.completion_tokens
        if total is None or self.calls == 0:
            return None
        return total / self.calls

    def format_failures(self) -> dict[FormatStatus, int]:
        failures = {FormatStatus.OUTPUT_ONLY: 0, FormatStatus.BAD: 0}
        for window in self.windows:
            if window.format_status in failures:
                failures[window.format_status] += 1
        return failures

    def repairs(self) -> dict[str, int]:
        totals = {"out_of_range": 0, "duplicates": 0, "appended": 0}
        for window in self.windows:
            totals["out_of_range"] += window.repair.out_of_range
            totals["duplicates"] += window.repair.duplicates
            totals["appended"] += window.repair.appended
        return totals


class QueryError(Exception):
    """A query could not be reranked, `trace` holds the finished windows."""

    qid: str
    trace: TraceLog

    def __init__(self, qid: str, trace: TraceLog, cause: Exception):
        super().__init__(f"query {qid} failed after {trace.calls} windows")
        self.qid = qid
        self.trace = trace
        self.__cause__ = cause


class Reranker:
    """Back-to-front sliding window pass over one query's candidates."""

    logger: Logger
    gateway: Gateway
    params: WindowParams
    prompt: RankingPrompt

    def __init__(
        self,
        logger: Logger,
        gateway: Gateway,
        params: WindowParams,
        prompt: Optional[RankingPrompt] = None,
    ):
        self.logger = logger
        self.gateway = gateway
        self.params = params
        self.prompt = prompt or RankingPrompt()

    async def rerank_query(
        self,
        query: Query,
        candidates: CandidateList,
        corpus: Mapping[str, str],
    ) -> tuple[RankedList, TraceLog]:
        if len(candidates) == 0:
            raise WindowError(f"query {query.qid} has no candidates")

        initial = candidates.top(self.params.n).ids
        ranked = initial
        trace = TraceLog(query.qid)
        for window in plan_windows(self.params, len(ranked)):
            ids = ranked[window.start:window.stop]
            request = self.prompt.request(
                query.text,
                [corpus[id] for id in ids],
                qid=query.qid,
                passage_ids=ids,
            )

            start = time.perf_counter()
            try:
                response = await self.gateway.complete(request)
            except BackendError as error:
                raise QueryError(query.qid, trace, error) from error
            duration = time.perf_counter() - start

            parsed = parse_response(response.text, len(ids))
            result, repair = parse_ranking(ranking_text(parsed), ids)
            ranked = apply_window(ranked, window, result)
            trace.windows.append(
                WindowTrace(
                    window=window,
                    raw=response.text,
                    format_status=parsed.format_status,
                    repair=repair,
                    duration=duration,
                    attempts=response.attempts,
                    completion_tokens=response.completion_tokens,
                    think_chars=(
                        len(parsed.think) if parsed.think is not None else None
                    ),
                )
            )

            if parsed.format_status != FormatStatus.BOTH_GOOD:
                self.logger.warning(
                    f"window [{window.start}, {window.stop}) answered "
                    f"{parsed.format_status.value}, repairs: "
                    f"{repair.as_dict()}"
                )
            else:
                self.logger.debug(f"window [{window.start}, {window.stop})")

        if not ranked.is_permutation_of(initial):
            raise PermutationError(f"query {query.qid} lost candidates")
        return ranked, trace
