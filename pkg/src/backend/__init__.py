from __future__ import annotations

import time
import uuid
import asyncio

from enum import Enum
from logging import Logger
from typing import Optional
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from tenacity import (
    AsyncRetrying,
    RetryCallState,
    retry_if_exception_type,
    stop_after_attempt,
    wait_exponential,
)

API_KEY_VARIABLE = "RERANK_API_KEY"


class BackendError(Exception):
    request_id: str
    attempts: int

    def __init__(self, message: str, request_id: str, attempts: int = 1):
        super().__init__(message)
        self.request_id = request_id
        self.attempts = attempts

    def __str__(self) -> str:
        return (
            f"{super().__str__()} "
            f"(request {self.request_id}, attempts: {self.attempts})"
        )


class TransportError(BackendError):
    """Retryable failure: connection problems, timeouts, 429 and 5xx."""

    status: Optional[int]

    def __init__(
        self,
        message: str,
        request_id: str,
        status: Optional[int] = None,
        attempts: int = 1,
    ):
        super().__init__(message, request_id, attempts)
        self.status = status


class ProtocolError(BackendError):
    """Terminal failure: the endpoint rejected or garbled the request."""

    pass


@dataclass(frozen=True)
class BackendConfig:
    endpoint: str = "http://localhost:8000/v1"
    model: str = "default"
    temperature: float = 0.0
    max_tokens: int = 4096
    timeout: float = 600.0
    retries: int = 2
    backoff_ms: int = 500
    concurrency: int = 8

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError(f"timeout {self.timeout} must be positive")
        if self.retries < 0:
            raise ValueError(f"retries {self.retries} must be >= 0")
        if self.concurrency < 1:
            raise ValueError(f"concurrency {self.concurrency} must be >= 1")

    @property
    def attempts(self) -> int:
        return self.retries + 1


class Purpose(Enum):
    RANK = "rank"
    POSITIVES = "positives"
    HARD_NEGATIVES = "hard-negatives"


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def as_dict(self) -> dict[str, str]:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class ChatRequest:
    """Role-tagged conversation sent to a backend.

    `purpose`, `qid` and `passage_ids` never go on the wire, they let local
    mocks answer without parsing prompts.
    """

    messages: tuple[ChatMessage, ...]
    purpose: Purpose = Purpose.RANK
    qid: Optional[str] = None
    passage_ids: tuple[str, ...] = ()
    request_id: str = field(default_factory=lambda: uuid.uuid4().hex)

    def __post_init__(self):
        if len(self.messages) == 0:
            raise ValueError("chat request without messages")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    prompt_tokens: Optional[int] = None
    completion_tokens: Optional[int] = None
    latency: float = 0.0
    attempts: int = 1
    request_id: Optional[str] = None


class Backend(ABC):
    """Single attempt at answering a chat request."""

    @abstractmethod
    async def send(
        self, request: ChatRequest, config: BackendConfig
    ) -> ChatResponse:
        raise NotImplementedError()


class Gateway:
    """Shared entry point to a backend.

    Bounds the number of requests in flight, retries transport failures
    with exponential backoff and stamps latency and attempt counts on
    every response.
    """

    logger: Logger
    backend: Backend
    config: BackendConfig
    permits: Optional[asyncio.Semaphore]
    loop: Optional[asyncio.AbstractEventLoop]

    def __init__(
        self, logger: Logger, backend: Backend, config: BackendConfig
    ):
        self.logger = logger
        self.backend = backend
        self.config = config
        self.permits = None
        self.loop = None

    def semaphore(self) -> asyncio.Semaphore:
        # A semaphore belongs to the loop it was first used on
        loop = asyncio.get_running_loop()
        if self.permits is None or self.loop is not loop:
            self.permits = asyncio.Semaphore(self.config.concurrency)
            self.loop = loop
        return self.permits

    def wait_strategy(self) -> wait_exponential:
        return wait_exponential(
            multiplier=self.config.backoff_ms / 1000.0, min=0, max=60
        )

    def on_retry(self, state: RetryCallState):
        exception = state.outcome.exception() if state.outcome else None
        delay = state.next_action.sleep if state.next_action else 0.0
        self.logger.warning(
            f"attempt {state.attempt_number} failed ({exception}), "
            f"retrying in {delay:.2f}s"
        )

    async def attempt(self, request: ChatRequest) -> ChatResponse:
        try:
            return await asyncio.wait_for(
                self.backend.send(request, self.config), self.config.timeout
            )
        except asyncio.TimeoutError:
            raise TransportError(
                f"no answer within {self.config.timeout}s", request.request_id
            )

    async def complete(self, request: ChatRequest) -> ChatResponse:
        attempts = 0
        response: Optional[ChatResponse] = None
        start = time.perf_counter()
        async with self.semaphore():
            try:
                async for attempt in AsyncRetrying(
                    stop=stop_after_attempt(self.config.attempts),
                    wait=self.wait_strategy(),
                    retry=retry_if_exception_type(TransportError),
                    before_sleep=self.on_retry,
                    reraise=True,
                ):
                    with attempt:
                        attempts = attempt.retry_state.attempt_number
                        response = await self.attempt(request)
            except BackendError as error:
                error.attempts = attempts
                self.logger.error(f"request failed: {error}")
                raise

        assert response is not None
        return replace(
            response,
            latency=time.perf_counter() - start,
            attempts=attempts,
            request_id=request.request_id,
        )
