import os
import openai

from logging import Logger
from openai import AsyncOpenAI
from backend import (
    API_KEY_VARIABLE,
    Backend,
    BackendConfig,
    ChatRequest,
    ChatResponse,
    ProtocolError,
    TransportError,
)


def is_retryable(status: int) -> bool:
    return status == 429 or 500 <= status < 600


class HttpBackend(Backend):
    """OpenAI-compatible `/chat/completions` endpoint.

    SDK retries are disabled, the gateway owns the retry policy.
    """

    client: AsyncOpenAI

    def __init__(self, logger: Logger, config: BackendConfig):
        api_key = os.environ.get(API_KEY_VARIABLE)
        if api_key is None:
            logger.warning(f"{API_KEY_VARIABLE} is not set")
            api_key = "EMPTY"
        self.client = AsyncOpenAI(
            api_key=api_key,
            base_url=config.endpoint,
            timeout=config.timeout,
            max_retries=0,
        )

    async def send(
        self, request: ChatRequest, config: BackendConfig
    ) -> ChatResponse:
        try:
            completion = await self.client.chat.completions.create(
                model=config.model,
                messages=[m.as_dict() for m in request.messages],
                temperature=config.temperature,
                max_tokens=config.max_tokens,
                extra_headers={"X-Request-ID": request.request_id},
            )
        except openai.APIConnectionError as error:
            # Also covers openai.APITimeoutError
            raise TransportError(str(error), request.request_id) from error
        except openai.APIStatusError as error:
            if is_retryable(error.status_code):
                raise TransportError(
                    str(error), request.request_id, status=error.status_code
                ) from error
            raise ProtocolError(
                f"status {error.status_code}: {error.message}",
                request.request_id,
            ) from error
        except openai.APIError as error:
            # Unreadable bodies and anything else the client rejects
            raise ProtocolError(str(error), request.request_id) from error

        if len(completion.choices) == 0:
            raise ProtocolError("response has no choices", request.request_id)

        message = completion.choices[0].message
        text = message.content or ""
        # R1-style servers return the reasoning beside the content
        reasoning = getattr(message, "reasoning_content", None)
        if reasoning and "<think>" not in text:
            text = f"<think>{reasoning}</think>{text}"

        usage = completion.usage
        return ChatResponse(
            text=text,
            prompt_tokens=usage.prompt_tokens if usage else None,
            completion_tokens=usage.completion_tokens if usage else None,
        )
