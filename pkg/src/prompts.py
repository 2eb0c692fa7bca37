from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence, Union
from backend import ChatMessage, ChatRequest, Purpose

PROMPTS_DIRECTORY = Path(__file__).resolve().parent.parent / "prompts"

ACKNOWLEDGE = "Okay, please provide the passages."
RECEIVED = "Received passage [{k}]"


def load_template(name: Union[str, Path]) -> str:
    """Read a template by file name from `prompts/`, or by path."""
    path = Path(name)
    if not path.exists():
        path = PROMPTS_DIRECTORY / name
    with open(path, "r") as file:
        return file.read().rstrip("\n")


def truncate(text: str, max_chars: Optional[int]) -> str:
    if max_chars is None or len(text) <= max_chars:
        return text
    return text[:max_chars]


class RankingPrompt:
    """Single-turn listwise prompt, passages numbered `[1]..[m]`."""

    template: str
    max_chars: Optional[int]

    def __init__(
        self,
        template: Union[str, Path] = "rerank.txt",
        max_chars: Optional[int] = None,
    ):
        self.template = load_template(template)
        self.max_chars = max_chars

    def request(
        self,
        query: str,
        passages: Sequence[str],
        qid: Optional[str] = None,
        passage_ids: Sequence[str] = (),
    ) -> ChatRequest:
        block = "\n\n".join(
            f"[{k}]: {truncate(text, self.max_chars)}"
            for k, text in enumerate(passages, start=1)
        )
        content = self.template.format(
            num=len(passages), query=query, passages=block
        )
        return ChatRequest(
            messages=(ChatMessage("user", content),),
            purpose=Purpose.RANK,
            qid=qid,
            passage_ids=tuple(passage_ids),
        )


class ConversationPrompt(RankingPrompt):
    """Multi-turn listwise prompt feeding one passage per turn."""

    final: str

    def __init__(
        self,
        intro: Union[str, Path] = "listwise_intro.txt",
        final: Union[str, Path] = "listwise_final.txt",
        max_chars: Optional[int] = None,
    ):
        super().__init__(intro, max_chars)
        self.final = load_template(final)

    def request(
        self,
        query: str,
        passages: Sequence[str],
        qid: Optional[str] = None,
        passage_ids: Sequence[str] = (),
    ) -> ChatRequest:
        num = len(passages)
        messages = [
            ChatMessage("user", self.template.format(num=num, query=query)),
            ChatMessage("assistant", ACKNOWLEDGE),
        ]
        for k, text in enumerate(passages, start=1):
            text = truncate(text, self.max_chars)
            messages.append(ChatMessage("user", f"[{k}] {text}"))
            messages.append(ChatMessage("assistant", RECEIVED.format(k=k)))
        messages.append(
            ChatMessage("user", self.final.format(num=num, query=query))
        )
        return ChatRequest(
            messages=tuple(messages),
            purpose=Purpose.RANK,
            qid=qid,
            passage_ids=tuple(passage_ids),
        )


class SelectionPrompt:
    """Positive or hard-negative selection over a candidate pool."""

    template: str
    purpose: Purpose
    max_chars: Optional[int]

    def __init__(
        self,
        template: Union[str, Path],
        purpose: Purpose,
        max_chars: Optional[int] = None,
    ):
        self.template = load_template(template)
        self.purpose = purpose
        self.max_chars = max_chars

    def request(
        self,
        query: str,
        answer: str,
        passages: Sequence[str],
        qid: Optional[str] = None,
        passage_ids: Sequence[str] = (),
    ) -> ChatRequest:
        block = "\n\n".join(
            f"Passage [{k}]: {truncate(text, self.max_chars)}"
            for k, text in enumerate(passages, start=1)
        )
        content = self.template.format(
            query=query, answer=answer, passages=block
        )
        return ChatRequest(
            messages=(ChatMessage("user", content),),
            purpose=self.purpose,
            qid=qid,
            passage_ids=tuple(passage_ids),
        )
