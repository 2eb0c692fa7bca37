from __future__ import annotations

import re
import zlib
import asyncio
import logging
import numpy as np

from enum import Enum
from logging import Logger
from typing import Optional, Sequence, Union
from dataclasses import dataclass, field, replace
from report import table
from metrics import ndcg_at_k
from backend import BackendError, Gateway, Purpose
from prompts import ConversationPrompt, RankingPrompt, SelectionPrompt
from ranking import (
    Passage,
    Query,
    RankedList,
    TOKEN,
    format_ranking,
    token_index,
    parse_ranking,
    parse_response,
    ranking_text,
)

logger = logging.getLogger(__name__)

LIST_CAP = 20
POOL_SIZE = 40
SENTENCE_END = re.compile(r"(?<=[.!?])\s+")
BLANK_LINE = re.compile(r"\n[ \t]*\n")


class Domain(Enum):
    COMPLEX_QA = "complex-qa"
    CODING = "coding"
    MATH_PROBLEM = "math-problem"
    MATH_THEOREM = "math-theorem"
    WEB_SEARCH = "web-search"


POSITIVE_TEMPLATES = {
    Domain.COMPLEX_QA: "positives_complex_qa.txt",
    Domain.WEB_SEARCH: "positives_complex_qa.txt",
    Domain.CODING: "positives_coding.txt",
    Domain.MATH_PROBLEM: "positives_math_problem.txt",
    Domain.MATH_THEOREM: "positives_math_theorem.txt",
}


class SynthesisError(Exception):
    pass


class NoPositives(SynthesisError):
    pass


class LabelError(SynthesisError):
    pass


@dataclass(frozen=True)
class ListwiseLabel:
    think: str
    gold: RankedList

    def __post_init__(self):
        if len(self.gold) == 0:
            raise ValueError("gold ranking is empty")


@dataclass(frozen=True)
class CandidateRecord:
    """One line of the candidates file."""

    query: Query
    gold_answer: str
    domain: Domain
    candidates: tuple[Passage, ...]
    dataset: Optional[str] = None
    labels: Optional[dict[str, int]] = None

    @staticmethod
    def build(d: dict, max_chars: Optional[int] = None) -> CandidateRecord:
        candidates = [
            Passage(str(c["id"]), c["text"], c.get("source"))
            for c in d.get("candidates", [])
        ]
        for document in d.get("documents", []):
            segments = split_document(document["text"], max_chars)
            candidates.extend(
                Passage(f"{document['id']}#{n}", text, document.get("source"))
                for n, text in enumerate(segments)
            )
        labels = d.get("labels")
        return CandidateRecord(
            query=Query(str(d["qid"]), d["query"], d.get("rewritten")),
            gold_answer=d.get("gold_answer", ""),
            domain=Domain(d.get("domain", Domain.COMPLEX_QA.value)),
            candidates=tuple(candidates),
            dataset=d.get("dataset"),
            labels=(
                {str(k): int(v) for k, v in labels.items()}
                if labels is not None
                else None
            ),
        )


@dataclass(frozen=True)
class SynthesisRecord:
    query: Query
    passages: tuple[Passage, ...]
    pointwise: dict[str, int]
    label: ListwiseLabel
    domain: Domain
    consistency: float
    dataset: Optional[str] = None

    def __post_init__(self):
        ids = [passage.id for passage in self.passages]
        if len(ids) > LIST_CAP:
            raise ValueError(f"{len(ids)} passages exceed the {LIST_CAP} cap")
        if not self.label.gold.is_permutation_of(ids):
            raise ValueError(f"gold of {self.query.qid} is not a permutation")
        if not 0.0 <= self.consistency <= 1.0 + 1e-12:
            raise ValueError(f"consistency {self.consistency} out of range")

    @property
    def ids(self) -> list[str]:
        return [passage.id for passage in self.passages]

    def to_json(self) -> dict:
        return {
            "qid": self.query.qid,
            "query": self.query.text,
            "domain": self.domain.value,
            "dataset": self.dataset,
            "passages": [
                {"id": p.id, "text": p.text, "source": p.source}
                for p in self.passages
            ],
            "pointwise": self.pointwise,
            "think": self.label.think,
            "gold": list(self.label.gold),
            "consistency": self.consistency,
        }

    @staticmethod
    def build(d: dict) -> SynthesisRecord:
        return SynthesisRecord(
            query=Query(str(d["qid"]), d["query"]),
            passages=tuple(
                Passage(str(p["id"]), p["text"], p.get("source"))
                for p in d["passages"]
            ),
            pointwise={str(k): int(v) for k, v in d["pointwise"].items()},
            label=ListwiseLabel(d.get("think", ""), RankedList(d["gold"])),
            domain=Domain(d["domain"]),
            consistency=float(d["consistency"]),
            dataset=d.get("dataset"),
        )


def split_sentences(text: str, max_chars: int) -> list[str]:
    """Pack sentences into chunks of at most `max_chars`."""
    chunks: list[str] = []
    current = ""
    for sentence in SENTENCE_END.split(text):
        while len(sentence) > max_chars:
            if current:
                chunks.append(current)
                current = ""
            chunks.append(sentence[:max_chars].strip())
            sentence = sentence[max_chars:].strip()
        if not current:
            current = sentence
        elif len(current) + 1 + len(sentence) <= max_chars:
            current = f"{current} {sentence}"
        else:
            chunks.append(current)
            current = sentence
    if current:
        chunks.append(current)
    return [chunk for chunk in chunks if chunk]


def split_document(text: str, max_chars: Optional[int] = None) -> list[str]:
    passages = []
    for segment in BLANK_LINE.split(text):
        segment = segment.strip()
        if not segment:
            continue
        if max_chars is not None and len(segment) > max_chars:
            passages.extend(split_sentences(segment, max_chars))
        else:
            passages.append(segment)
    return passages


def parse_selection(text: str, m: int) -> Optional[list[int]]:
    """0-based positions listed as `[k] [j]`, None when unreadable."""
    if text.strip().strip('."') == "None":
        return []
    tokens = TOKEN.findall(text)
    if len(tokens) == 0:
        return None
    positions: list[int] = []
    for token in tokens:
        k = token_index(token, m)
        if k is None:
            logger.warning(
                f"selected passage [{token[:12]}] outside 1..{m}, dropped"
            )
        elif k - 1 not in positions:
            positions.append(k - 1)
    return positions


async def select(
    prompt: SelectionPrompt,
    query: Query,
    gold_answer: str,
    candidates: Sequence[Passage],
    gateway: Gateway,
    pool_size: int = POOL_SIZE,
) -> tuple[str, ...]:
    if len(candidates) == 0:
        return ()
    if len(candidates) > pool_size:
        logger.warning(
            f"{query.qid}: pool of {len(candidates)} cut to {pool_size}"
        )
        candidates = candidates[:pool_size]

    request = prompt.request(
        query.text,
        gold_answer,
        [p.text for p in candidates],
        qid=query.qid,
        passage_ids=[p.id for p in candidates],
    )
    response = await gateway.complete(request)
    positions = parse_selection(
        ranking_text(parse_response(response.text)), len(candidates)
    )
    if positions is None:
        logger.warning(
            f"{query.qid}: unreadable {prompt.purpose.value} selection "
            f"{response.text[:80]!r}"
        )
        return ()
    return tuple(candidates[i].id for i in sorted(positions))


async def select_positives(
    query: Query,
    gold_answer: str,
    candidates: Sequence[Passage],
    gateway: Gateway,
    domain: Domain = Domain.COMPLEX_QA,
    max_chars: Optional[int] = None,
    pool_size: int = POOL_SIZE,
) -> tuple[str, ...]:
    prompt = SelectionPrompt(
        POSITIVE_TEMPLATES[domain], Purpose.POSITIVES, max_chars
    )
    return await select(
        prompt, query, gold_answer, candidates, gateway, pool_size
    )


async def select_hard_negatives(
    query: Query,
    gold_answer: str,
    candidates: Sequence[Passage],
    gateway: Gateway,
    positives: Sequence[str] = (),
    max_chars: Optional[int] = None,
    pool_size: int = POOL_SIZE,
) -> tuple[str, ...]:
    prompt = SelectionPrompt(
        "hard_negatives.txt", Purpose.HARD_NEGATIVES, max_chars
    )
    selected = await select(
        prompt, query, gold_answer, candidates, gateway, pool_size
    )
    overlapping = set(selected).intersection(positives)
    for id in sorted(overlapping):
        logger.warning(f"{query.qid}: {id} already positive, dropped")
    return tuple(id for id in selected if id not in overlapping)


def record_generator(seed: int, qid: str) -> np.random.Generator:
    """Per-record generator, independent of processing order."""
    return np.random.default_rng([seed, zlib.crc32(qid.encode())])


def assemble_training_list(
    positives: Sequence[Passage],
    hard_negatives: Sequence[Passage],
    negatives: Sequence[Passage],
    cap: int = LIST_CAP,
    seed: Union[int, np.random.Generator] = 0,
) -> tuple[tuple[Passage, ...], dict[str, int]]:
    """All positives, then hard negatives, then sampled negatives, shuffled."""
    groups = [
        {p.id for p in group}
        for group in (positives, hard_negatives, negatives)
    ]
    if any(a & b for i, a in enumerate(groups) for b in groups[i + 1:]):
        raise ValueError("positives and negatives overlap")
    if len(positives) == 0:
        raise NoPositives("no positive passage, record unusable")

    rng = (
        seed
        if isinstance(seed, np.random.Generator)
        else np.random.default_rng(seed)
    )
    if len(positives) > cap:
        logger.warning(f"{len(positives)} positives truncated to {cap}")
    chosen = list(positives[:cap])
    chosen.extend(hard_negatives[: cap - len(chosen)])
    room = cap - len(chosen)
    if room > 0 and len(negatives) > 0:
        picked = rng.permutation(len(negatives))[:room]
        chosen.extend(negatives[i] for i in picked)

    order = rng.permutation(len(chosen))
    passages = tuple(chosen[i] for i in order)
    positive_ids = groups[0]
    labels = {p.id: int(p.id in positive_ids) for p in passages}
    return passages, labels


async def generate_listwise_label(
    query: Query,
    training_list: Sequence[Passage],
    gateway: Gateway,
    prompt: Optional[ConversationPrompt] = None,
) -> ListwiseLabel:
    """Labeling model reasoning and gold ranking, without the gold answer."""
    if len(training_list) == 0:
        raise LabelError(f"{query.qid}: empty training list")
    prompt = prompt or ConversationPrompt()
    ids = [p.id for p in training_list]
    request = prompt.request(
        query.text,
        [p.text for p in training_list],
        qid=query.qid,
        passage_ids=ids,
    )
    try:
        response = await gateway.complete(request)
    except BackendError as error:
        raise LabelError(f"{query.qid}: labeling call failed: {error}")

    if response.text.strip() == "":
        raise LabelError(f"{query.qid}: empty labeling response")
    parsed = parse_response(response.text, len(ids))
    gold, repair = parse_ranking(ranking_text(parsed), ids)
    if repair.full_repair:
        raise LabelError(f"{query.qid}: labeling response has no ranking")
    if repair.repaired:
        logger.warning(
            f"{query.qid}: gold ranking repaired {repair.as_dict()}"
        )
    return ListwiseLabel((parsed.think or "").strip(), gold)


@dataclass
class FilterReport:
    alpha: float
    kept: dict[tuple[str, str], int] = field(default_factory=dict)
    dropped: dict[tuple[str, str], int] = field(default_factory=dict)

    def count(self, record: SynthesisRecord, kept: bool):
        key = (record.domain.value, record.dataset or "-")
        self.kept.setdefault(key, 0)
        self.dropped.setdefault(key, 0)
        if kept:
            self.kept[key] += 1
        else:
            self.dropped[key] += 1

    @property
    def total_kept(self) -> int:
        return sum(self.kept.values())

    @property
    def total_dropped(self) -> int:
        return sum(self.dropped.values())

    def render(self) -> str:
        header = ("Category", "Dataset Name", "Data Num", "Dropped")
        rows = [
            (*key, str(self.kept[key]), str(self.dropped[key]))
            for key in sorted(self.kept)
        ]
        rows.append(
            ("Total", "", str(self.total_kept), str(self.total_dropped))
        )
        return table(header, rows)

    def to_lines(self) -> list[str]:
        lines = []
        for domain, dataset in sorted(self.kept):
            key = (domain, dataset)
            lines.append(
                f"domain={domain} dataset={dataset} "
                f"kept={self.kept[key]} dropped={self.dropped[key]}"
            )
        lines.append(
            f"alpha={self.alpha!r} kept={self.total_kept} "
            f"dropped={self.total_dropped}"
        )
        return lines


def consistency(record: SynthesisRecord, k: int = 10) -> float:
    return ndcg_at_k(record.label.gold, record.pointwise, k)


def self_consistency_filter(
    records: Sequence[SynthesisRecord], alpha: float = 0.4
) -> tuple[list[SynthesisRecord], FilterReport]:
    """Keep records whose gold list agrees with their pointwise labels."""
    report = FilterReport(alpha)
    kept = []
    for record in records:
        record = replace(record, consistency=consistency(record))
        keep = record.consistency >= alpha
        report.count(record, keep)
        if keep:
            kept.append(record)
    return kept, report


def to_sft_example(
    record: SynthesisRecord,
    prompt: Optional[RankingPrompt] = None,
    reasoning: bool = True,
) -> dict:
    """Chat-format training example whose assistant turn is the label.

    Without `reasoning` the think block is left empty, which trains the
    direct-answer variant on the same gold ranking.
    """
    prompt = prompt or RankingPrompt()
    request = prompt.request(
        record.query.text,
        [passage.text for passage in record.passages],
        qid=record.query.qid,
        passage_ids=record.ids,
    )
    position = {id: i for i, id in enumerate(record.ids)}
    answer = format_ranking([position[id] for id in record.label.gold])
    think = record.label.think if reasoning else ""
    target = f"<think>{think}</think><answer>{answer}</answer>"
    return {
        "qid": record.query.qid,
        "domain": record.domain.value,
        "messages": [
            *(message.as_dict() for message in request.messages),
            {"role": "assistant", "content": target},
        ],
    }


@dataclass
class SynthesisRun:
    records: list[SynthesisRecord]
    skipped: dict[str, str]


class Synthesizer:
    """Turns candidate records into labeled training records."""

    logger: Logger
    gateway: Gateway
    cap: int
    pool_size: int
    seed: int
    max_chars: Optional[int]
    prompt: ConversationPrompt

    def __init__(
        self,
        logger: Logger,
        gateway: Gateway,
        cap: int = LIST_CAP,
        pool_size: int = POOL_SIZE,
        seed: int = 0,
        max_chars: Optional[int] = None,
    ):
        self.logger = logger
        self.gateway = gateway
        self.cap = cap
        self.pool_size = pool_size
        self.seed = seed
        self.max_chars = max_chars
        self.prompt = ConversationPrompt(max_chars=max_chars)

    async def partition(
        self, record: CandidateRecord
    ) -> tuple[list[Passage], list[Passage], list[Passage]]:
        """Positives, hard negatives and negatives of a record."""
        query, answer = record.query, record.gold_answer
        candidates = list(record.candidates)
        match record.domain:
            case Domain.WEB_SEARCH:
                labels = record.labels or {}
                positives = [p for p in candidates if labels.get(p.id, 0)]
                negatives = [p for p in candidates if p not in positives]
                return positives, [], negatives

            case Domain.COMPLEX_QA:
                pool = [p for p in candidates if p.source != "search"]
                search = [p for p in candidates if p.source == "search"]
                selected = await select_positives(
                    query,
                    answer,
                    pool,
                    self.gateway,
                    domain=record.domain,
                    max_chars=self.max_chars,
                    pool_size=self.pool_size,
                )
                hard_ids = await select_hard_negatives(
                    query,
                    answer,
                    search,
                    self.gateway,
                    positives=selected,
                    max_chars=self.max_chars,
                    pool_size=self.pool_size,
                )
                positives = [p for p in pool if p.id in selected]
                negatives = [p for p in pool if p.id not in selected]
                hard = [p for p in search if p.id in hard_ids]
                return positives, hard, negatives

            case _:
                pool = candidates[: self.pool_size]
                selected = await select_positives(
                    query,
                    answer,
                    pool,
                    self.gateway,
                    domain=record.domain,
                    max_chars=self.max_chars,
                    pool_size=self.pool_size,
                )
                positives = [p for p in pool if p.id in selected]
                negatives = [p for p in pool if p.id not in selected]
                return positives, [], negatives

    async def synthesize(self, record: CandidateRecord) -> SynthesisRecord:
        positives, hard, negatives = await self.partition(record)
        passages, pointwise = assemble_training_list(
            positives,
            hard,
            negatives,
            self.cap,
            record_generator(self.seed, record.query.qid),
        )
        label = await generate_listwise_label(
            record.query, passages, self.gateway, self.prompt
        )
        return SynthesisRecord(
            query=record.query,
            passages=passages,
            pointwise=pointwise,
            label=label,
            domain=record.domain,
            consistency=ndcg_at_k(label.gold, pointwise, 10),
            dataset=record.dataset,
        )

    async def attempt(
        self, record: CandidateRecord
    ) -> Union[SynthesisRecord, str]:
        logger = logging.getLogger(f"{self.logger.name}:{record.query.qid}")
        try:
            result = await self.synthesize(record)
        except (SynthesisError, BackendError) as error:
            logger.warning(f"skipped: {error}")
            return str(error)
        logger.info(
            f"{len(result.passages)} passages, "
            f"consistency {result.consistency:.4f}"
        )
        return result

    async def run(self, records: Sequence[CandidateRecord]) -> SynthesisRun:
        results = await asyncio.gather(
            *(self.attempt(record) for record in records)
        )
        run = SynthesisRun([], {})
        for record, result in zip(records, results):
            if isinstance(result, str):
                run.skipped[record.query.qid] = result
            else:
                run.records.append(result)
        return run
