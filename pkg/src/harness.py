from __future__ import annotations

import time
import asyncio
import logging
import numpy as np

from logging import Logger
from typing import Mapping, Optional, Sequence, Union
from dataclasses import dataclass, field
from report import key_values, mean, table
from backend import Gateway
from config import Configuration, PromptStyle
from prompts import ConversationPrompt, RankingPrompt
from metrics import RelevanceJudgments, ndcg_at_k, score_rollout
from training import (
    GrpoLoss,
    GrpoParams,
    Rollout,
    RolloutGroup,
    TokenLogProbs,
    group_advantages,
    grpo_loss,
)
from ranking import CandidateList, FormatStatus, RankedList
from window import QueryError, Reranker, TraceLog, WindowPlan, plan_windows
from synthesis import (
    CandidateRecord,
    FilterReport,
    SynthesisRecord,
    SynthesisRun,
    Synthesizer,
    self_consistency_filter,
    to_sft_example,
)
from dataset import (
    DatasetBundle,
    load_dataset,
    load_qrels,
    load_run,
    read_jsonl,
    write_jsonl,
    write_run,
)


def chars_cell(chars: Optional[float]) -> str:
    return f"{chars:.0f}" if chars is not None else "-"


@dataclass
class RunReport:
    """Outcome of reranking every query of a bundle."""

    k: int = 10
    ndcg: dict[str, float] = field(default_factory=dict)
    baseline: dict[str, float] = field(default_factory=dict)
    latency: dict[str, float] = field(default_factory=dict)
    calls: dict[str, int] = field(default_factory=dict)
    attempts: dict[str, int] = field(default_factory=dict)
    format_failures: dict[str, int] = field(
        default_factory=lambda: {
            FormatStatus.OUTPUT_ONLY.value: 0,
            FormatStatus.BAD.value: 0,
        }
    )
    repairs: dict[str, int] = field(
        default_factory=lambda: {
            "out_of_range": 0,
            "duplicates": 0,
            "appended": 0,
        }
    )
    reasoning_chars: dict[str, float] = field(default_factory=dict)
    reasoning_tokens: dict[str, float] = field(default_factory=dict)
    skipped: dict[str, str] = field(default_factory=dict)
    unjudged: list[str] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return mean([self.ndcg[qid] for qid in sorted(self.ndcg)])

    @property
    def baseline_mean(self) -> float:
        return mean([self.baseline[qid] for qid in sorted(self.baseline)])

    def add_trace(self, trace: TraceLog):
        self.calls[trace.qid] = trace.calls
        self.attempts[trace.qid] = sum(w.attempts for w in trace.windows)
        for status, count in trace.format_failures().items():
            self.format_failures[status.value] += count
        for kind, count in trace.repairs().items():
            self.repairs[kind] += count
        if trace.reasoning_chars is not None:
            self.reasoning_chars[trace.qid] = trace.reasoning_chars
        if trace.reasoning_tokens is not None:
            self.reasoning_tokens[trace.qid] = trace.reasoning_tokens

    def render(self) -> str:
        metric = f"ndcg@{self.k}"
        rows = [
            (
                qid,
                f"{self.ndcg[qid]:.4f}",
                f"{self.baseline[qid]:.4f}",
                str(self.calls.get(qid, 0)),
                f"{self.latency.get(qid, 0.0):.3f}",
                chars_cell(self.reasoning_chars.get(qid)),
            )
            for qid in sorted(self.ndcg)
        ]
        rows.append(
            (
                "mean",
                f"{self.mean:.4f}",
                f"{self.baseline_mean:.4f}",
                "",
                f"{mean(list(self.latency.values())):.3f}",
                chars_cell(
                    mean(list(self.reasoning_chars.values()))
                    if self.reasoning_chars
                    else None
                ),
            )
        )
        header = ("qid", metric, "baseline", "calls", "seconds", "think")
        return table(header, rows)

    def to_lines(self) -> list[str]:
        metric = f"ndcg@{self.k}"
        lines = []
        for qid in sorted(self.ndcg):
            lines.append(f"metric={metric} qid={qid} value={self.ndcg[qid]!r}")
            lines.append(
                f"metric=baseline_{metric} qid={qid} "
                f"value={self.baseline[qid]!r}"
            )
        for qid in sorted(self.calls):
            lines.append(f"metric=calls qid={qid} value={self.calls[qid]}")
            lines.append(
                f"metric=attempts qid={qid} value={self.attempts[qid]}"
            )
            lines.append(
                f"metric=seconds qid={qid} value={self.latency[qid]!r}"
            )
        lines.append(f"metric={metric} qid=all value={self.mean!r}")
        lines.append(
            f"metric=baseline_{metric} qid=all value={self.baseline_mean!r}"
        )
        for status, count in self.format_failures.items():
            lines.append(f"metric=format_{status} value={count}")
        for kind, count in self.repairs.items():
            lines.append(f"metric=repair_{kind} value={count}")
        for qid in sorted(self.skipped):
            lines.append(f"metric=skipped qid={qid}")
        for unit, lengths in (
            ("chars", self.reasoning_chars),
            ("tokens", self.reasoning_tokens),
        ):
            for qid in sorted(lengths):
                lines.append(
                    f"metric=reasoning_length unit={unit} qid={qid} "
                    f"value={lengths[qid]!r}"
                )
            if len(lengths) != 0:
                overall = mean([lengths[qid] for qid in sorted(lengths)])
                lines.append(
                    f"metric=reasoning_length unit={unit} qid=all "
                    f"value={overall!r}"
                )
        for qid in self.unjudged:
            lines.append(f"metric=unjudged qid={qid}")
        return lines


@dataclass
class EvalReport:
    k: int
    ndcg: dict[str, float]
    excluded: list[str]

    @property
    def mean(self) -> float:
        return mean([self.ndcg[qid] for qid in sorted(self.ndcg)])

    def render(self) -> str:
        rows = [(qid, f"{self.ndcg[qid]:.4f}") for qid in sorted(self.ndcg)]
        rows.append(("mean", f"{self.mean:.4f}"))
        return table(("qid", f"ndcg@{self.k}"), rows)

    def to_lines(self) -> list[str]:
        metric = f"ndcg@{self.k}"
        lines = [
            f"metric={metric} qid={qid} value={self.ndcg[qid]!r}"
            for qid in sorted(self.ndcg)
        ]
        lines.append(f"metric={metric} qid=all value={self.mean!r}")
        lines.extend(f"metric=excluded qid={qid}" for qid in self.excluded)
        return lines


def evaluate(
    run: Mapping[str, Union[CandidateList, RankedList]],
    qrels: RelevanceJudgments,
    k: int = 10,
) -> EvalReport:
    """NDCG@k per query, queries without judgments are excluded."""
    ndcg = {}
    excluded = []
    for qid in sorted(run):
        ranked = run[qid]
        ids = ranked.ids if isinstance(ranked, CandidateList) else ranked
        if qid not in qrels:
            excluded.append(qid)
            continue
        ndcg[qid] = ndcg_at_k(ids, qrels.query(qid), k)
    return EvalReport(k, ndcg, excluded)


@dataclass(frozen=True)
class LatencySample:
    qid: str
    repeat: int
    seconds: float
    calls: int
    completion_tokens: Optional[int] = None

    def to_line(self) -> str:
        tokens = (
            self.completion_tokens
            if self.completion_tokens is not None
            else "-"
        )
        return (
            f"metric=sample qid={self.qid} repeat={self.repeat} "
            f"seconds={self.seconds!r} calls={self.calls} "
            f"completion_tokens={tokens}"
        )

    @staticmethod
    def from_line(line: str) -> LatencySample:
        pairs = key_values(line)
        tokens = pairs["completion_tokens"]
        return LatencySample(
            qid=pairs["qid"],
            repeat=int(pairs["repeat"]),
            seconds=float(pairs["seconds"]),
            calls=int(pairs["calls"]),
            completion_tokens=int(tokens) if tokens != "-" else None,
        )


@dataclass(frozen=True)
class LatencyReport:
    samples: tuple[LatencySample, ...]

    @property
    def seconds(self) -> np.ndarray:
        return np.array([s.seconds for s in self.samples], dtype=float)

    @property
    def mean(self) -> float:
        return mean(list(self.seconds))

    @property
    def p50(self) -> float:
        if len(self.samples) == 0:
            return 0.0
        return float(np.percentile(self.seconds, 50))

    @property
    def p95(self) -> float:
        if len(self.samples) == 0:
            return 0.0
        return float(np.percentile(self.seconds, 95))

    @property
    def calls(self) -> int:
        return sum(s.calls for s in self.samples)

    @property
    def completion_tokens(self) -> Optional[int]:
        counts = [s.completion_tokens for s in self.samples]
        if len(counts) == 0 or any(count is None for count in counts):
            return None
        return sum(count for count in counts if count is not None)

    @property
    def queries(self) -> int:
        return len({s.qid for s in self.samples})

    @property
    def repeats(self) -> int:
        return max((s.repeat for s in self.samples), default=-1) + 1

    def render(self) -> str:
        tokens = self.completion_tokens
        rows = [
            ("queries", str(self.queries)),
            ("repeats", str(self.repeats)),
            ("mean seconds/query", f"{self.mean:.4f}"),
            ("p50 seconds/query", f"{self.p50:.4f}"),
            ("p95 seconds/query", f"{self.p95:.4f}"),
            ("backend calls", str(self.calls)),
            ("output tokens", str(tokens) if tokens is not None else "-"),
        ]
        return table(("", "value"), rows)

    def to_lines(self) -> list[str]:
        lines = [
            f"metric=latency_mean value={self.mean!r}",
            f"metric=latency_p50 value={self.p50!r}",
            f"metric=latency_p95 value={self.p95!r}",
            f"metric=calls value={self.calls}",
        ]
        if self.completion_tokens is not None:
            lines.append(
                f"metric=completion_tokens value={self.completion_tokens}"
            )
        lines.extend(sample.to_line() for sample in self.samples)
        return lines

    @staticmethod
    def from_lines(lines: Sequence[str]) -> LatencyReport:
        """Rebuild a report from its samples, aggregates are recomputed."""
        return LatencyReport(
            tuple(
                LatencySample.from_line(line)
                for line in lines
                if key_values(line).get("metric") == "sample"
            )
        )


class RecordError(ValueError):
    line: int

    def __init__(self, line: int, message: str):
        super().__init__(f"rollout on line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class RolloutRecord:
    """One line of a rollouts file."""

    line: int
    qid: str
    group: str
    response: Optional[str]
    reward: Optional[float]
    ids: Optional[tuple[str, ...]]
    policy: Optional[TokenLogProbs]
    reference: Optional[TokenLogProbs]
    old: Optional[TokenLogProbs]

    @staticmethod
    def build(line: int, d: dict) -> RolloutRecord:
        def logprobs(key: str) -> Optional[TokenLogProbs]:
            values = d.get(key)
            return TokenLogProbs.of(values) if values is not None else None

        try:
            qid = str(d["qid"])
            record = RolloutRecord(
                line=line,
                qid=qid,
                group=str(d.get("group", qid)),
                response=d.get("response"),
                reward=(
                    float(d["reward"]) if d.get("reward") is not None else None
                ),
                ids=tuple(d["ids"]) if d.get("ids") is not None else None,
                policy=logprobs("policy"),
                reference=logprobs("reference"),
                old=logprobs("old"),
            )
        except (KeyError, TypeError, ValueError) as error:
            raise RecordError(line, f"bad record: {error}")
        if record.response is None and record.reward is None:
            raise RecordError(line, "needs a response or a reward")
        return record

    @property
    def has_logprobs(self) -> bool:
        return self.policy is not None and self.reference is not None


@dataclass
class RewardResult:
    records: list[dict] = field(default_factory=list)
    groups: list[dict] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)


class Harness:
    """Runs the command-line operations over files and a shared gateway."""

    logger: Logger
    config: Configuration
    gateway: Optional[Gateway]

    def __init__(
        self,
        logger: Logger,
        config: Configuration,
        gateway: Optional[Gateway] = None,
    ):
        self.logger = logger
        self.config = config
        self.gateway = gateway

    def require_gateway(self) -> Gateway:
        if self.gateway is None:
            raise RuntimeError("this command needs a backend")
        return self.gateway

    def ranking_prompt(self) -> RankingPrompt:
        rerank = self.config.rerank
        match rerank.prompt_style:
            case PromptStyle.MULTI_TURN:
                return ConversationPrompt(max_chars=rerank.max_passage_chars)
            case _:
                return RankingPrompt(
                    rerank.template or "rerank.txt", rerank.max_passage_chars
                )

    def reranker(self) -> Reranker:
        return Reranker(
            logging.getLogger(f"{self.logger.name}:rerank"),
            self.require_gateway(),
            self.config.rerank.params,
            self.ranking_prompt(),
        )

    def plan(self, list_len: int) -> WindowPlan:
        return plan_windows(self.config.rerank.params, list_len)

    async def rerank(
        self, bundle: DatasetBundle, strict: bool = False
    ) -> tuple[dict[str, RankedList], RunReport]:
        reranker = self.reranker()
        texts = bundle.texts
        k = self.config.reward.k
        qids = sorted(bundle.run)

        async def one(qid: str) -> tuple[RankedList, TraceLog, float]:
            logger = logging.getLogger(f"{self.logger.name}:{qid}")
            start = time.perf_counter()
            ranked, trace = await reranker.rerank_query(
                bundle.queries[qid], bundle.run[qid], texts
            )
            elapsed = time.perf_counter() - start
            logger.info(f"{trace.calls} windows in {elapsed:.3f}s")
            return ranked, trace, elapsed

        results = await asyncio.gather(
            *(one(qid) for qid in qids), return_exceptions=True
        )

        rankings = {}
        report = RunReport(k=k)
        for qid, result in zip(qids, results):
            initial = bundle.run[qid].top(self.config.rerank.params.n).ids
            if isinstance(result, QueryError):
                if strict:
                    raise result
                self.logger.warning(
                    f"{qid}: {result} ({result.__cause__}), "
                    "keeping retriever order"
                )
                report.skipped[qid] = str(result.__cause__)
                report.add_trace(result.trace)
                report.latency[qid] = result.trace.duration
                ranked = initial
            elif isinstance(result, BaseException):
                raise result
            else:
                ranked, trace, elapsed = result
                report.add_trace(trace)
                report.latency[qid] = elapsed
            rankings[qid] = ranked

            if qid in bundle.qrels:
                grades = bundle.qrels.query(qid)
                report.ndcg[qid] = ndcg_at_k(ranked, grades, k)
                report.baseline[qid] = ndcg_at_k(initial, grades, k)
            else:
                report.unjudged.append(qid)

        self.logger.info(
            f"reranked {len(rankings)} queries, "
            f"ndcg@{k} {report.mean:.4f} (baseline {report.baseline_mean:.4f})"
        )
        return rankings, report

    async def cmd_rerank(
        self,
        corpus: str,
        queries: str,
        run: str,
        output: str,
        qrels: Optional[str] = None,
        tag: str = "rerank",
        strict: bool = False,
    ) -> RunReport:
        bundle = load_dataset(
            corpus, queries, run, qrels, self.config.rerank.params.n
        )
        rankings, report = await self.rerank(bundle, strict)
        write_run(output, rankings, tag)
        return report

    def cmd_eval(self, run: str, qrels: str, k: int = 10) -> EvalReport:
        report = evaluate(load_run(run), load_qrels(qrels), k)
        for qid in report.excluded:
            self.logger.warning(f"{qid} has no judgments, excluded")
        return report

    def score(
        self,
        rollouts: Sequence[tuple[int, dict]],
        labels: Mapping[str, SynthesisRecord],
    ) -> RewardResult:
        """Rewards, group advantages and GRPO losses of rollout records."""
        result = RewardResult()
        scored: dict[str, list[tuple[RolloutRecord, dict]]] = {}
        for line, d in rollouts:
            try:
                record = RolloutRecord.build(line, d)
                entry = self.reward(record, labels)
            except RecordError as error:
                self.logger.warning(str(error))
                result.errors.append(str(error))
                continue
            scored.setdefault(record.group, []).append((record, entry))

        for group, members in scored.items():
            rewards = [entry["reward"] for _, entry in members]
            advantages = group_advantages(rewards)
            for (_, entry), advantage in zip(members, advantages):
                entry["advantage"] = float(advantage)
                result.records.append(entry)

            if not all(record.has_logprobs for record, _ in members):
                continue
            try:
                loss = self.group_loss(members, self.config.grpo)
            except RecordError as error:
                self.logger.warning(str(error))
                result.errors.append(str(error))
                continue
            result.groups.append(
                {
                    "group": group,
                    "size": len(members),
                    "loss": loss.loss,
                    "surrogate": loss.surrogate,
                    "kl": loss.kl,
                }
            )
        return result

    def reward(
        self, record: RolloutRecord, labels: Mapping[str, SynthesisRecord]
    ) -> dict:
        entry: dict = {"line": record.line, "qid": record.qid}
        entry["group"] = record.group
        if record.response is None:
            entry["reward"] = record.reward
            return entry

        label = labels.get(record.qid)
        if label is None:
            raise RecordError(record.line, f"no label for {record.qid}")
        window_ids = record.ids if record.ids is not None else label.ids
        if not RankedList(window_ids).is_permutation_of(label.ids):
            raise RecordError(
                record.line, f"ids of {record.qid} differ from its label"
            )
        breakdown = score_rollout(
            record.response,
            label.pointwise,
            label.label.gold,
            window_ids,
            self.config.reward,
        )
        entry.update(breakdown.as_dict())
        entry["reward"] = breakdown.final
        return entry

    @staticmethod
    def group_loss(
        members: Sequence[tuple[RolloutRecord, dict]], params: GrpoParams
    ) -> GrpoLoss:
        rollouts = []
        for record, entry in members:
            assert record.policy is not None and record.reference is not None
            try:
                rollouts.append(
                    Rollout(
                        reward=entry["reward"],
                        policy=record.policy,
                        reference=record.reference,
                        old=record.old,
                        advantage=entry["advantage"],
                    )
                )
            except ValueError as error:
                raise RecordError(record.line, str(error))
        return grpo_loss(RolloutGroup(tuple(rollouts)), params)

    def cmd_reward(self, rollouts: str, labels: str, output: str):
        records = [SynthesisRecord.build(d) for _, d in read_jsonl(labels)]
        result = self.score(
            list(read_jsonl(rollouts)), {r.query.qid: r for r in records}
        )
        write_jsonl(output, result.records + result.groups)
        return result

    def cmd_filter(
        self, records: str, output: str, alpha: Optional[float] = None
    ) -> FilterReport:
        if alpha is None:
            alpha = self.config.synthesis.alpha
        loaded = [SynthesisRecord.build(d) for _, d in read_jsonl(records)]
        kept, report = self_consistency_filter(loaded, alpha)
        write_jsonl(output, [record.to_json() for record in kept])
        self.logger.info(
            f"kept {report.total_kept} of {len(loaded)} records at {alpha}"
        )
        return report

    def cmd_export_sft(
        self, records: str, output: str, reasoning: bool = True
    ) -> int:
        """Write synthesized records as chat-format training examples."""
        prompt = self.ranking_prompt()
        examples = [
            to_sft_example(SynthesisRecord.build(d), prompt, reasoning)
            for _, d in read_jsonl(records)
        ]
        write_jsonl(output, examples)
        variant = "with" if reasoning else "without"
        self.logger.info(
            f"exported {len(examples)} examples {variant} reasoning"
        )
        return len(examples)

    def synthesizer(self) -> Synthesizer:
        synthesis = self.config.synthesis
        return Synthesizer(
            logging.getLogger(f"{self.logger.name}:synthesize"),
            self.require_gateway(),
            cap=synthesis.cap,
            pool_size=synthesis.pool_size,
            seed=synthesis.seed,
            max_chars=synthesis.max_passage_chars,
        )

    async def cmd_synthesize(self, candidates: str, output: str):
        max_chars = self.config.synthesis.max_passage_chars
        records = [
            CandidateRecord.build(d, max_chars)
            for _, d in read_jsonl(candidates)
        ]
        result: SynthesisRun = await self.synthesizer().run(records)
        write_jsonl(output, [record.to_json() for record in result.records])
        self.logger.info(
            f"synthesized {len(result.records)} records, "
            f"skipped {len(result.skipped)}"
        )
        return result

    async def latency(
        self, bundle: DatasetBundle, repeats: int = 1
    ) -> LatencyReport:
        """Per-query wall clock, queries one at a time."""
        if repeats < 1:
            raise ValueError(f"repeats {repeats} must be at least 1")
        reranker = self.reranker()
        texts = bundle.texts
        samples = []
        for repeat in range(repeats):
            for qid in sorted(bundle.run):
                start = time.perf_counter()
                _, trace = await reranker.rerank_query(
                    bundle.queries[qid], bundle.run[qid], texts
                )
                samples.append(
                    LatencySample(
                        qid=qid,
                        repeat=repeat,
                        seconds=time.perf_counter() - start,
                        calls=trace.calls,
                        completion_tokens=trace.completion_tokens,
                    )
                )
        return LatencyReport(tuple(samples))

    async def cmd_latency(
        self, corpus: str, queries: str, run: str, repeats: int = 1
    ) -> LatencyReport:
        bundle = load_dataset(
            corpus, queries, run, topn=self.config.rerank.params.n
        )
        return await self.latency(bundle, repeats)
