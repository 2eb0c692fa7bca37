import json
import math
import random
import asyncio
import logging
import pytest

from config import Configuration
from metrics import RelevanceJudgments
from ranking import CandidateList, Passage, Query, RankedList
from dataset import DatasetBundle, format_run, read_jsonl
from window import QueryError
from synthesis import ListwiseLabel, SynthesisRecord, Domain
from backend import Backend, Gateway, ProtocolError
from backend.mock import (
    FlakyBackend,
    IdentityBackend,
    NoisyBackend,
    OracleBackend,
)
from harness import (
    Harness,
    LatencyReport,
    evaluate,
)
from report import key_values

logger = logging.getLogger("test")


def synthetic_bundle(
    queries: int = 50, candidates: int = 100, seed: int = 0
) -> DatasetBundle:
    generator = random.Random(seed)
    corpus = {}
    loaded = {}
    run = {}
    qrels = RelevanceJudgments()
    for q in range(queries):
        qid = f"q{q:03d}"
        loaded[qid] = Query(qid, f"query {q}")
        ids = [f"{qid}d{i}" for i in range(candidates)]
        for id in ids:
            corpus[id] = Passage(id, f"text of {id}")
        scores = sorted(
            (generator.uniform(0, 100) for _ in ids), reverse=True
        )
        run[qid] = CandidateList(qid, tuple(zip(ids, scores)))
        for id in generator.sample(ids, generator.randint(1, 5)):
            qrels.add(qid, id, generator.randint(1, 2))
    return DatasetBundle(corpus, loaded, run, qrels)


def write_bundle(directory, bundle: DatasetBundle) -> tuple[str, ...]:
    corpus = directory / "corpus.jsonl"
    corpus.write_text(
        "".join(
            json.dumps({"id": p.id, "text": p.text}) + "\n"
            for p in bundle.corpus.values()
        )
    )
    queries = directory / "queries.jsonl"
    queries.write_text(
        "".join(
            json.dumps({"qid": q.qid, "text": q.text}) + "\n"
            for q in bundle.queries.values()
        )
    )
    run = directory / "run.txt"
    run.write_text(
        "".join(
            f"{qid} Q0 {id} {rank} {score!r} bm25\n"
            for qid, candidates in bundle.run.items()
            for rank, (id, score) in enumerate(candidates.entries, start=1)
        )
    )
    qrels = directory / "qrels.txt"
    qrels.write_text(
        "".join(
            f"{qid} 0 {id} {grade}\n"
            for qid, grades in bundle.qrels.grades.items()
            for id, grade in grades.items()
        )
    )
    return str(corpus), str(queries), str(run), str(qrels)


def harness(
    backend: Backend, config: dict = {}, concurrency: int = 8
) -> Harness:
    overrides = {"backoff_ms": 0, "concurrency": concurrency}
    backend_config = {**config.get("backend", {}), **overrides}
    configuration = Configuration.build({**config, "backend": backend_config})
    gateway = Gateway(logger, backend, configuration.backend)
    return Harness(logger, configuration, gateway)


def test_oracle_run_is_perfect():
    bundle = synthetic_bundle()
    oracle = harness(OracleBackend(bundle.qrels))
    rankings, report = asyncio.run(oracle.rerank(bundle))
    assert len(rankings) == 50
    assert report.mean == pytest.approx(1.0)
    assert set(report.calls.values()) == {9}
    assert report.baseline_mean < 1.0


def test_identity_run_matches_baseline():
    bundle = synthetic_bundle()
    rankings, report = asyncio.run(
        harness(IdentityBackend()).rerank(bundle)
    )
    assert report.mean == report.baseline_mean
    assert report.ndcg == report.baseline
    for qid, ranked in rankings.items():
        assert ranked == bundle.run[qid].ids


def test_small_window_call_count():
    bundle = synthetic_bundle(queries=3)
    config = {"window": {"size": 10, "stride": 5}}
    _, report = asyncio.run(harness(IdentityBackend(), config).rerank(bundle))
    assert set(report.calls.values()) == {19}


class Refusing(Backend):
    """Refuses every request of one query."""

    def __init__(self, inner: Backend, qid: str):
        self.inner = inner
        self.qid = qid

    async def send(self, request, config):
        if request.qid == self.qid:
            raise ProtocolError("refused", request.request_id)
        return await self.inner.send(request, config)


def test_skipped_query_keeps_retriever_order():
    bundle = synthetic_bundle(queries=5, seed=3)
    oracle = OracleBackend(bundle.qrels)
    clean_rankings, clean = asyncio.run(harness(oracle).rerank(bundle))

    backend = Refusing(oracle, "q002")
    rankings, report = asyncio.run(harness(backend).rerank(bundle))

    assert list(report.skipped) == ["q002"]
    assert rankings["q002"] == bundle.run["q002"].ids
    assert report.ndcg["q002"] == report.baseline["q002"]
    for qid in rankings:
        if qid != "q002":
            assert rankings[qid] == clean_rankings[qid]
            assert report.ndcg[qid] == clean.ndcg[qid]


def test_strict_run_fails():
    bundle = synthetic_bundle(queries=3)
    with pytest.raises(QueryError):
        refusing = harness(Refusing(IdentityBackend(), "q001"))
        asyncio.run(refusing.rerank(bundle, strict=True))


def test_flaky_backend_attempts_are_reported():
    bundle = synthetic_bundle(queries=1, candidates=15)
    flaky = FlakyBackend(IdentityBackend(), failures=2)
    config = {"backend": {"retries": 2}}
    _, report = asyncio.run(harness(flaky, config).rerank(bundle))
    assert report.calls == {"q000": 1}
    assert report.attempts == {"q000": 3}
    assert "metric=attempts qid=q000 value=3" in report.to_lines()


def test_report_lines():
    bundle = synthetic_bundle(queries=4)
    _, report = asyncio.run(harness(IdentityBackend()).rerank(bundle))
    lines = report.to_lines()
    mean = [
        key_values(line)
        for line in lines
        if line.startswith("metric=ndcg@10 qid=all")
    ]
    assert float(mean[0]["value"]) == report.mean
    assert "metric=format_Bad value=0" in lines
    assert report.render().splitlines()[0].split()[0] == "qid"


def test_rerank_is_deterministic_across_concurrency(tmp_path):
    bundle = synthetic_bundle(queries=12, seed=8)
    files = write_bundle(tmp_path, bundle)
    outputs = []
    for concurrency in [1, 8, 8]:
        noisy = NoisyBackend(4, 0.3, OracleBackend(bundle.qrels))
        output = tmp_path / f"run{len(outputs)}.txt"
        corpus, queries, run, qrels = files
        asyncio.run(
            harness(noisy, concurrency=concurrency).cmd_rerank(
                corpus, queries, run, str(output), qrels=qrels
            )
        )
        outputs.append(output.read_bytes())
    assert outputs[0] == outputs[1] == outputs[2]


def test_reranked_run_evaluates(tmp_path):
    bundle = synthetic_bundle(queries=10, seed=2)
    corpus, queries, run, qrels = write_bundle(tmp_path, bundle)
    output = str(tmp_path / "out.txt")
    report = asyncio.run(
        harness(OracleBackend(bundle.qrels)).cmd_rerank(
            corpus, queries, run, output, qrels=qrels
        )
    )
    evaluated = Harness(logger, Configuration.build({})).cmd_eval(
        output, qrels
    )
    assert evaluated.ndcg == pytest.approx(report.ndcg)
    assert evaluated.mean == pytest.approx(1.0)


def test_evaluate_worked_example():
    ids = [f"d{i}" for i in range(1, 21)]
    qrels = RelevanceJudgments({"q1": {"d2": 1, "d11": 1}})
    run = {"q1": RankedList(ids), "q9": RankedList(ids)}
    report = evaluate(run, qrels, 10)
    assert report.ndcg["q1"] == pytest.approx(0.3869, abs=5e-4)
    assert report.excluded == ["q9"]
    assert "metric=excluded qid=q9" in report.to_lines()


def test_eval_mean_and_brute_force(tmp_path):
    generator = random.Random(17)
    rankings = {}
    qrels = RelevanceJudgments()
    expected = {}
    for q in range(50):
        qid = f"q{q}"
        ids = [f"d{i}" for i in range(30)]
        generator.shuffle(ids)
        rankings[qid] = RankedList(ids)
        grades = {id: generator.randint(0, 3) for id in ids[:15]}
        grades[ids[generator.randrange(30)]] = 1
        for id, grade in grades.items():
            qrels.add(qid, id, grade)
        ideal = sorted((g for g in grades.values() if g > 0), reverse=True)
        idcg = sum(
            (2**g - 1) / math.log2(i + 2) for i, g in enumerate(ideal[:10])
        )
        dcg = sum(
            (2 ** grades.get(id, 0) - 1) / math.log2(i + 2)
            for i, id in enumerate(ids[:10])
        )
        expected[qid] = dcg / idcg

    run_path = tmp_path / "run.txt"
    run_path.write_text(format_run(rankings, "x"))
    qrels_path = tmp_path / "qrels.txt"
    qrels_path.write_text(
        "".join(
            f"{qid} 0 {id} {grade}\n"
            for qid, grades in qrels.grades.items()
            for id, grade in grades.items()
        )
    )
    report = Harness(logger, Configuration.build({})).cmd_eval(
        str(run_path), str(qrels_path)
    )
    for qid, value in expected.items():
        assert report.ndcg[qid] == pytest.approx(value, abs=1e-9)
    rows = [report.ndcg[qid] for qid in sorted(report.ndcg)]
    assert report.mean == pytest.approx(sum(rows) / len(rows), abs=1e-12)


def label_record() -> SynthesisRecord:
    ids = [f"p{i}" for i in range(1, 21)]
    return SynthesisRecord(
        query=Query("q1", "query"),
        passages=tuple(Passage(id, id) for id in ids),
        pointwise={id: int(i < 3) for i, id in enumerate(ids)},
        label=ListwiseLabel("t", RankedList(ids)),
        domain=Domain.COMPLEX_QA,
        consistency=1.0,
    )


def test_reward_command(tmp_path):
    labels = tmp_path / "labels.jsonl"
    labels.write_text(json.dumps(label_record().to_json()) + "\n")
    answer = " > ".join(f"[{k}]" for k in range(1, 21))
    perfect = f"<think>t</think><answer>{answer}</answer>"
    logprobs = {"policy": [-0.5, -1.0], "reference": [-0.5, -1.0]}
    rollouts = [
        {"qid": "q1", "group": "g1", "response": perfect, **logprobs},
        {"qid": "q1", "group": "g1", "response": "no tags", **logprobs},
        {"qid": "q7", "response": perfect},
        {"qid": "q1", "response": perfect, "ids": ["p1", "p2"]},
        {"qid": "q1", "group": "g2", "reward": 0.5},
        {"qid": "q1", "group": "g2", "reward": 0.5},
    ]
    rollouts_path = tmp_path / "rollouts.jsonl"
    rollouts_path.write_text(
        "".join(json.dumps(rollout) + "\n" for rollout in rollouts)
    )
    output = tmp_path / "rewards.jsonl"

    result = Harness(logger, Configuration.build({})).cmd_reward(
        str(rollouts_path), str(labels), str(output)
    )
    assert len(result.errors) == 2
    best, bad, first, second = result.records
    assert best["final"] == pytest.approx(1.2878, abs=1e-4)
    assert best["format_status"] == "BothGood"
    assert bad["final"] == -1.0 and bad["format_status"] == "Bad"
    assert best["advantage"] == pytest.approx(1.0)
    assert bad["advantage"] == pytest.approx(-1.0)
    assert first["advantage"] == 0.0 and second["advantage"] == 0.0

    (group,) = result.groups
    assert group["group"] == "g1"
    assert group["kl"] == 0.0
    assert group["loss"] == pytest.approx(0.0)
    written = [record for _, record in read_jsonl(str(output))]
    assert len(written) == 5


def test_filter_command(tmp_path):
    records = tmp_path / "records.jsonl"
    records.write_text(json.dumps(label_record().to_json()) + "\n")
    output = tmp_path / "kept.jsonl"
    harness = Harness(logger, Configuration.build({}))
    assert harness.cmd_filter(str(records), str(output), 0.0).total_kept == 1
    assert len(list(read_jsonl(str(output)))) == 1
    assert harness.cmd_filter(str(records), str(output), 1.01).total_kept == 0
    assert list(read_jsonl(str(output))) == []


def test_export_sft_command(tmp_path):
    records = tmp_path / "records.jsonl"
    records.write_text(json.dumps(label_record().to_json()) + "\n")
    output = tmp_path / "sft.jsonl"
    config = Configuration.build({"window": {"prompt_style": "multi-turn"}})
    harness = Harness(logger, config)
    assert harness.cmd_export_sft(str(records), str(output), False) == 1
    [(_, example)] = list(read_jsonl(str(output)))
    answer = " > ".join(f"[{k}]" for k in range(1, 21))
    assert example["messages"][-1] == {
        "role": "assistant",
        "content": f"<think></think><answer>{answer}</answer>",
    }
    assert example["messages"][1]["role"] == "assistant"


def test_latency():
    bundle = synthetic_bundle(queries=10)
    report = asyncio.run(harness(IdentityBackend()).latency(bundle))
    assert len(report.samples) == 10
    assert all(sample.seconds > 0 for sample in report.samples)
    assert all(sample.calls == 9 for sample in report.samples)
    assert report.calls == 90
    assert report.completion_tokens is not None
    assert report.p50 <= report.p95


def test_latency_repeats_round_trip():
    bundle = synthetic_bundle(queries=4)
    report = asyncio.run(
        harness(IdentityBackend()).latency(bundle, repeats=3)
    )
    assert len(report.samples) == 12
    assert report.repeats == 3 and report.queries == 4
    assert LatencyReport.from_lines(report.to_lines()) == report


def write_candidates(path, count: int = 6):
    records = []
    for q in range(count):
        qid = f"s{q}"
        records.append(
            {
                "qid": qid,
                "query": f"question {q}",
                "gold_answer": f"answer {q}",
                "domain": "coding",
                "dataset": "leetcode",
                "candidates": [
                    {"id": f"{qid}r{i}", "text": f"code {i}"}
                    for i in range(30)
                ],
            }
        )
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    judgments = RelevanceJudgments()
    for q in range(count):
        for i in range(0, 30, 7):
            judgments.add(f"s{q}", f"s{q}r{i}", 1)
    return judgments


def test_pipeline_is_deterministic(tmp_path):
    def pipeline(directory, concurrency: int) -> list[bytes]:
        directory.mkdir()
        candidates = directory / "candidates.jsonl"
        judgments = write_candidates(candidates)
        config = {"synthesis": {"seed": 3}}
        labeler = harness(
            NoisyBackend(1, 0.2, OracleBackend(judgments)),
            config,
            concurrency,
        )
        records = directory / "records.jsonl"
        asyncio.run(labeler.cmd_synthesize(str(candidates), str(records)))
        kept = directory / "kept.jsonl"
        labeler.cmd_filter(str(records), str(kept), 0.4)

        bundle = synthetic_bundle(queries=8, seed=5)
        corpus, queries, run, qrels = write_bundle(directory, bundle)
        reranked = directory / "reranked.txt"
        reranker = harness(
            NoisyBackend(2, 0.3, OracleBackend(bundle.qrels)),
            concurrency=concurrency,
        )
        asyncio.run(
            reranker.cmd_rerank(corpus, queries, run, str(reranked))
        )
        evaluated = reranker.cmd_eval(str(reranked), qrels)
        lines = "\n".join(evaluated.to_lines()).encode()
        return [
            records.read_bytes(),
            kept.read_bytes(),
            reranked.read_bytes(),
            lines,
        ]

    first = pipeline(tmp_path / "first", 1)
    second = pipeline(tmp_path / "second", 8)
    assert first == second
    assert len(first[0].splitlines()) == 6


def test_report_reasoning_length():
    bundle = synthetic_bundle(queries=3, candidates=30)
    backend = IdentityBackend()
    backend.think = "abc"
    _, report = asyncio.run(harness(backend).rerank(bundle))
    assert report.reasoning_chars == {"q000": 3.0, "q001": 3.0, "q002": 3.0}
    lengths = [
        key_values(line)
        for line in report.to_lines()
        if line.startswith("metric=reasoning_length")
    ]
    chars = [pairs for pairs in lengths if pairs["unit"] == "chars"]
    assert [pairs["qid"] for pairs in chars] == ["q000", "q001", "q002", "all"]
    assert float(chars[-1]["value"]) == 3.0
    assert any(pairs["unit"] == "tokens" for pairs in lengths)
    header = report.render().splitlines()[0].split()
    assert header[-1] == "think"
    assert report.render().splitlines()[-1].split()[-1] == "3"
