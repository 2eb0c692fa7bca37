from __future__ import annotations

import json

from typing import Container, Iterator, Mapping, Optional
from dataclasses import dataclass
from metrics import RelevanceJudgments
from ranking import CandidateList, Passage, Query, RankedList


class LoadError(Exception):
    path: str
    line: int

    def __init__(self, path: str, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


@dataclass
class DatasetBundle:
    corpus: dict[str, Passage]
    queries: dict[str, Query]
    run: dict[str, CandidateList]
    qrels: RelevanceJudgments

    @property
    def texts(self) -> dict[str, str]:
        return {id: passage.text for id, passage in self.corpus.items()}


def read_jsonl(path: str) -> Iterator[tuple[int, dict]]:
    with open(path, "r") as file:
        for number, line in enumerate(file, start=1):
            if line.strip() == "":
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as error:
                raise LoadError(path, number, f"invalid json: {error}")
            if not isinstance(record, dict):
                raise LoadError(path, number, "record is not an object")
            yield number, record


def write_jsonl(path: str, records: list[dict]):
    with open(path, "w") as file:
        for record in records:
            file.write(json.dumps(record, ensure_ascii=False) + "\n")


def load_corpus(path: str) -> dict[str, Passage]:
    corpus: dict[str, Passage] = {}
    for number, record in read_jsonl(path):
        try:
            passage = Passage(
                str(record["id"]), str(record["text"]), record.get("source")
            )
        except (KeyError, ValueError) as error:
            raise LoadError(path, number, f"bad passage: {error}")
        if passage.id in corpus:
            raise LoadError(path, number, f"duplicate id {passage.id}")
        corpus[passage.id] = passage
    return corpus


def load_queries(path: str) -> dict[str, Query]:
    queries: dict[str, Query] = {}
    for number, record in read_jsonl(path):
        try:
            query = Query(
                str(record["qid"]),
                str(record["text"]),
                record.get("rewritten"),
            )
        except (KeyError, ValueError) as error:
            raise LoadError(path, number, f"bad query: {error}")
        if query.qid in queries:
            raise LoadError(path, number, f"duplicate qid {query.qid}")
        queries[query.qid] = query
    return queries


def load_run(
    path: str,
    topn: Optional[int] = None,
    docids: Optional[Container[str]] = None,
    qids: Optional[Container[str]] = None,
) -> dict[str, CandidateList]:
    """Read a 6-column run, ordered by rank and cut to the top `topn`."""
    rows: dict[str, list[tuple[int, str, float]]] = {}
    first_line: dict[str, int] = {}
    with open(path, "r") as file:
        for number, line in enumerate(file, start=1):
            columns = line.split()
            if len(columns) == 0:
                continue
            if len(columns) != 6 or columns[1] != "Q0":
                raise LoadError(path, number, f"malformed run row {line!r}")
            qid, _, docid, rank_column, score_column, _ = columns
            try:
                rank, score = int(rank_column), float(score_column)
            except ValueError:
                raise LoadError(path, number, "rank or score not numeric")
            if docids is not None and docid not in docids:
                raise LoadError(path, number, f"unknown docid {docid}")
            if qids is not None and qid not in qids:
                raise LoadError(path, number, f"unknown qid {qid}")

            entries = rows.setdefault(qid, [])
            first_line.setdefault(qid, number)
            if any(r == rank for r, _, _ in entries):
                raise LoadError(path, number, f"duplicate rank {rank}")
            if any(d == docid for _, d, _ in entries):
                raise LoadError(path, number, f"duplicate docid {docid}")
            entries.append((rank, docid, score))

    run = {}
    for qid, entries in rows.items():
        entries.sort()
        if topn is not None:
            entries = entries[:topn]
        try:
            run[qid] = CandidateList(
                qid, tuple((docid, score) for _, docid, score in entries)
            )
        except ValueError as error:
            raise LoadError(path, first_line[qid], str(error))
    return run


def load_qrels(
    path: str, qids: Optional[Container[str]] = None
) -> RelevanceJudgments:
    judgments = RelevanceJudgments()
    with open(path, "r") as file:
        for number, line in enumerate(file, start=1):
            columns = line.split()
            if len(columns) == 0:
                continue
            if len(columns) != 4:
                raise LoadError(path, number, f"malformed qrels row {line!r}")
            qid, _, docid, grade_column = columns
            try:
                grade = int(grade_column)
            except ValueError:
                raise LoadError(path, number, "grade is not an integer")
            if grade < 0:
                raise LoadError(path, number, f"negative grade {grade}")
            if qids is not None and qid not in qids:
                raise LoadError(path, number, f"unknown qid {qid}")
            judgments.add(qid, docid, grade)
    return judgments


def load_dataset(
    corpus: str,
    queries: str,
    run: str,
    qrels: Optional[str] = None,
    topn: Optional[int] = None,
) -> DatasetBundle:
    passages = load_corpus(corpus)
    loaded_queries = load_queries(queries)
    return DatasetBundle(
        corpus=passages,
        queries=loaded_queries,
        run=load_run(run, topn, docids=passages, qids=loaded_queries),
        qrels=(
            load_qrels(qrels, qids=loaded_queries)
            if qrels is not None
            else RelevanceJudgments()
        ),
    )


def format_run(rankings: Mapping[str, RankedList], tag: str) -> str:
    """6-column run, queries in qid order, score 1/rank."""
    lines = []
    for qid in sorted(rankings):
        for rank, docid in enumerate(rankings[qid], start=1):
            lines.append(f"{qid} Q0 {docid} {rank} {1.0 / rank:.8f} {tag}")
    return "".join(line + "\n" for line in lines)


def write_run(path: str, rankings: Mapping[str, RankedList], tag: str):
    with open(path, "w") as file:
        file.write(format_run(rankings, tag))
