"""TREC qrels and run files."""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ParseError, UserError
from .io import atomic_write_text


@dataclass
class Qrels:
    judgments: dict[str, dict[str, int]] = field(default_factory=dict)

    def add(self, query_id: str, doc_id: str, grade: int) -> None:
        if grade < 0:
            raise UserError(f"negative grade {grade} for ({query_id}, {doc_id})")
        self.judgments.setdefault(query_id, {})[doc_id] = int(grade)

    @property
    def max_grade(self) -> int:
        return max((g for d in self.judgments.values() for g in d.values()), default=0)

    def __contains__(self, query_id):
        return query_id in self.judgments

    def __getitem__(self, query_id):
        return self.judgments[query_id]

    def __len__(self):
        return len(self.judgments)


# query_id -> [(doc_id, score), ...] in rank order
RunRanking = dict[str, list[tuple[str, float]]]


def read_qrels(path) -> Qrels:
    qrels = Qrels()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise ParseError(line_no, "expected 'query_id iter doc_id grade'")
            try:
                grade = int(parts[3])
            except ValueError:
                raise ParseError(line_no, f"non-integer grade {parts[3]!r}") from None
            qrels.add(parts[0], parts[2], grade)
    return qrels


def format_qrels(qrels: Qrels) -> str:
    return "".join(f"{qid} 0 {did} {g}\n"
                   for qid, docs in qrels.judgments.items() for did, g in docs.items())


def write_qrels(qrels: Qrels, path) -> None:
    atomic_write_text(path, format_qrels(qrels))


def format_run(run: RunRanking, tag: str = "bixse_lab") -> str:
    return "".join(f"{qid} Q0 {did} {rank} {score:.10g} {tag}\n"
                   for qid, docs in run.items()
                   for rank, (did, score) in enumerate(docs, start=1))


def write_run(run: RunRanking, path, tag: str = "bixse_lab") -> None:
    atomic_write_text(path, format_run(run, tag))


def read_run(path) -> RunRanking:
    run: RunRanking = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise ParseError(line_no, "expected 'query_id Q0 doc_id rank score tag'")
            run.setdefault(parts[0], []).append((parts[2], float(parts[4])))
    return run
