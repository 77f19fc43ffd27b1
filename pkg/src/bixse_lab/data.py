"""Graded training records: ingestion, label conversion, transforms and batching."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (BadDistribution, EmptyResult, LabelRange, MixedSchema, NeedsBinary,
                     NeedsOneNegative, NotEnoughNegatives, ParseError, UserError)

ORIGINS = ("labeled", "converted", "synthetic")


@dataclass(frozen=True)
class HardNegative:
    doc_id: str
    doc: str
    relevance: float = 0.0


@dataclass(frozen=True)
class GradedRecord:
    query_id: str
    doc_id: str
    query: str
    doc: str
    task: str
    relevance: float
    hard_negatives: tuple[HardNegative, ...] = ()
    origin: str = "labeled"

    def __post_init__(self):
        if not self.query_id or not self.doc_id:
            raise UserError("query_id and doc_id must be non-empty")
        if not 0.0 <= self.relevance <= 1.0:
            raise LabelRange(f"relevance {self.relevance} outside [0, 1]")
        for hn in self.hard_negatives:
            if not 0.0 <= hn.relevance <= 1.0:
                raise LabelRange(f"hard negative relevance {hn.relevance} outside [0, 1]")
        if self.origin not in ORIGINS:
            raise UserError(f"unknown origin {self.origin!r}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["hard_negatives"] = [asdict(h) for h in self.hard_negatives]
        return d


@dataclass(frozen=True)
class ScoreDistribution:
    """Probability mass over a contiguous range of integer scores."""

    probs: Mapping[int, float]

    def __post_init__(self):
        if not self.probs:
            raise BadDistribution("empty score distribution")
        keys = sorted(int(k) for k in self.probs)
        if keys != list(range(keys[0], keys[-1] + 1)):
            raise BadDistribution(f"support {keys} is not contiguous")
        vals = np.array([float(self.probs[k]) for k in self.probs])
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise BadDistribution("negative or non-finite probability mass")
        if abs(vals.sum() - 1.0) > 1e-6:
            raise BadDistribution(f"probabilities sum to {vals.sum():.8f}")

    @classmethod
    def from_json(cls, obj) -> "ScoreDistribution":
        if isinstance(obj, Mapping):
            try:
                return cls({int(k): float(v) for k, v in obj.items()})
            except ValueError as e:
                raise BadDistribution(str(e)) from None
        raise BadDistribution("score_probs must be an object mapping score -> probability")


def llm_scores_to_relevance(dist: ScoreDistribution) -> float:
    """Expected score, affinely mapped from ``[s_min, s_max]`` onto ``[0, 1]``."""
    keys = sorted(dist.probs)
    lo, hi = keys[0], keys[-1]
    expected = math.fsum(k * float(dist.probs[k]) for k in keys)
    if hi == lo:
        return 1.0
    return min(1.0, max(0.0, (expected - lo) / (hi - lo)))


# -- JSONL ----------------------------------------------------------------------

def _record_from_obj(obj: dict, line_no: int) -> GradedRecord:
    if not isinstance(obj, dict):
        raise ParseError(line_no, "expected a JSON object")
    has_rel, has_probs = "relevance" in obj, "score_probs" in obj
    if has_rel and has_probs:
        raise MixedSchema(line_no, "both relevance and score_probs given")
    if has_probs:
        rel = llm_scores_to_relevance(ScoreDistribution.from_json(obj["score_probs"]))
        origin = "converted"
    elif has_rel:
        rel = float(obj["relevance"])
        origin = obj.get("origin", "labeled")
    else:
        raise ParseError(line_no, "missing relevance or score_probs")
    try:
        negs = []
        for h in obj.get("hard_negatives") or []:
            if "score_probs" in h:
                r = llm_scores_to_relevance(ScoreDistribution.from_json(h["score_probs"]))
            else:
                r = float(h.get("relevance", 0.0))
            negs.append(HardNegative(str(h["doc_id"]), str(h["doc"]), r))
        return GradedRecord(
            query_id=str(obj["query_id"]), doc_id=str(obj["doc_id"]),
            query=str(obj["query"]), doc=str(obj["doc"]),
            task=str(obj.get("task", "default")), relevance=rel,
            hard_negatives=tuple(negs), origin=origin)
    except KeyError as e:
        raise ParseError(line_no, f"missing field {e.args[0]!r}") from None
    except (TypeError, ValueError) as e:
        if isinstance(e, UserError):
            raise
        raise ParseError(line_no, str(e)) from None


def load_jsonl(path) -> list[GradedRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(line_no, e.msg) from None
            try:
                records.append(_record_from_obj(obj, line_no))
            except LabelRange as e:
                raise LabelRange(f"line {line_no}: {e}") from None
    return records


def dump_jsonl(records: Iterable, path) -> None:
    from .io import atomic_write_text
    lines = [json.dumps(r.to_json() if hasattr(r, "to_json") else r,
                        ensure_ascii=False, sort_keys=True) for r in records]
    atomic_write_text(path, "".join(l + "\n" for l in lines))


def load_items(path):
    """Corpus or query file: one ``{"id", "text", "task"?, "instruction"?}`` object per line."""
    from .encoder import TextItem
    items = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                items.append(TextItem(str(obj["id"]), str(obj["text"]), str(obj.get("task", "default")),
                                      obj.get("instruction")))
            except json.JSONDecodeError as e:
                raise ParseError(line_no, e.msg) from None
            except (KeyError, TypeError) as e:
                raise ParseError(line_no, f"bad item: {e}") from None
    return items


def dump_items(items, path) -> None:
    rows = []
    for it in items:
        obj = {"id": it.id, "text": it.text, "task": it.task}
        if it.instruction:
            obj["instruction"] = it.instruction
        rows.append(obj)
    dump_jsonl(rows, path)


# -- transforms -------------------------------------------------------------------

def _is_binary(x: float) -> bool:
    return x == 0.0 or x == 1.0


def flip_record(rec: GradedRecord) -> GradedRecord:
    """Swap the positive document with its single hard negative; labels keep their slots."""
    hn = rec.hard_negatives[0]
    return replace(rec, doc_id=hn.doc_id, doc=hn.doc,
                   hard_negatives=(HardNegative(rec.doc_id, rec.doc, hn.relevance),))


def inject_label_noise(records: Sequence[GradedRecord], p: float, seed: int) -> list[GradedRecord]:
    if not 0.0 <= p <= 1.0:
        raise UserError(f"flip probability {p} outside [0, 1]")
    for r in records:
        if len(r.hard_negatives) != 1:
            raise NeedsOneNegative(f"record {r.query_id} has {len(r.hard_negatives)} hard negatives")
        if not (_is_binary(r.relevance) and _is_binary(r.hard_negatives[0].relevance)):
            raise NeedsBinary(f"record {r.query_id} has graded labels")
    flips = np.random.default_rng(seed).random(len(records)) < p
    return [flip_record(r) if f else r for r, f in zip(records, flips)]


def filter_by_cutoff(records: Sequence[GradedRecord], cutoff: float,
                     mode: str = "keep_graded", *, strict: bool = False) -> list[GradedRecord]:
    """Drop records whose relevance is below ``cutoff``.

    ``mode='binarize'`` sets survivors' relevance to 1.0. Hard negatives are
    left untouched.  An empty result is returned as-is unless ``strict``.
    """
    if not 0.0 <= cutoff <= 1.0:
        raise UserError(f"cutoff {cutoff} outside [0, 1]")
    if mode not in ("binarize", "keep_graded"):
        raise UserError(f"unknown cutoff mode {mode!r}")
    kept = [r for r in records if r.relevance >= cutoff]
    if mode == "binarize":
        kept = [replace(r, relevance=1.0) for r in kept]
    if strict and not kept:
        raise EmptyResult(f"no record survives cutoff {cutoff}")
    return kept


def subsample_to_match(recordsets: Sequence[Sequence[GradedRecord]], seed: int) -> list[list[GradedRecord]]:
    n = min(len(rs) for rs in recordsets)
    out = []
    for j, rs in enumerate(recordsets):
        rng = np.random.default_rng([seed, j])
        idx = np.sort(rng.permutation(len(rs))[:n])
        out.append([rs[i] for i in idx])
    return out


@dataclass
class Batch:
    records: list[GradedRecord]
    K: int

    @property
    def size(self) -> int:
        return len(self.records)

    def hard_negatives(self, i: int) -> tuple[HardNegative, ...]:
        return self.records[i].hard_negatives[:self.K]


def make_batches(records: Sequence[GradedRecord], B: int, K: int, seed: int,
                 task_conditioned: bool = True) -> list[Batch]:
    """Seeded shuffle into full batches of ``B`` records carrying ``K`` hard negatives each.

    With ``task_conditioned`` every batch holds a single task; trailing partial
    batches (per task) are dropped.
    """
    if B < 1:
        raise UserError("batch size must be >= 1")
    if K < 0:
        raise UserError("K must be >= 0")
    for r in records:
        if len(r.hard_negatives) < K:
            raise NotEnoughNegatives(f"record {r.query_id} has {len(r.hard_negatives)} < {K} hard negatives")
    rng = np.random.default_rng(seed)
    if task_conditioned:
        groups = defaultdict(list)
        for r in records:
            groups[r.task].append(r)
        chunks = []
        for task in sorted(groups):
            g = groups[task]
            perm = rng.permutation(len(g))
            chunks.extend([g[i] for i in perm[s:s + B]] for s in range(0, len(g) - B + 1, B))
        order = rng.permutation(len(chunks))
        chunks = [chunks[i] for i in order]
    else:
        perm = rng.permutation(len(records))
        chunks = [[records[i] for i in perm[s:s + B]] for s in range(0, len(records) - B + 1, B)]
    return [Batch(c, K) for c in chunks]
