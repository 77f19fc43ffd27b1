"""Exhaustive retrieval and graded nDCG."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .encoder import EncoderParams, TextItem, encode_batch
from .errors import EmptyCorpus, UserError
from .trec import Qrels, RunRanking


def rank_order(scores: np.ndarray, doc_ids: Sequence[str]) -> np.ndarray:
    """Indices sorted by descending score, ties by ascending doc id."""
    keys = np.array(doc_ids)
    return np.lexsort((keys, -np.asarray(scores)))


def retrieve_topk(queries: Sequence[TextItem], corpus: Sequence[TextItem],
                  params: EncoderParams, k: int = 10) -> RunRanking:
    if k < 1:
        raise UserError("k must be >= 1")
    if not corpus:
        raise EmptyCorpus("corpus is empty")
    Q = encode_batch(queries, params).rows
    D = encode_batch(corpus, params).rows
    sims = Q @ D.T
    ids = [d.id for d in corpus]
    run: RunRanking = {}
    for qi, q in enumerate(queries):
        order = rank_order(sims[qi], ids)[:k]
        run[q.id] = [(ids[j], float(sims[qi, j])) for j in order]
    return run


def dcg(grades: Sequence[int]) -> float:
    return math.fsum((2.0 ** g - 1.0) / math.log2(r + 1) for r, g in enumerate(grades, start=1))


@dataclass
class NdcgResult:
    per_query: dict[str, float]
    mean: float
    skipped: int


def ndcg_at_k(run: RunRanking, qrels: Qrels, k: int = 10) -> NdcgResult:
    """Mean nDCG@k over queries judged in ``qrels`` with a nonzero ideal DCG.

    Unjudged retrieved documents count as grade 0; queries missing from the
    qrels or with IDCG = 0 are skipped and counted.
    """
    if k < 1:
        raise UserError("k must be >= 1")
    per_query = {}
    skipped = 0
    for qid, docs in run.items():
        if qid not in qrels:
            skipped += 1
            continue
        judged = qrels[qid]
        ideal = dcg(sorted(judged.values(), reverse=True)[:k])
        if ideal == 0:
            skipped += 1
            continue
        got = dcg([judged.get(did, 0) for did, _ in docs[:k]])
        per_query[qid] = got / ideal
    mean = math.fsum(per_query.values()) / len(per_query) if per_query else 0.0
    return NdcgResult(per_query, mean, skipped)


def evaluate_run(params: EncoderParams, queries: Sequence[TextItem], corpus: Sequence[TextItem],
                 qrels: Qrels, k: int = 10) -> dict:
    judged = [q for q in queries if q.id in qrels]
    if not judged:
        return {f"ndcg@{k}": 0.0, "coverage": 0.0, "queries": 0}
    run = retrieve_topk(judged, corpus, params, k)
    res = ndcg_at_k(run, qrels, k)
    return {
        f"ndcg@{k}": res.mean,
        "coverage": len(res.per_query) / len(queries),
        "queries": len(res.per_query),
    }
