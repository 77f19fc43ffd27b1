import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bixse_lab.encoder import TextItem, init_params
from bixse_lab.errors import EmptyCorpus, ParseError
from bixse_lab.evaluation import evaluate_run, ndcg_at_k, rank_order, retrieve_topk
from bixse_lab.trainer import TrainConfig, train
from bixse_lab.trec import (Qrels, format_qrels, read_qrels, read_run, write_qrels,
                            write_run)


def qrels_from(d):
    q = Qrels()
    for qid, docs in d.items():
        for did, g in docs.items():
            q.add(qid, did, g)
    return q


def brute_ndcg(ranked, judged, k):
    def dcg(gs):
        return sum((2 ** g - 1) / math.log2(1 + r) for r, g in enumerate(gs, start=1))
    ideal = dcg(sorted(judged.values(), reverse=True)[:k])
    return dcg([judged.get(d, 0) for d in ranked[:k]]) / ideal


def test_ndcg_hand_examples():
    q = qrels_from({"q": {"a": 3, "b": 0}})
    r = ndcg_at_k({"q": [("b", 2.0), ("a", 1.0)]}, q, 2)
    assert r.mean == pytest.approx(1 / math.log2(3), abs=1e-12)
    assert r.mean == pytest.approx(0.6309, abs=1e-4)
    q = qrels_from({"q": {"a": 3, "b": 2, "c": 0}})
    r = ndcg_at_k({"q": [("c", 3.0), ("a", 2.0), ("b", 1.0)]}, q, 3)
    assert r.mean == pytest.approx(0.6653, abs=1e-4)
    assert ndcg_at_k({"q": [("a", 3.0), ("b", 2.0), ("c", 1.0)]}, q, 3).mean == 1.0


def test_ndcg_skips_unjudged_and_zero_ideal():
    q = qrels_from({"q1": {"a": 1}, "q2": {"a": 0}})
    r = ndcg_at_k({"q1": [("a", 1.0)], "q2": [("a", 1.0)], "q3": [("a", 1.0)]}, q, 10)
    assert r.per_query == {"q1": 1.0} and r.skipped == 2


@st.composite
def instances(draw):
    n = draw(st.integers(1, 12))
    grades = draw(st.lists(st.integers(0, 4), min_size=n, max_size=n))
    if not any(grades):
        grades[0] = 1
    perm = draw(st.permutations(list(range(n))))
    k = draw(st.integers(1, 12))
    return {f"d{i}": g for i, g in enumerate(grades)}, [f"d{i}" for i in perm], k


@settings(max_examples=1000, deadline=None)
@given(instances())
def test_ndcg_matches_bruteforce(inst):
    judged, ranked, k = inst
    run = {"q": [(d, -i) for i, d in enumerate(ranked)]}
    got = ndcg_at_k(run, qrels_from({"q": judged}), k).mean
    assert abs(got - brute_ndcg(ranked, judged, k)) < 1e-12
    assert 0.0 <= got <= 1.0 + 1e-12


@settings(max_examples=200, deadline=None)
@given(instances(), st.data())
def test_swap_toward_ideal_never_hurts(inst, data):
    judged, ranked, k = inst
    if len(ranked) < 2:
        return
    i = data.draw(st.integers(0, len(ranked) - 2))
    if judged[ranked[i]] >= judged[ranked[i + 1]]:
        return
    better = list(ranked)
    better[i], better[i + 1] = better[i + 1], better[i]
    assert brute_ndcg(better, judged, k) >= brute_ndcg(ranked, judged, k) - 1e-12
    q = qrels_from({"q": judged})
    before = ndcg_at_k({"q": [(d, -j) for j, d in enumerate(ranked)]}, q, k).mean
    after = ndcg_at_k({"q": [(d, -j) for j, d in enumerate(better)]}, q, k).mean
    assert after >= before - 1e-12


def corpus_items(rng, n):
    words = ["alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta"]
    return [TextItem(f"d{i:02d}", " ".join(rng.choice(words, 4))) for i in range(n)]


def test_retrieve_topk_vs_double_loop(rng):
    corpus = corpus_items(rng, 20)
    queries = [TextItem(f"q{i}", " ".join(rng.choice(["alpha", "gamma", "eta"], 2))) for i in range(5)]
    p = init_params(256, 8, seed=2)
    run = retrieve_topk(queries, corpus, p, k=20)
    from bixse_lab.encoder import encode_batch
    Q, D = encode_batch(queries, p).rows, encode_batch(corpus, p).rows
    for qi, q in enumerate(queries):
        sims = [(round(sum(Q[qi, c] * D[j, c] for c in range(8)), 12), d.id) for j, d in enumerate(corpus)]
        expect = [d for _, d in sorted(sims, key=lambda t: (-t[0], t[1]))]
        assert [d for d, _ in run[q.id]] == expect


def test_self_match_ranks_first(rng):
    corpus = corpus_items(rng, 15)
    q = TextItem("q", corpus[7].text)
    run = retrieve_topk([q], corpus, init_params(512, 16, seed=1), k=50)
    assert run["q"][0][1] == pytest.approx(1.0, abs=1e-12)
    assert len(run["q"]) == 15
    top = [d for d, s in run["q"] if s >= 1.0 - 1e-12]
    assert corpus[7].id in top


def test_rank_order_tie_rule():
    order = rank_order(np.array([0.5, 0.9, 0.5, 0.9]), ["d", "c", "b", "a"])
    assert list(order) == [3, 1, 2, 0]


@given(st.floats(0.01, 100), st.floats(-50, 50))
def test_ranking_invariant_to_affine_maps(a, b):
    rng = np.random.default_rng(0)
    s = rng.normal(size=30)
    ids = [f"d{i}" for i in range(30)]
    assert list(rank_order(s, ids)) == list(rank_order(a * s + b, ids))


def test_empty_corpus():
    with pytest.raises(EmptyCorpus):
        retrieve_topk([TextItem("q", "x")], [], init_params(8, 2), 5)


def test_trec_round_trip(tmp_path):
    q = qrels_from({"q1": {"a": 2, "b": 0}, "q2": {"c": 1}})
    write_qrels(q, tmp_path / "q.txt")
    assert read_qrels(tmp_path / "q.txt") == q
    run = {"q1": [("a", 0.5), ("b", 0.25)]}
    write_run(run, tmp_path / "r.txt")
    assert read_run(tmp_path / "r.txt") == run
    assert (tmp_path / "r.txt").read_text().splitlines()[0] == "q1 Q0 a 1 0.5 bixse_lab"
    (tmp_path / "bad.txt").write_text("q1 0 a 1\nq1 0 b\n")
    with pytest.raises(ParseError) as e:
        read_qrels(tmp_path / "bad.txt")
    assert e.value.line_no == 2
    assert format_qrels(q).startswith("q1 0 a 2\n")


def test_evaluate_run_reference(reference, reference_eval):
    ev = reference_eval
    untrained = init_params(seed=0)
    row0 = evaluate_run(untrained, ev.queries, ev.corpus, ev.qrels)
    assert 0.0 < row0["ndcg@10"] < 1.0
    assert row0 == evaluate_run(untrained, ev.queries, ev.corpus, ev.qrels)
    assert row0["queries"] == 100 and row0["coverage"] == 1.0
    trained, _ = train(reference.records, TrainConfig())
    assert evaluate_run(trained, ev.queries, ev.corpus, ev.qrels)["ndcg@10"] > row0["ndcg@10"]


def test_evaluate_run_empty_intersection(reference_eval):
    row = evaluate_run(init_params(), reference_eval.queries, reference_eval.corpus, Qrels())
    assert row["queries"] == 0
