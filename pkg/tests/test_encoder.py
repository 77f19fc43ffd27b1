import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bixse_lab.encoder import (EmbeddingMatrix, EncoderParams, TextItem, encode_batch,
                               encoder_backward, init_params, l2_normalize, score_matrix,
                               tokenize, trigrams)
from bixse_lab.errors import (DimMismatch, EmptyText, ShapeMismatch, StaleCache,
                              ZeroVector)

words = st.text(alphabet="abcdefghij XYZ", min_size=1, max_size=30).filter(lambda s: s.strip())


def items(texts, prefix="x"):
    return [TextItem(f"{prefix}{i}", t) for i, t in enumerate(texts)]


def test_trigrams_of_cat_hand_enumerated():
    # "^cat$" -> ^ca, cat, at$ : one trigram per character of the word
    assert trigrams("cat") == ["^ca", "cat", "at$"]
    assert len(tokenize("cat")) == 3


def test_trigram_count_is_word_length():
    assert len(trigrams("a bb ccc")) == 1 + 2 + 3
    assert trigrams("A") == ["^a$"]


def test_tokenize_empty_and_whitespace():
    assert tokenize("") == []
    assert tokenize("   ") == []


@given(words, st.integers(1, 5000), st.integers(0, 2**64 - 1))
def test_tokenize_deterministic_and_in_range(text, H, seed):
    a = tokenize(text, H, seed)
    assert a == tokenize(text, H, seed)
    assert all(0 <= i < H for i in a)


def test_hash_seed_changes_buckets():
    text = "the quick brown fox jumps"
    assert tokenize(text, 4096, 0) != tokenize(text, 4096, 1)


def test_l2_normalize_examples():
    np.testing.assert_allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8], atol=1e-15)
    u = np.array([0.0, 1.0, 0.0])
    np.testing.assert_array_equal(l2_normalize(u), u)
    with pytest.raises(ZeroVector):
        l2_normalize([0.0, 0.0])


def test_text_item_validation():
    with pytest.raises(EmptyText):
        TextItem("", "x")
    with pytest.raises(EmptyText):
        TextItem("a", "   ")
    assert TextItem("a", "q", instruction="find").full_text == "find: q"


def test_single_bucket_item_recovers_table_row():
    # every trigram of any text lands in bucket 0 when H = 1
    table = np.array([[1.0, 0.0, 0.0]])
    E = encode_batch(items(["some words here"]), EncoderParams(table))
    np.testing.assert_allclose(E.rows, [[1.0, 0.0, 0.0]], atol=1e-15)


def test_encode_matches_manual_mean_pool():
    p = init_params(64, 5, seed=3)
    text = "alpha beta beta"
    ids = tokenize(text, 64, 0)
    raw = np.mean([p.table[i] for i in ids], axis=0)
    E = encode_batch(items([text]), p)
    np.testing.assert_allclose(E.rows[0], raw / np.linalg.norm(raw), atol=1e-14)
    np.testing.assert_allclose(E.raw[0], raw, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.lists(words, min_size=1, max_size=6))
def test_rows_unit_norm(texts):
    E = encode_batch(items(texts), init_params(128, 8, seed=0))
    np.testing.assert_allclose(np.linalg.norm(E.rows, axis=1), 1.0, atol=1e-9)
    assert np.all(E.norms > 0)


def test_identical_text_identical_rows():
    E = encode_batch([TextItem("a", "x y", instruction="i"), TextItem("b", "x y", instruction="i")],
                     init_params(64, 4))
    np.testing.assert_array_equal(E.rows[0], E.rows[1])


def test_instruction_changes_embedding():
    p = init_params(256, 8)
    a = encode_batch([TextItem("a", "red fish")], p).rows
    b = encode_batch([TextItem("a", "red fish", instruction="retrieve passages")], p).rows
    assert not np.allclose(a, b)


def test_permutation_equivariance(rng):
    texts = ["one two", "three", "four five six", "seven"]
    p = init_params(128, 6)
    E = encode_batch(items(texts), p)
    perm = rng.permutation(len(texts))
    Ep = encode_batch([items(texts)[i] for i in perm], p)
    np.testing.assert_array_equal(Ep.rows, E.rows[perm])


def test_empty_feature_item_rejected():
    # bypass TextItem validation to reach the encoder's own check
    blank = object.__new__(TextItem)
    for k, v in {"id": "blank", "text": "", "task": "default", "instruction": None}.items():
        object.__setattr__(blank, k, v)
    with pytest.raises(EmptyText):
        encode_batch(items(["ok"]) + [blank], init_params(8, 2))


def test_zero_pool_is_error():
    with pytest.raises(ZeroVector):
        encode_batch(items(["anything"]), EncoderParams(np.zeros((4, 3))))


def test_score_matrix_examples():
    p = EncoderParams(np.eye(2), alpha=20.0, beta=0.0)
    Q = EmbeddingMatrix(np.array([[1.0, 0.0]]))
    assert score_matrix(Q, Q, p)[0, 0] == 20.0
    p.beta = -1.0
    D = EmbeddingMatrix(np.array([[0.0, 1.0]]))
    assert score_matrix(Q, D, p)[0, 0] == -1.0
    assert score_matrix(Q, D, p, use_bias=False)[0, 0] == 0.0
    with pytest.raises(DimMismatch):
        score_matrix(Q, EmbeddingMatrix(np.ones((1, 3)) / np.sqrt(3)), p)


def test_score_matrix_vs_loop_oracle(rng):
    p = EncoderParams(np.eye(4), alpha=7.5, beta=0.3)
    Q = EmbeddingMatrix(np.array([l2_normalize(v) for v in rng.normal(size=(3, 4))]))
    D = EmbeddingMatrix(np.array([l2_normalize(v) for v in rng.normal(size=(3, 4))]))
    S = score_matrix(Q, D, p)
    for i in range(3):
        for j in range(3):
            dot = sum(Q.rows[i, c] * D.rows[j, c] for c in range(4))
            assert abs(S[i, j] - (7.5 * dot + 0.3)) < 1e-12
    assert np.all(np.abs(S) <= p.alpha + abs(p.beta) + 1e-12)


def test_backward_zero_and_bias_sum(rng):
    p = init_params(32, 4, seed=1)
    Q = encode_batch(items(["a b", "c d"], "q"), p)
    D = encode_batch(items(["e f", "g", "h i j"], "d"), p)
    g = encoder_backward(np.zeros((2, 3)), Q, D, p)
    assert not g.table.any() and g.alpha == 0.0 and g.beta == 0.0
    dS = rng.normal(size=(2, 3))
    assert encoder_backward(dS, Q, D, p).beta == pytest.approx(dS.sum(), abs=1e-14)
    assert encoder_backward(dS, Q, D, p, use_bias=False).beta == 0.0


def test_backward_errors():
    p = init_params(16, 3)
    Q = encode_batch(items(["a"]), p)
    with pytest.raises(ShapeMismatch):
        encoder_backward(np.zeros((2, 1)), Q, Q, p)
    with pytest.raises(StaleCache):
        encoder_backward(np.zeros((1, 1)), EmbeddingMatrix(Q.rows), Q, p)


def test_backward_finite_difference_two_items(rng):
    # loss = sum(W * S) for a fixed random W, so dL/dS = W
    p = init_params(16, 4, seed=5, alpha=2.5, beta=0.4)
    qi, di = items(["red apple"], "q"), items(["green apple pie"], "d")
    W = rng.normal(size=(1, 1))

    def f(params):
        S = score_matrix(encode_batch(qi, params), encode_batch(di, params), params)
        return float(np.sum(W * S))

    Q, D = encode_batch(qi, p), encode_batch(di, p)
    g = encoder_backward(W, Q, D, p)
    h = 1e-5
    num = np.zeros_like(p.table)
    for idx in np.ndindex(*p.table.shape):
        q = p.copy()
        q.table[idx] += h
        fp = f(q)
        q.table[idx] -= 2 * h
        num[idx] = (fp - f(q)) / (2 * h)
    rel = np.abs(g.table - num) / np.maximum(np.maximum(np.abs(g.table), np.abs(num)), 1e-6)
    assert rel.max() < 1e-4
    q = p.copy()
    q.alpha += h
    fp = f(q)
    q.alpha -= 2 * h
    assert g.alpha == pytest.approx((fp - f(q)) / (2 * h), rel=1e-6)
