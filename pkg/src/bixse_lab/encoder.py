"""Hashed character-trigram bi-encoder.

Text is lowercased, split on whitespace, each word is wrapped in boundary
markers (``^word$``) and cut into character trigrams.  Trigrams are hashed
into ``n_buckets`` rows of an embedding table; an item's embedding is the
L2-normalised mean of its rows.  Queries and documents share the table.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DimMismatch, EmptyText, ShapeMismatch, StaleCache, ZeroVector

DEFAULT_BUCKETS = 4096
DEFAULT_DIM = 64
DEFAULT_ALPHA = 20.0
INIT_SCALE = 0.1
INSTRUCTION_SEP = ": "
NORM_EPS = 1e-12
_SEED_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class TextItem:
    id: str
    text: str
    task: str = "default"
    instruction: Optional[str] = None

    def __post_init__(self):
        if not self.id:
            raise EmptyText("TextItem id must be non-empty")
        if not self.text or not self.text.strip():
            raise EmptyText(f"TextItem {self.id!r} has empty text")

    @property
    def full_text(self) -> str:
        if self.instruction:
            return self.instruction + INSTRUCTION_SEP + self.text
        return self.text


@dataclass
class EncoderParams:
    table: np.ndarray
    alpha: float = DEFAULT_ALPHA
    beta: float = 0.0
    hash_seed: int = 0

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.float64)
        if self.table.ndim != 2:
            raise ShapeMismatch("table must be a 2-d array")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        self.hash_seed = int(self.hash_seed) & _SEED_MASK

    @property
    def n_buckets(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.table.copy(), self.alpha, self.beta, self.hash_seed)


def init_params(n_buckets=DEFAULT_BUCKETS, dim=DEFAULT_DIM, seed=0,
                alpha=DEFAULT_ALPHA, beta=0.0, hash_seed=0, scale=INIT_SCALE) -> EncoderParams:
    """Gaussian table with standard deviation ``scale``.

    ``seed`` drives the table, ``hash_seed`` the hashing.
    """
    rng = np.random.default_rng(seed)
    table = scale * rng.standard_normal((n_buckets, dim))
    return EncoderParams(table, float(alpha), float(beta), hash_seed)


def trigrams(text: str) -> list[str]:
    out = []
    for word in text.lower().split():
        padded = "^" + word + "$"
        out.extend(padded[i:i + 3] for i in range(len(padded) - 2))
    return out


@lru_cache(maxsize=1 << 18)
def _bucket(gram: str, n_buckets: int, seed: int) -> int:
    h = hashlib.blake2b(gram.encode("utf-8"), digest_size=8,
                        key=seed.to_bytes(8, "little"))
    return int.from_bytes(h.digest(), "little") % n_buckets


def tokenize(text: str, n_buckets: int = DEFAULT_BUCKETS, seed: int = 0) -> list[int]:
    """Feature ids of ``text``: one per padded character trigram, in order."""
    seed = int(seed) & _SEED_MASK
    return [_bucket(g, n_buckets, seed) for g in trigrams(text)]


@lru_cache(maxsize=1 << 16)
def _features(text: str, n_buckets: int, seed: int) -> np.ndarray:
    ids = np.array(tokenize(text, n_buckets, seed), dtype=np.int64)
    ids.setflags(write=False)
    return ids


def l2_normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n < NORM_EPS:
        raise ZeroVector(f"cannot normalise vector with norm {n:g}")
    return v / n


@dataclass
class EmbeddingMatrix:
    """Unit-norm rows plus the forward caches needed by ``encoder_backward``."""

    rows: np.ndarray
    raw: Optional[np.ndarray] = None
    norms: Optional[np.ndarray] = None
    pool: Optional[sp.csr_matrix] = field(default=None, repr=False)  # n x H mean-pooling weights

    def __len__(self):
        return self.rows.shape[0]

    @property
    def has_cache(self) -> bool:
        return self.raw is not None and self.pool is not None


def encode_batch(items: Sequence[TextItem], params: EncoderParams) -> EmbeddingMatrix:
    feats = [_features(it.full_text, params.n_buckets, params.hash_seed) for it in items]
    counts = np.array([len(f) for f in feats], dtype=np.int64)
    for it, c in zip(items, counts):
        if c == 0:
            raise EmptyText(f"item {it.id!r} has no features")
    ids = np.concatenate(feats) if feats else np.zeros(0, np.int64)
    indptr = np.concatenate(([0], np.cumsum(counts)))
    weights = np.repeat(1.0 / np.maximum(counts, 1), counts)
    # duplicate ids within a row are summed by the sparse product
    pool = sp.csr_matrix((weights, ids, indptr), shape=(len(feats), params.n_buckets))
    raw = np.asarray(pool @ params.table)
    norms = np.linalg.norm(raw, axis=1)
    bad = np.flatnonzero(norms < NORM_EPS)
    if bad.size:
        raise ZeroVector(f"item {items[bad[0]].id!r} pools to a zero vector")
    rows = raw / norms[:, None]
    return EmbeddingMatrix(rows, raw, norms, pool)


def score_matrix(Q: EmbeddingMatrix, D: EmbeddingMatrix, params: EncoderParams,
                 use_bias: bool = True) -> np.ndarray:
    """``alpha * Q D^T`` plus ``beta`` when ``use_bias``."""
    if Q.rows.shape[1] != D.rows.shape[1]:
        raise DimMismatch(f"query dim {Q.rows.shape[1]} != doc dim {D.rows.shape[1]}")
    S = params.alpha * (Q.rows @ D.rows.T)
    if use_bias:
        S = S + params.beta
    return S


@dataclass
class EncoderGrads:
    table: np.ndarray
    alpha: float
    beta: float


def _rows_to_table(grad_rows: np.ndarray, E: EmbeddingMatrix) -> np.ndarray:
    # normalisation Jacobian (I - x x^T) / |raw|, then transpose of mean pooling
    x = E.rows
    g = grad_rows - x * np.sum(x * grad_rows, axis=1, keepdims=True)
    g /= E.norms[:, None]
    return np.asarray(E.pool.T @ g)


def encoder_backward(dS: np.ndarray, Q: EmbeddingMatrix, D: EmbeddingMatrix,
                     params: EncoderParams, use_bias: bool = True) -> EncoderGrads:
    """Chain ``dL/dS`` back to the table, ``alpha`` and ``beta``."""
    dS = np.asarray(dS, dtype=np.float64)
    if not (Q.has_cache and D.has_cache):
        raise StaleCache("embedding caches missing; run encode_batch first")
    if dS.shape != (len(Q), len(D)):
        raise ShapeMismatch(f"dS shape {dS.shape} != {(len(Q), len(D))}")
    cos = Q.rows @ D.rows.T
    d_alpha = float(np.sum(dS * cos))
    d_beta = float(np.sum(dS)) if use_bias else 0.0
    table_grad = _rows_to_table(params.alpha * (dS @ D.rows), Q)
    table_grad += _rows_to_table(params.alpha * (dS.T @ Q.rows), D)
    return EncoderGrads(table_grad, d_alpha, d_beta)
