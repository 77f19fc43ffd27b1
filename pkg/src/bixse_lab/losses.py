"""Training objectives over a batch score matrix.

Column layout shared by every loss: column ``i < B`` holds query ``i``'s
labelled document, columns ``B + i*K .. B + i*K + K - 1`` hold its ``K``
hard negatives.  Every other entry of a row is an in-batch document with
label 0.

Each loss returns a :class:`LossResult` with the value, ``dL/dS`` and
``dL/dbeta`` (``sum(dS)`` for the bias-using BCE loss, 0 otherwise).
"""

from __future__ import annotations

import enum
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import (AllZeroRow, InconsistentK, LabelRange, NeedsHardNegatives,
                     NoOrderedPairs, NoPositive, ShapeMismatch)


class LossKind(str, enum.Enum):
    INFONCE = "infonce"
    BIXSE = "bixse"
    SOFT_INFONCE = "soft_infonce"
    MARGIN_MSE = "margin_mse"
    PAIRWISE_BCE = "pairwise_bce"
    LAMBDA_NDCG1 = "lambda_ndcg1"
    LAMBDA_NDCG2 = "lambda_ndcg2"

    @property
    def uses_bias(self) -> bool:
        return self is LossKind.BIXSE


@dataclass
class LossResult:
    value: float
    dS: np.ndarray
    dbeta: float = 0.0


class OpCounter:
    """Tally of score entries and ordered pairs touched by loss evaluations."""

    def __init__(self):
        self.score_entries = 0
        self.pairs = 0
        self.calls = 0


_counter: Optional[OpCounter] = None


@contextmanager
def count_ops():
    global _counter
    prev, _counter = _counter, OpCounter()
    try:
        yield _counter
    finally:
        _counter = prev


def _tally(entries=0, pairs=0):
    if _counter is not None:
        _counter.score_entries += entries
        _counter.pairs += pairs
        _counter.calls += 1


def log_sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return -np.log1p(np.exp(-np.abs(x))) - np.maximum(-x, 0.0)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def gain(z):
    """Exponential gain on the 0-4 grade scale: ``2**(4z) - 1``."""
    return np.exp2(4.0 * np.asarray(z, dtype=np.float64)) - 1.0


# -- label layout -------------------------------------------------------------

def hard_negative_columns(B: int, K: int, i: int) -> np.ndarray:
    return B + i * K + np.arange(K)


def labeled_mask(B: int, K: int) -> np.ndarray:
    mask = np.zeros((B, B * (1 + K)), dtype=bool)
    for i in range(B):
        mask[i, i] = True
        mask[i, hard_negative_columns(B, K, i)] = True
    return mask


def infer_k(S: np.ndarray) -> int:
    B, M = S.shape
    if B == 0 or M % B or M < B:
        raise ShapeMismatch(f"score matrix {S.shape} does not fit the B x B(1+K) layout")
    return M // B - 1


def build_label_matrix(relevance: Sequence[float],
                       hard_negative_relevance: Sequence[Sequence[float]] | None = None,
                       K: int | None = None) -> np.ndarray:
    """B x B(1+K) label matrix from per-query relevance and hard-negative labels.

    ``hard_negative_relevance[i]`` lists query ``i``'s hard-negative labels;
    every query must supply the same number.
    """
    z = np.asarray(relevance, dtype=np.float64)
    B = z.shape[0]
    if hard_negative_relevance is None:
        hard_negative_relevance = [[] for _ in range(B)]
    ks = {len(h) for h in hard_negative_relevance}
    if len(ks) > 1:
        raise InconsistentK(f"records disagree on hard-negative count: {sorted(ks)}")
    k = ks.pop() if ks else 0
    if K is not None:
        if K > k:
            raise InconsistentK(f"asked for K={K} but records carry {k}")
        k = K
    Z = np.zeros((B, B * (1 + k)))
    for i in range(B):
        Z[i, i] = z[i]
        Z[i, hard_negative_columns(B, k, i)] = np.asarray(hard_negative_relevance[i][:k], float)
    if not np.all((Z >= 0) & (Z <= 1)):
        raise LabelRange("labels must lie in [0, 1]")
    return Z


def _check_labels(S, Z):
    if S.shape != Z.shape:
        raise ShapeMismatch(f"scores {S.shape} vs labels {Z.shape}")
    if not np.all((Z >= 0) & (Z <= 1)):
        raise LabelRange("labels must lie in [0, 1]")


# -- softmax family -------------------------------------------------------------

def _softmax_xent(S: np.ndarray, T: np.ndarray) -> LossResult:
    B = S.shape[0]
    shifted = S - S.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    value = float(-(T * logp).sum() / B)
    dS = (np.exp(logp) - T) / B
    _tally(entries=S.size)
    return LossResult(value, dS, 0.0)


def infonce(S, positives: Sequence[int] | None = None) -> LossResult:
    """Softmax cross-entropy with one positive column per row.

    ``positives[i]`` is row ``i``'s positive column (default: the diagonal);
    a negative entry means the row has no positive.
    """
    S = np.asarray(S, dtype=np.float64)
    B = S.shape[0]
    pos = np.arange(B) if positives is None else np.asarray(positives, dtype=np.int64)
    if pos.shape != (B,):
        raise ShapeMismatch("one positive index per row required")
    if np.any(pos < 0) or np.any(pos >= S.shape[1]):
        raise NoPositive(f"rows without a positive column: {np.flatnonzero(pos < 0).tolist()}")
    T = np.zeros_like(S)
    T[np.arange(B), pos] = 1.0
    return _softmax_xent(S, T)


def soft_infonce(S, Z, mask: np.ndarray | None = None) -> LossResult:
    """Softmax cross-entropy against row-normalised graded targets.

    ``mask`` selects which labelled columns feed the target (e.g. only the
    positive column, or positive plus hard negatives); unmasked columns get 0.
    """
    S = np.asarray(S, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    _check_labels(S, Z)
    T = Z if mask is None else np.where(mask, Z, 0.0)
    mass = T.sum(axis=1, keepdims=True)
    if np.any(mass <= 0):
        raise AllZeroRow(f"rows with zero target mass: {np.flatnonzero(mass[:, 0] <= 0).tolist()}")
    return _softmax_xent(S, T / mass)


# -- pointwise BCE ----------------------------------------------------------------

def bixse(S, Z) -> LossResult:
    """Binary cross-entropy over every (query, document) entry, averaged over queries."""
    S = np.asarray(S, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    _check_labels(S, Z)
    B = S.shape[0]
    terms = Z * log_sigmoid(S) + (1.0 - Z) * log_sigmoid(-S)
    value = float(-terms.sum() / B)
    dS = (sigmoid(S) - Z) / B
    _tally(entries=S.size)
    return LossResult(value, dS, float(dS.sum()))


def bce_terms(S, Z) -> np.ndarray:
    """Per-entry BCE, so that ``bixse(S, Z).value == bce_terms(S, Z).sum() / B``."""
    S = np.asarray(S, dtype=np.float64)
    return -(Z * log_sigmoid(S) + (1.0 - Z) * log_sigmoid(-S))


# -- margin MSE --------------------------------------------------------------------

def margin_mse(S, Z, teacher_scale: float = 20.0) -> LossResult:
    """Squared error between student and scaled teacher margins.

    Only the labelled positive and hard-negative columns participate; in-batch
    columns receive zero gradient.
    """
    S = np.asarray(S, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    _check_labels(S, Z)
    B = S.shape[0]
    K = infer_k(S)
    if K < 1:
        raise NeedsHardNegatives("margin MSE needs at least one hard negative per query")
    rows = np.arange(B)
    neg_cols = B + rows[:, None] * K + np.arange(K)[None, :]
    s_pos = S[rows, rows][:, None]
    z_pos = Z[rows, rows][:, None]
    resid = (s_pos - S[rows[:, None], neg_cols]) - teacher_scale * (z_pos - Z[rows[:, None], neg_cols])
    value = float((resid ** 2).mean(axis=1).sum() / B)
    g = 2.0 * resid / (K * B)
    dS = np.zeros_like(S)
    dS[rows, rows] = g.sum(axis=1)
    dS[rows[:, None], neg_cols] = -g
    _tally(entries=B * (1 + K))
    return LossResult(value, dS, 0.0)


# -- pairwise family -----------------------------------------------------------------

def _ranks(s: np.ndarray) -> np.ndarray:
    # 1-based rank by descending score, ties by column index
    order = np.lexsort((np.arange(s.size), -s))
    r = np.empty(s.size, dtype=np.int64)
    r[order] = np.arange(1, s.size + 1)
    return r


def _pair_weights(z, s, variant):
    G = gain(z)
    dG = np.abs(G[:, None] - G[None, :])
    r = _ranks(s).astype(np.float64)
    disc = 1.0 / np.log2(1.0 + r)
    if variant == 1:
        return dG / np.log2(1.0 + np.minimum(r[:, None], r[None, :]))
    if variant == 2:
        return dG * np.abs(disc[:, None] - disc[None, :])
    raise ValueError(f"unknown lambda variant {variant!r}")


def _ideal_dcg(z):
    g = np.sort(gain(z))[::-1]
    return float(np.sum(g / np.log2(np.arange(2, g.size + 2))))


def _pairwise(S, Z, variant=None) -> LossResult:
    S = np.asarray(S, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    _check_labels(S, Z)
    B, M = S.shape
    if M < 2:
        raise NoOrderedPairs("need at least two candidates per query")
    dS = np.zeros_like(S)
    total = 0.0
    n_units = 0
    touched = 0
    for i in range(B):
        s, z = S[i], Z[i]
        ordered = z[:, None] > z[None, :]
        touched += M * M
        if not ordered.any():
            continue
        delta = s[:, None] - s[None, :]
        nll = -log_sigmoid(delta)
        coef = -sigmoid(-delta)  # d nll / d delta
        if variant is None:
            w = ordered.astype(np.float64)
            n_units += int(ordered.sum())
        else:
            w = np.where(ordered, _pair_weights(z, s, variant), 0.0) / _ideal_dcg(z)
            n_units += 1
        total += float(np.sum(w * nll))
        wc = w * coef
        dS[i] += wc.sum(axis=1) - wc.sum(axis=0)
    _tally(entries=S.size, pairs=touched)
    if n_units == 0:
        raise NoOrderedPairs("no row has two distinct labels")
    return LossResult(total / n_units, dS / n_units, 0.0)


def pairwise_bce(S, Z) -> LossResult:
    """RankNet-style logistic loss averaged over every ordered label pair in the batch."""
    return _pairwise(S, Z)


def lambda_ndcg_loss(S, Z, variant: int = 2) -> LossResult:
    """Pairwise logistic loss weighted by NDCG-derived constants, per-row IDCG normalised.

    ``variant=1``: ``|dG| / log2(1 + min rank)``.
    ``variant=2``: ``|dG| * |1/log2(1+r_a) - 1/log2(1+r_b)|``.
    Ranks come from the current scores and are held constant in the gradient.
    The value is the mean over rows that contain at least one ordered pair.
    """
    return _pairwise(S, Z, variant)


def compute_loss(kind: LossKind | str, S, Z, *, positives=None, mask=None,
                 teacher_scale: float = 20.0) -> LossResult:
    kind = LossKind(kind)
    if kind is LossKind.INFONCE:
        return infonce(S, positives)
    if kind is LossKind.BIXSE:
        return bixse(S, Z)
    if kind is LossKind.SOFT_INFONCE:
        return soft_infonce(S, Z, mask)
    if kind is LossKind.MARGIN_MSE:
        return margin_mse(S, Z, teacher_scale)
    if kind is LossKind.PAIRWISE_BCE:
        return pairwise_bce(S, Z)
    if kind is LossKind.LAMBDA_NDCG1:
        return lambda_ndcg_loss(S, Z, 1)
    return lambda_ndcg_loss(S, Z, 2)
