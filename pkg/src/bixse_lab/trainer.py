"""Optimisation loop for the toy bi-encoder."""

from __future__ import annotations

import base64
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import losses as L
from .data import Batch, GradedRecord, make_batches
from .encoder import (DEFAULT_ALPHA, DEFAULT_BUCKETS, DEFAULT_DIM, EncoderParams, TextItem,
                      encode_batch, encoder_backward, init_params, score_matrix)
from .errors import ConfigInvalid, EmptyDataset, NonFiniteGrad, ShapeMismatch, UserError
from .io import atomic_write_text
from .losses import LossKind

log = logging.getLogger(__name__)

ADAM_B1 = 0.9
ADAM_B2 = 0.98
ADAM_EPS = 1e-8
BASE_BATCH = 16
CHECKPOINT_FORMAT = "bixse-lab-checkpoint"

# per-loss base learning rates (at batch 16), picked on a held-out synthetic
# split (seed 11) from {0.003, 0.01, 0.03, 0.1}
DEFAULT_LR = {
    LossKind.INFONCE: 0.1,
    LossKind.BIXSE: 0.03,
    LossKind.SOFT_INFONCE: 0.003,
    LossKind.MARGIN_MSE: 0.01,
    LossKind.PAIRWISE_BCE: 0.1,
    LossKind.LAMBDA_NDCG1: 0.1,
    LossKind.LAMBDA_NDCG2: 0.1,
}
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    loss: LossKind = LossKind.BIXSE
    epochs: int = 4
    batch_size: int = 32
    hard_negatives: int = 0
    base_lr: Optional[float] = None  # None: DEFAULT_LR[loss]
    beta_lr_multiplier: float = 100.0
    alpha: float = DEFAULT_ALPHA
    warmup_fraction: float = 0.05
    seed: int = 0
    binarize_threshold: float = 0.5
    n_buckets: int = DEFAULT_BUCKETS
    dim: int = DEFAULT_DIM
    hash_seed: int = 0
    train_alpha: bool = False
    task_conditioned: bool = True
    teacher_scale: Optional[float] = None
    soft_target: str = "labeled"  # or "positive": only the record's own document
    instruction: Optional[str] = None
    eval_k: int = 10

    def __post_init__(self):
        self.loss = LossKind(self.loss)
        self.validate()

    @property
    def lr(self) -> float:
        return DEFAULT_LR[self.loss] if self.base_lr is None else self.base_lr

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigInvalid("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigInvalid("batch_size must be >= 1")
        if self.hard_negatives < 0:
            raise ConfigInvalid("hard_negatives must be >= 0")
        if self.base_lr is not None and not self.base_lr > 0:
            raise ConfigInvalid("base_lr must be positive")
        if not 0 < self.warmup_fraction < 1:
            raise ConfigInvalid("warmup_fraction must lie in (0, 1)")
        if not self.alpha > 0:
            raise ConfigInvalid("alpha must be positive")
        if self.soft_target not in ("labeled", "positive"):
            raise ConfigInvalid(f"unknown soft_target {self.soft_target!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.value
        return d


# -- schedule ---------------------------------------------------------------------

def scale_lr(base_lr: float, total_batch: int) -> float:
    """Square-root scaling from a reference batch size of 16."""
    if total_batch < 1:
        raise UserError("total_batch must be >= 1")
    return base_lr * math.sqrt(total_batch / BASE_BATCH)


def warmup_steps(total_steps: int, warmup_fraction: float) -> int:
    return max(1, math.ceil(warmup_fraction * total_steps))


def lr_at_step(step: int, total_steps: int, peak_lr: float, warmup_fraction: float = 0.05) -> float:
    """Linear warmup from 0 to ``peak_lr``, then linear decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise UserError(f"step {step} outside [0, {total_steps}]")
    w = warmup_steps(total_steps, warmup_fraction)
    if step < w:
        return peak_lr * step / w
    if total_steps == w:
        return peak_lr
    return peak_lr * (total_steps - step) / (total_steps - w)


# -- Adam ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              lr_multipliers: Optional[dict] = None) -> None:
    """One bias-corrected Adam update, in place; no weight decay.

    ``params``/``grads`` map names to float arrays (0-d for scalars).  Names
    missing from ``grads`` are frozen.  ``lr_multipliers`` scales the rate of
    individual parameter groups.
    """
    lr_multipliers = lr_multipliers or {}
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        if g.shape != np.shape(params[name]):
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, expected {np.shape(params[name])}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGrad(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_B1 ** t
    bc2 = 1.0 - ADAM_B2 ** t
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= ADAM_B1
        m += (1.0 - ADAM_B1) * g
        v *= ADAM_B2
        v += (1.0 - ADAM_B2) * np.square(g)
        step_lr = lr * lr_multipliers.get(name, 1.0)
        if step_lr == 0.0:
            continue
        denom = np.sqrt(v, out=np.empty_like(v))
        denom /= math.sqrt(bc2)
        denom += ADAM_EPS
        np.divide(m, denom, out=denom)
        denom *= step_lr / bc1
        params[name] -= denom


# -- one batch ------------------------------------------------------------------------

@dataclass
class BatchTensors:
    queries: list[TextItem]
    docs: list[TextItem]
    Z: np.ndarray


def batch_tensors(batch: Batch, instruction: Optional[str] = None) -> BatchTensors:
    recs = batch.records
    B, K = batch.size, batch.K
    queries = [TextItem(r.query_id, r.query, r.task, instruction) for r in recs]
    docs = [TextItem(r.doc_id, r.doc, r.task) for r in recs]
    for i in range(B):
        docs.extend(TextItem(h.doc_id, h.doc, recs[i].task) for h in batch.hard_negatives(i))
    Z = L.build_label_matrix([r.relevance for r in recs],
                             [[h.relevance for h in batch.hard_negatives(i)] for i in range(B)], K)
    return BatchTensors(queries, docs, Z)


def loss_on_scores(kind: LossKind, S: np.ndarray, Z: np.ndarray, cfg: TrainConfig) -> L.LossResult:
    """Dispatch a batch score matrix to its loss, handling rows without a usable target."""
    B = S.shape[0]
    K = L.infer_k(S)
    if kind in (LossKind.INFONCE, LossKind.SOFT_INFONCE):
        if kind is LossKind.INFONCE:
            rows = np.flatnonzero(np.diag(Z[:, :B]) >= cfg.binarize_threshold)
        else:
            mask = L.labeled_mask(B, K) if cfg.soft_target == "labeled" else np.eye(B, S.shape[1], dtype=bool)
            rows = np.flatnonzero(np.where(mask, Z, 0.0).sum(axis=1) > 0)
        dS = np.zeros_like(S)
        if rows.size == 0:
            return L.LossResult(0.0, dS, 0.0)
        if kind is LossKind.INFONCE:
            res = L.infonce(S[rows], rows)
        else:
            res = L.soft_infonce(S[rows], Z[rows], mask[rows])
        dS[rows] = res.dS
        return L.LossResult(res.value, dS, 0.0)
    if kind is LossKind.BIXSE:
        return L.bixse(S, Z)
    if kind is LossKind.MARGIN_MSE:
        scale = cfg.alpha if cfg.teacher_scale is None else cfg.teacher_scale
        return L.margin_mse(S, Z, scale)
    try:
        return L.compute_loss(kind, S, Z)
    except L.NoOrderedPairs:
        return L.LossResult(0.0, np.zeros_like(S), 0.0)


def batch_loss_and_grads(params: EncoderParams, bt: BatchTensors, cfg: TrainConfig):
    kind = cfg.loss
    Q = encode_batch(bt.queries, params)
    D = encode_batch(bt.docs, params)
    S = score_matrix(Q, D, params, use_bias=kind.uses_bias)
    res = loss_on_scores(kind, S, bt.Z, cfg)
    grads = encoder_backward(res.dS, Q, D, params, use_bias=kind.uses_bias)
    return res, grads


# -- training -------------------------------------------------------------------------

@dataclass
class EvalSet:
    queries: Sequence[TextItem]
    corpus: Sequence[TextItem]
    qrels: object


def _check_records(records: Sequence[GradedRecord], cfg: TrainConfig) -> None:
    if not records:
        raise EmptyDataset("no training records")
    if cfg.loss is LossKind.MARGIN_MSE and cfg.hard_negatives < 1:
        raise L.NeedsHardNegatives("margin MSE needs --hard-negs >= 1")


def train(records: Sequence[GradedRecord], cfg: TrainConfig,
          validation: Optional[EvalSet] = None, params: Optional[EncoderParams] = None):
    """Train and return ``(params, log)``.

    ``log`` has one dict per epoch.  With a ``validation`` set the checkpoint
    with the best nDCG@k is returned instead of the last one.
    """
    from .evaluation import evaluate_run

    _check_records(records, cfg)
    if params is None:
        params = init_params(cfg.n_buckets, cfg.dim, seed=cfg.seed, alpha=cfg.alpha,
                             hash_seed=cfg.hash_seed)
    else:
        params = params.copy()
    kind = cfg.loss
    batches_per_epoch = [make_batches(records, cfg.batch_size, cfg.hard_negatives,
                                      seed=cfg.seed * 1000 + e, task_conditioned=cfg.task_conditioned)
                         for e in range(cfg.epochs)]
    total = sum(len(b) for b in batches_per_epoch)
    if total == 0:
        raise EmptyDataset(f"{len(records)} records do not fill a single batch of {cfg.batch_size}")
    peak = scale_lr(cfg.lr, cfg.batch_size)
    state = AdamState()
    tensors = {"table": params.table, "alpha": np.array(params.alpha), "beta": np.array(params.beta)}
    mult = {"beta": cfg.beta_lr_multiplier}

    history = []
    best = (-math.inf, None)
    step = 0
    for epoch, batches in enumerate(batches_per_epoch, start=1):
        values = []
        for batch in batches:
            bt = batch_tensors(batch, cfg.instruction)
            params.alpha, params.beta = float(tensors["alpha"]), float(tensors["beta"])
            res, g = batch_loss_and_grads(params, bt, cfg)
            values.append(res.value)
            grads = {"table": g.table}
            if cfg.train_alpha:
                grads["alpha"] = np.array(g.alpha)
            if kind.uses_bias:
                grads["beta"] = np.array(g.beta)
            lr = lr_at_step(step, total, peak, cfg.warmup_fraction)
            adam_step(tensors, grads, state, lr, mult)
            if tensors["alpha"] <= 0:
                raise NonFiniteGrad("alpha left the positive half-line")
            step += 1
        params.alpha, params.beta = float(tensors["alpha"]), float(tensors["beta"])
        entry = {"epoch": epoch, "loss": float(np.mean(values)) if values else float("nan"),
                 "first_batch_loss": values[0] if values else float("nan"),
                 "lr": lr_at_step(step, total, peak, cfg.warmup_fraction),
                 "alpha": params.alpha, "beta": params.beta, "steps": step}
        if validation is not None:
            score = evaluate_run(params, validation.queries, validation.corpus,
                                 validation.qrels, cfg.eval_k)[f"ndcg@{cfg.eval_k}"]
            entry[f"ndcg@{cfg.eval_k}"] = score
            if score > best[0]:
                best = (score, params.copy())
        log.debug("epoch %d loss %.6f beta %.4f", epoch, entry["loss"], params.beta)
        history.append(entry)
    if best[1] is not None:
        return best[1], history
    return params, history


# -- gradient check -----------------------------------------------------------------

def _grad_check_batch(seed: int, B: int, K: int) -> Batch:
    from .synth import SynthConfig, synth_generate
    data = synth_generate(SynthConfig(n_topics=2, vocab_size=8, doc_len=3, query_len=2,
                                      corpus_size=1, n_queries=1, n_records=B,
                                      n_hard_negatives=K, hard_negative_max_level=1.0, seed=seed))
    rng = np.random.default_rng(seed)
    recs = []
    from dataclasses import replace
    from .data import HardNegative
    for i, r in enumerate(data.records):
        # continuous labels avoid ties; the first row always holds a positive
        z = 0.9 if i == 0 else float(rng.uniform(0.05, 0.95))
        negs = tuple(HardNegative(h.doc_id, h.doc, float(rng.uniform(0.0, 0.6))) for h in r.hard_negatives)
        recs.append(replace(r, relevance=z, hard_negatives=negs))
    return Batch(recs, K)


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def grad_check(kinds: Sequence[LossKind] | None = None, seed: int = 0, B: int = 3, K: int = 1,
               dim: int = 6, n_buckets: int = 32, h: float = 1e-5) -> dict:
    """Central finite differences of the full encode-score-loss chain.

    Returns ``{kind: {"table": err, "alpha": err, "beta": err, "dbeta": analytic}}``
    with per-coordinate maximum relative errors.
    """
    kinds = list(LossKind) if kinds is None else [LossKind(k) for k in kinds]
    batch = _grad_check_batch(seed, B, K)
    base = init_params(n_buckets, dim, seed=seed + 1, alpha=3.0, beta=-0.7)
    report = {}
    for kind in kinds:
        cfg = TrainConfig(loss=kind, hard_negatives=K, alpha=base.alpha, teacher_scale=2.0)
        bt = batch_tensors(batch)

        def f(p):
            return batch_loss_and_grads(p, bt, cfg)[0].value

        _, g = batch_loss_and_grads(base, bt, cfg)
        num_table = np.zeros_like(base.table)
        p = base.copy()
        for idx in np.ndindex(*base.table.shape):
            orig = p.table[idx]
            p.table[idx] = orig + h
            fp = f(p)
            p.table[idx] = orig - h
            fm = f(p)
            p.table[idx] = orig
            num_table[idx] = (fp - fm) / (2 * h)
        num = {}
        for name in ("alpha", "beta"):
            q = base.copy()
            v = getattr(q, name)
            setattr(q, name, v + h)
            fp = f(q)
            setattr(q, name, v - h)
            fm = f(q)
            num[name] = (fp - fm) / (2 * h)
        report[kind.value] = {
            "table": relative_error(g.table, num_table),
            "alpha": relative_error(g.alpha, num["alpha"]),
            "beta": relative_error(g.beta, num["beta"]),
            "dbeta": g.beta,
        }
    return report


# -- checkpoints ------------------------------------------------------------------------

def checkpoint_json(params: EncoderParams) -> str:
    table = np.ascontiguousarray(params.table, dtype="<f8")
    obj = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "n_buckets": params.n_buckets,
        "dim": params.dim,
        "hash_seed": params.hash_seed,
        "alpha": float(params.alpha).hex(),
        "beta": float(params.beta).hex(),
        "table": base64.b64encode(table.tobytes()).decode("ascii"),
    }
    return json.dumps(obj, sort_keys=True) + "\n"


def save_checkpoint(params: EncoderParams, path) -> None:
    atomic_write_text(path, checkpoint_json(params))


def load_checkpoint(path) -> EncoderParams:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    if obj.get("format") != CHECKPOINT_FORMAT or obj.get("version") != CHECKPOINT_VERSION:
        raise UserError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    table = np.frombuffer(base64.b64decode(obj["table"]), dtype="<f8").astype(np.float64)
    table = table.reshape(obj["n_buckets"], obj["dim"])
    return EncoderParams(table, float.fromhex(obj["alpha"]), float.fromhex(obj["beta"]), obj["hash_seed"])
