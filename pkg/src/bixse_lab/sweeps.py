"""Controlled experiment sweeps: label noise, relevance cutoff, (K, B) budget, bias learning rate.

Each sweep returns a list of row dicts in grid order; ``write_csv`` renders them
with the sweep's fixed header.
"""

from __future__ import annotations

import csv
import io
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from typing import Callable, Iterable, Sequence

from .data import filter_by_cutoff, inject_label_noise, subsample_to_match
from .errors import EmptyResult, NeedsHardNegatives, NotEnoughNegatives
from .evaluation import evaluate_run
from .io import atomic_write_text
from .losses import LossKind
from .trainer import EvalSet, TrainConfig, train

HEADERS = {
    "noise": ["loss", "p", "seed", "ndcg@10"],
    "cutoff": ["loss", "cutoff", "seed", "ndcg@10", "retained_count"],
    "batchgrid": ["loss", "K", "B", "seed", "ndcg@10", "status"],
    "biaslr": ["beta_lr_multiplier", "seed", "ndcg@10", "final_beta"],
}

DEFAULT_NOISE_GRID = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
DEFAULT_CUTOFFS = (0.0, 0.2, 0.4, 0.6, 0.8, 0.9)
DEFAULT_BUDGET_GRID = ((15, 16), (7, 32), (3, 64), (1, 128), (0, 256))
DEFAULT_BIAS_MULTIPLIERS = (0.01, 1.0, 100.0, 10000.0)
DEFAULT_SEEDS = (0, 1, 2, 3, 4)


def _fit_and_score(records, cfg: TrainConfig, eval_set: EvalSet) -> tuple[float, float]:
    params, _ = train(records, cfg)
    row = evaluate_run(params, eval_set.queries, eval_set.corpus, eval_set.qrels, cfg.eval_k)
    return row[f"ndcg@{cfg.eval_k}"], params.beta


def _call(job):
    fn, args = job
    return fn(*args)


def _run_all(jobs: list, n_jobs: int) -> list:
    # results come back in submission order regardless of completion order
    if n_jobs <= 1:
        return [_call(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(_call, jobs))


def _noise_cell(records, cfg, eval_set, p, seed):
    noisy = inject_label_noise(records, p, seed=seed)
    return _fit_and_score(noisy, cfg, eval_set)[0]


def sweep_noise(records, eval_set: EvalSet, base: TrainConfig,
                p_values: Sequence[float] = DEFAULT_NOISE_GRID,
                seeds: Sequence[int] = DEFAULT_SEEDS,
                losses: Sequence[LossKind] = (LossKind.INFONCE, LossKind.BIXSE),
                jobs: int = 1) -> list[dict]:
    grid = [(LossKind(l), p, s) for l in losses for p in p_values for s in seeds]
    work = [(_noise_cell, (records, replace(base, loss=l, seed=s, hard_negatives=1), eval_set, p, s))
            for l, p, s in grid]
    scores = _run_all(work, jobs)
    return [{"loss": l.value, "p": p, "seed": s, "ndcg@10": v} for (l, p, s), v in zip(grid, scores)]


def cutoff_datasets(records, cutoffs: Sequence[float], mode: str, seed: int) -> list[list]:
    sets = [filter_by_cutoff(records, c, mode) for c in cutoffs]
    for c, s in zip(cutoffs, sets):
        if not s:
            raise EmptyResult(f"cutoff {c} leaves no training data")
    return subsample_to_match(sets, seed)


def _cutoff_cell(records, cfg, eval_set):
    return _fit_and_score(records, cfg, eval_set)[0]


def sweep_cutoff(records, eval_set: EvalSet, base: TrainConfig,
                 cutoffs: Sequence[float] = DEFAULT_CUTOFFS,
                 seeds: Sequence[int] = DEFAULT_SEEDS,
                 losses: Sequence[LossKind] = (LossKind.INFONCE, LossKind.BIXSE),
                 jobs: int = 1) -> list[dict]:
    """InfoNCE trains on binarised survivors, every other loss keeps graded labels."""
    grid, work = [], []
    for l in map(LossKind, losses):
        mode = "binarize" if l is LossKind.INFONCE else "keep_graded"
        per_seed = {s: cutoff_datasets(records, cutoffs, mode, s) for s in seeds}
        for j, c in enumerate(cutoffs):
            for s in seeds:
                subset = per_seed[s][j]
                grid.append((l, c, s, len(subset)))
                work.append((_cutoff_cell, (subset, replace(base, loss=l, seed=s), eval_set)))
    scores = _run_all(work, jobs)
    return [{"loss": l.value, "cutoff": c, "seed": s, "ndcg@10": v, "retained_count": n}
            for (l, c, s, n), v in zip(grid, scores)]


def _grid_cell(records, cfg, eval_set):
    try:
        return _fit_and_score(records, cfg, eval_set)[0], "ok"
    except (NeedsHardNegatives, NotEnoughNegatives) as e:
        return float("nan"), f"failed:{type(e).__name__}"


def sweep_batch_and_negatives(records, eval_set: EvalSet, base: TrainConfig,
                              grid: Sequence[tuple[int, int]] = DEFAULT_BUDGET_GRID,
                              seeds: Sequence[int] = DEFAULT_SEEDS,
                              losses: Sequence[LossKind] = tuple(LossKind),
                              jobs: int = 1) -> list[dict]:
    cells = [(LossKind(l), K, B, s) for l in losses for K, B in grid for s in seeds]
    work = [(_grid_cell, (records, replace(base, loss=l, hard_negatives=K, batch_size=B, seed=s), eval_set))
            for l, K, B, s in cells]
    out = _run_all(work, jobs)
    return [{"loss": l.value, "K": K, "B": B, "seed": s, "ndcg@10": v, "status": st}
            for (l, K, B, s), (v, st) in zip(cells, out)]


def _bias_cell(records, cfg, eval_set):
    return _fit_and_score(records, cfg, eval_set)


def sweep_bias_lr(records, eval_set: EvalSet, base: TrainConfig,
                  multipliers: Sequence[float] = DEFAULT_BIAS_MULTIPLIERS,
                  seeds: Sequence[int] = DEFAULT_SEEDS, jobs: int = 1) -> list[dict]:
    cells = [(m, s) for m in multipliers for s in seeds]
    work = [(_bias_cell, (records, replace(base, loss=LossKind.BIXSE, beta_lr_multiplier=m, seed=s), eval_set))
            for m, s in cells]
    out = _run_all(work, jobs)
    return [{"beta_lr_multiplier": m, "seed": s, "ndcg@10": v, "final_beta": b}
            for (m, s), (v, b) in zip(cells, out)]


# -- summaries ---------------------------------------------------------------------

def medians(rows: Iterable[dict], keys: Sequence[str], value: str = "ndcg@10") -> dict:
    """Median of ``value`` grouped by the tuple of ``keys`` (NaN rows ignored)."""
    groups: dict = {}
    for r in rows:
        v = r[value]
        if v != v:
            continue
        groups.setdefault(tuple(r[k] for k in keys), []).append(v)
    return {k: statistics.median(v) for k, v in groups.items()}


def best_setting(med: dict, loss: str):
    """Grid value with the highest median for ``loss``; ties go to the later grid point."""
    items = [(k[1:], v) for k, v in med.items() if k[0] == loss]
    best = items[0]
    for k, v in items[1:]:
        if v >= best[1]:
            best = (k, v)
    key, v = best
    return (key[0] if len(key) == 1 else key), v


def format_csv(rows: Sequence[dict], header: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(header), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def write_csv(rows: Sequence[dict], header: Sequence[str], path) -> None:
    atomic_write_text(path, format_csv(rows, header))
