"""Command-line entry point: ``bixse-lab {synth,train,eval,sweep}``.

Every flag may also come from a flat ``key=value`` file passed with
``--config``; flags given on the command line win.  Exit codes: 0 success,
1 internal failure, 2 user or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

from . import __version__
from .data import dump_items, dump_jsonl, load_items, load_jsonl
from .errors import ConfigInvalid, LabError, UserError
from .evaluation import evaluate_run, retrieve_topk
from .io import atomic_write_text
from .losses import LossKind
from .synth import SynthConfig, synth_generate
from .trainer import (EvalSet, TrainConfig, grad_check, load_checkpoint, save_checkpoint,
                      train)
from .trec import read_qrels, write_qrels, write_run

log = logging.getLogger("bixse_lab")

SWEEP_KINDS = ("noise", "cutoff", "batchgrid", "biaslr", "gradcheck")


# -- config handling ----------------------------------------------------------------

def read_config_file(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigInvalid(f"{path}:{n}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip().replace("-", "_")] = v.strip()
    return out


def _floats(text) -> tuple[float, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(float(x) for x in text)
    try:
        return tuple(float(x) for x in str(text).replace(",", " ").split())
    except ValueError:
        raise ConfigInvalid(f"expected a list of numbers, got {text!r}") from None


def _pairs(text) -> tuple[tuple[int, int], ...]:
    out = []
    for chunk in str(text).replace(";", " ").split():
        try:
            k, b = chunk.split("/") if "/" in chunk else chunk.split(":")
            out.append((int(k), int(b)))
        except ValueError:
            raise ConfigInvalid(f"grid entries look like K/B, got {chunk!r}") from None
    return tuple(out)


def merged(args: argparse.Namespace, defaults: dict) -> dict:
    """Command-line flags > config file > defaults."""
    values = dict(defaults)
    if getattr(args, "config", None):
        cfg = read_config_file(args.config)
        unknown = set(cfg) - set(defaults)
        if unknown:
            raise ConfigInvalid(f"unknown config keys: {sorted(unknown)}")
        values.update(cfg)
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
    return values


def _typed(value, kind):
    if value is None or value == "None":
        return None
    if kind is bool:
        return value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes", "on")
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigInvalid(f"cannot read {value!r} as {kind.__name__}") from None


SYNTH_KEYS = {
    "n_topics": int, "vocab_size": int, "doc_len": int, "query_len": int,
    "corpus_size": int, "n_queries": int, "n_records": int, "n_hard_negatives": int,
    "hard_negative_max_level": float, "binary": bool, "n_tasks": int, "synth_seed": int,
}

TRAIN_KEYS = {
    "loss": str, "epochs": int, "batch": int, "hard_negs": int, "lr": float,
    "beta_lr_mult": float, "alpha": float, "seed": int, "warmup_fraction": float,
    "dim": int, "buckets": int, "instruction": str,
}


def synth_config(values: dict) -> SynthConfig:
    kw = {}
    for k, kind in SYNTH_KEYS.items():
        v = _typed(values.get(k), kind)
        if v is not None:
            kw["seed" if k == "synth_seed" else k] = v
    if values.get("levels") is not None:
        kw["levels"] = _floats(values["levels"])
    return SynthConfig(**kw)


def train_config(values: dict) -> TrainConfig:
    v = {k: _typed(values.get(k), kind) for k, kind in TRAIN_KEYS.items()}
    kw = {"loss": LossKind(v["loss"] or "bixse")}
    mapping = {"epochs": "epochs", "batch": "batch_size", "hard_negs": "hard_negatives",
               "lr": "base_lr", "beta_lr_mult": "beta_lr_multiplier", "alpha": "alpha",
               "seed": "seed", "warmup_fraction": "warmup_fraction", "dim": "dim",
               "buckets": "n_buckets", "instruction": "instruction"}
    for src, dst in mapping.items():
        if v[src] is not None:
            kw[dst] = v[src]
    return TrainConfig(**kw)


def _defaults(keys) -> dict:
    return {k: None for k in keys}


# -- manifest -------------------------------------------------------------------------

def write_manifest(out: Path, command: str, config: dict, artifacts, seed, started: float,
                   name: str = "manifest.json") -> Path:
    manifest = {
        "tool": "bixse-lab",
        "version": __version__,
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "seed": seed,
        "artifacts": sorted(str(Path(a).name) for a in artifacts),
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    path = out / name
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


# -- commands ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    started = time.time()
    values = merged(args, _defaults(list(SYNTH_KEYS) + ["levels", "out"]))
    cfg = synth_config(values)
    data = synth_generate(cfg)
    out = Path(values["out"] or "synth")
    paths = [out / "records.jsonl", out / "corpus.jsonl", out / "queries.jsonl", out / "qrels.txt"]
    dump_jsonl(data.records, paths[0])
    dump_items(data.corpus, paths[1])
    dump_items(data.queries, paths[2])
    write_qrels(data.qrels, paths[3])
    write_manifest(out, "synth", cfg.to_dict(), paths, cfg.seed, started)
    print(f"wrote {len(data.records)} records, {len(data.corpus)} documents, "
          f"{len(data.queries)} queries to {out}")
    return 0


def _validation(values) -> EvalSet | None:
    trio = [values.get("val_queries"), values.get("val_corpus"), values.get("val_qrels")]
    if not any(trio):
        return None
    if not all(trio):
        raise ConfigInvalid("--val-queries, --val-corpus and --val-qrels go together")
    return EvalSet(load_items(trio[0]), load_items(trio[1]), read_qrels(trio[2]))


def cmd_train(args) -> int:
    started = time.time()
    values = merged(args, _defaults(list(TRAIN_KEYS) + ["data", "out", "val_queries", "val_corpus", "val_qrels"]))
    if not values["data"]:
        raise ConfigInvalid("--data is required")
    cfg = train_config(values)
    records = load_jsonl(values["data"])
    params, history = train(records, cfg, validation=_validation(values))
    out = Path(values["out"] or "run")
    ckpt = out / "checkpoint.json"
    save_checkpoint(params, ckpt)
    from .sweeps import format_csv
    keys = list(history[0].keys())
    atomic_write_text(out / "train_log.csv", format_csv(history, keys))
    from .plotting import plot_training_log
    plot_training_log(history, out / "train_log.png", title=cfg.loss.value)
    config = cfg.to_dict()
    config["effective_base_lr"] = cfg.lr
    config["data"] = str(values["data"])
    write_manifest(out, "train", config, [ckpt, out / "train_log.csv", out / "train_log.png"],
                   cfg.seed, started)
    for h in history:
        print(f"epoch {h['epoch']}: loss {h['loss']:.6f} beta {h['beta']:+.4f}")
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_eval(args) -> int:
    started = time.time()
    values = merged(args, _defaults(["checkpoint", "queries", "corpus", "qrels", "k", "out"]))
    for key in ("checkpoint", "queries", "corpus", "qrels"):
        if not values[key]:
            raise ConfigInvalid(f"--{key} is required")
    k = _typed(values["k"], int) or 10
    params = load_checkpoint(values["checkpoint"])
    queries, corpus = load_items(values["queries"]), load_items(values["corpus"])
    qrels = read_qrels(values["qrels"])
    row = evaluate_run(params, queries, corpus, qrels, k)
    out = Path(values["out"] or Path(values["checkpoint"]).parent)
    run_path = out / "run.trec"
    write_run(retrieve_topk(queries, corpus, params, k), run_path)
    metrics = out / "metrics.csv"
    # a content hash keeps the row independent of where the checkpoint lives
    digest = hashlib.sha256(Path(values["checkpoint"]).read_bytes()).hexdigest()[:16]
    row = {"checkpoint_sha256": digest, "k": k, **row}
    header = list(row)
    from .sweeps import format_csv
    body = format_csv([row], header)
    if metrics.exists():
        prev = metrics.read_text(encoding="utf-8")
        body = prev + body.split("\n", 1)[1]
    atomic_write_text(metrics, body)
    write_manifest(out, "eval", {"k": k, **{x: str(values[x]) for x in ("checkpoint", "queries", "corpus", "qrels")}},
                   [run_path, metrics], None, started,
                   name="eval_manifest.json")
    print(f"ndcg@{k} {row[f'ndcg@{k}']:.6f}  queries {row['queries']}  coverage {row['coverage']:.3f}")
    return 0


def cmd_sweep(args) -> int:
    from . import plotting, sweeps
    started = time.time()
    keys = list(SYNTH_KEYS) + list(TRAIN_KEYS) + ["levels", "kind", "out", "n_seeds", "jobs", "grid",
                                                  "p_values", "cutoffs", "multipliers", "losses"]
    values = merged(args, _defaults(keys))
    kind = values["kind"]
    if kind not in SWEEP_KINDS:
        raise ConfigInvalid(f"--kind must be one of {SWEEP_KINDS}")
    out = Path(values["out"] or f"sweep-{kind}")
    n_seeds = _typed(values["n_seeds"], int) or 5
    seeds = tuple(range(n_seeds))
    jobs = _typed(values["jobs"], int) or 1

    if kind == "gradcheck":
        report = grad_check(seed=_typed(values["seed"], int) or 0, K=2)
        rows = [{"loss": k, "table": v["table"], "alpha": v["alpha"], "beta": v["beta"], "dbeta": v["dbeta"]}
                for k, v in report.items()]
        csv_path = out / "gradcheck.csv"
        sweeps.write_csv(rows, ["loss", "table", "alpha", "beta", "dbeta"], csv_path)
        print(f"{'loss':<14}{'table':>12}{'alpha':>12}{'beta':>12}")
        for r in rows:
            print(f"{r['loss']:<14}{r['table']:>12.2e}{r['alpha']:>12.2e}{r['beta']:>12.2e}")
        write_manifest(out, "sweep gradcheck", {"seed": values["seed"]}, [csv_path], values["seed"], started)
        return 0

    if kind == "noise":
        values.setdefault("binary", None)
        if values["binary"] is None:
            values["binary"] = True
        if values["n_hard_negatives"] is None:
            values["n_hard_negatives"] = 1
    if kind == "batchgrid" and values["n_hard_negatives"] is None:
        values["n_hard_negatives"] = 15
    scfg = synth_config(values)
    data = synth_generate(scfg)
    base = train_config(values)
    ev = EvalSet(data.queries, data.corpus, data.qrels)
    losses = tuple(LossKind(x) for x in str(values["losses"]).replace(",", " ").split()) if values["losses"] else None

    if kind == "noise":
        p_values = _floats(values["p_values"]) if values["p_values"] else sweeps.DEFAULT_NOISE_GRID
        rows = sweeps.sweep_noise(data.records, ev, base, p_values, seeds,
                                  losses or (LossKind.INFONCE, LossKind.BIXSE), jobs=jobs)
        x, xlabel = "p", "label flip probability"
    elif kind == "cutoff":
        cutoffs = _floats(values["cutoffs"]) if values["cutoffs"] else sweeps.DEFAULT_CUTOFFS
        rows = sweeps.sweep_cutoff(data.records, ev, base, cutoffs, seeds,
                                   losses or (LossKind.INFONCE, LossKind.BIXSE), jobs=jobs)
        x, xlabel = "cutoff", "minimum relevance retained"
    elif kind == "batchgrid":
        grid = _pairs(values["grid"]) if values["grid"] else sweeps.DEFAULT_BUDGET_GRID
        rows = sweeps.sweep_batch_and_negatives(data.records, ev, base, grid, seeds,
                                                losses or tuple(LossKind), jobs=jobs)
        for r in rows:
            r["K/B"] = f"{r['K']}/{r['B']}"
        x, xlabel = "K/B", "hard negatives / batch size"
    else:
        mults = _floats(values["multipliers"]) if values["multipliers"] else sweeps.DEFAULT_BIAS_MULTIPLIERS
        rows = sweeps.sweep_bias_lr(data.records, ev, base, mults, seeds, jobs=jobs)
        x, xlabel = "beta_lr_multiplier", "logit-bias learning-rate multiplier"

    csv_path = out / f"{kind}.csv"
    sweeps.write_csv(rows, sweeps.HEADERS[kind], csv_path)
    fig_path = out / f"{kind}.png"
    plotting.plot_sweep(rows, x, fig_path, group=None if kind == "biaslr" else "loss", xlabel=xlabel,
                        categorical=kind in ("batchgrid", "biaslr"))
    config = {"synth": scfg.to_dict(), "train": base.to_dict(), "seeds": list(seeds), "kind": kind}
    write_manifest(out, f"sweep {kind}", config, [csv_path, fig_path], list(seeds), started)

    group = ["beta_lr_multiplier"] if kind == "biaslr" else ["loss", x]
    for key, med in sweeps.medians(rows, group).items():
        print(" ".join(str(k) for k in key), f"median ndcg@10 {med:.4f}")
    print(f"wrote {csv_path}")
    return 0


# -- parser -----------------------------------------------------------------------------

def _add_synth_flags(p):
    g = p.add_argument_group("synthetic data")
    g.add_argument("--n-topics", type=int)
    g.add_argument("--vocab-size", type=int)
    g.add_argument("--doc-len", type=int)
    g.add_argument("--query-len", type=int)
    g.add_argument("--corpus-size", type=int)
    g.add_argument("--n-queries", type=int)
    g.add_argument("--n-records", type=int)
    g.add_argument("--n-hard-negatives", type=int)
    g.add_argument("--hard-negative-max-level", type=float)
    g.add_argument("--levels", help="relevance levels, e.g. '0,0.25,0.5,0.75,1'")
    g.add_argument("--binary", action="store_true", default=None)
    g.add_argument("--n-tasks", type=int)
    g.add_argument("--synth-seed", type=int, help="data seed (default 7)")


def _add_train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--loss", choices=[k.value for k in LossKind])
    g.add_argument("--epochs", type=int, help="default 4")
    g.add_argument("--batch", type=int, help="default 32")
    g.add_argument("--hard-negs", type=int, help="default 0")
    g.add_argument("--lr", type=float, help="base lr at batch 16 (default: per-loss table)")
    g.add_argument("--beta-lr-mult", type=float, help="default 100")
    g.add_argument("--alpha", type=float, help="logit scale, default 20")
    g.add_argument("--seed", type=int, help="default 0")
    g.add_argument("--warmup-fraction", type=float)
    g.add_argument("--dim", type=int)
    g.add_argument("--buckets", type=int)
    g.add_argument("--instruction")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bixse-lab", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic graded dataset")
    s.add_argument("--config")
    s.add_argument("--out")
    _add_synth_flags(s)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train the toy encoder on a JSONL dataset")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--val-queries")
    t.add_argument("--val-corpus")
    t.add_argument("--val-qrels")
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="retrieve and score a checkpoint with nDCG@k")
    e.add_argument("--config")
    e.add_argument("--checkpoint")
    e.add_argument("--queries")
    e.add_argument("--corpus")
    e.add_argument("--qrels")
    e.add_argument("--k", type=int, help="default 10")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    w = sub.add_parser("sweep", help="run one of the controlled experiment sweeps")
    w.add_argument("--config")
    w.add_argument("--kind", choices=SWEEP_KINDS)
    w.add_argument("--out")
    w.add_argument("--n-seeds", type=int, help="default 5")
    w.add_argument("--jobs", type=int, help="parallel worker processes, default 1")
    w.add_argument("--p-values")
    w.add_argument("--cutoffs")
    w.add_argument("--grid", help="K/B pairs, e.g. '15/16 7/32 3/64 1/128 0/256'")
    w.add_argument("--multipliers")
    w.add_argument("--losses", help="comma-separated loss names")
    _add_synth_flags(w)
    _add_train_flags(w)
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UserError, FileNotFoundError, IsADirectoryError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except LabError as e:
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        log.debug("unhandled", exc_info=True)
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
