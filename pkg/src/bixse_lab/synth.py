"""Synthetic topic corpus with graded relevance.

The vocabulary is split into ``n_topics`` equal blocks.  A document has a
dominant topic holding weight ``w`` of its token mass, the rest spread evenly
over the other topics; each token picks a topic from that mixture and then a
word uniformly inside the topic's block.  A query draws all of its tokens
from one block.  The relevance of a document to a query is the document's
mass on the query's topic, snapped to the nearest configured level.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .data import GradedRecord, HardNegative
from .encoder import TextItem
from .errors import ConfigInvalid
from .trec import Qrels

LETTERS = np.array(list("abcdefghijklmnopqrstuvwxyz"))


@dataclass
class SynthConfig:
    n_topics: int = 8
    vocab_size: int = 512
    doc_len: int = 24
    query_len: int = 4
    corpus_size: int = 1000
    n_queries: int = 100
    n_records: int = 2000
    n_hard_negatives: int = 1
    levels: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    level_weights: Optional[tuple[float, ...]] = None
    hard_negative_max_level: float = 0.25
    binary: bool = False
    n_tasks: int = 1
    seed: int = 7

    def __post_init__(self):
        self.levels = tuple(float(x) for x in self.levels)
        if self.level_weights is not None:
            self.level_weights = tuple(float(x) for x in self.level_weights)
        self.validate()

    def validate(self) -> None:
        if self.n_topics < 2:
            raise ConfigInvalid("need at least two topics")
        if self.vocab_size % self.n_topics:
            raise ConfigInvalid(f"vocab_size {self.vocab_size} not divisible by n_topics {self.n_topics}")
        if min(self.doc_len, self.query_len, self.corpus_size, self.n_queries, self.n_records) < 1:
            raise ConfigInvalid("lengths and counts must be >= 1")
        lv = self.levels
        if len(lv) < 2 or list(lv) != sorted(set(lv)) or lv[0] != 0.0 or lv[-1] != 1.0:
            raise ConfigInvalid(f"levels must be sorted, distinct, within [0, 1] and contain 0 and 1: {lv}")
        if self.level_weights is not None:
            w = np.asarray(self.level_weights)
            if w.shape != (len(lv),) or np.any(w < 0) or w.sum() <= 0:
                raise ConfigInvalid("level_weights must match levels and be nonnegative")
        if self.n_hard_negatives < 0 or self.n_tasks < 1:
            raise ConfigInvalid("n_hard_negatives must be >= 0 and n_tasks >= 1")

    def level_probs(self) -> np.ndarray:
        w = np.ones(len(self.levels)) if self.level_weights is None else np.asarray(self.level_weights)
        return w / w.sum()

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthData:
    corpus: list[TextItem]
    queries: list[TextItem]
    records: list[GradedRecord]
    qrels: Qrels
    config: SynthConfig
    # topic mass of each corpus document, for analysis
    corpus_mix: np.ndarray = field(repr=False, default=None)
    query_topics: np.ndarray = field(repr=False, default=None)


def snap(x: float, levels) -> float:
    lv = np.asarray(levels)
    return float(lv[np.argmin(np.abs(lv - x))])


class _Generator:
    def __init__(self, cfg: SynthConfig):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.block = cfg.vocab_size // cfg.n_topics
        self.words = self._vocab()
        self.nonzero_levels = [l for l in cfg.levels if l > 0]

    def _vocab(self) -> np.ndarray:
        seen, words = set(), []
        while len(words) < self.cfg.vocab_size:
            n = int(self.rng.integers(5, 9))
            w = "".join(self.rng.choice(LETTERS, n))
            if w not in seen:
                seen.add(w)
                words.append(w)
        return np.array(words)

    def mixture(self, dominant: int, weight: float) -> np.ndarray:
        T = self.cfg.n_topics
        mix = np.full(T, (1.0 - weight) / (T - 1))
        mix[dominant] = weight
        return mix

    def text(self, mix: np.ndarray, length: int) -> str:
        topics = self.rng.choice(self.cfg.n_topics, size=length, p=mix)
        idx = topics * self.block + self.rng.integers(0, self.block, size=length)
        return " ".join(self.words[idx])

    def query_text(self, topic: int) -> str:
        return self.text(np.eye(self.cfg.n_topics)[topic], self.cfg.query_len)

    def doc_for_level(self, topic: int, level: float) -> tuple[str, np.ndarray]:
        """A document whose snapped relevance to ``topic`` equals ``level``."""
        if level > 0:
            mix = self.mixture(topic, level)
        else:
            others = [t for t in range(self.cfg.n_topics) if t != topic]
            dom = int(self.rng.choice(others))
            mix = self.mixture(dom, float(self.rng.choice(self.nonzero_levels)))
        return self.text(mix, self.cfg.doc_len), mix


def synth_generate(cfg: SynthConfig) -> SynthData:
    cfg.validate()
    g = _Generator(cfg)
    T, levels = cfg.n_topics, cfg.levels

    corpus, mixes = [], []
    for j in range(cfg.corpus_size):
        dom = int(g.rng.integers(T))
        mix = g.mixture(dom, float(g.rng.choice(g.nonzero_levels)))
        corpus.append(TextItem(f"d{j:05d}", g.text(mix, cfg.doc_len), task="synth"))
        mixes.append(mix)
    mixes = np.array(mixes)

    q_topics = g.rng.integers(T, size=cfg.n_queries)
    queries = [TextItem(f"q{i:05d}", g.query_text(int(t)), task="synth")
               for i, t in enumerate(q_topics)]

    qrels = Qrels()
    lv = np.asarray(levels)
    for q, t in zip(queries, q_topics):
        grades = np.argmin(np.abs(mixes[:, t][:, None] - lv[None, :]), axis=1)
        for doc, grade in zip(corpus, grades):
            qrels.add(q.id, doc.id, int(grade))

    records = []
    probs = cfg.level_probs()
    neg_levels = [l for l in levels if l <= cfg.hard_negative_max_level] or [0.0]
    for i in range(cfg.n_records):
        t = int(g.rng.integers(T))
        task = f"task{i % cfg.n_tasks}" if cfg.n_tasks > 1 else "synth"
        if cfg.binary:
            level, label = float(levels[-1]), 1.0
        else:
            level = float(levels[g.rng.choice(len(levels), p=probs)])
            label = level
        doc, _ = g.doc_for_level(t, level)
        negs = []
        for k in range(cfg.n_hard_negatives):
            nl = 0.0 if cfg.binary else float(g.rng.choice(neg_levels))
            ndoc, _ = g.doc_for_level(t, nl)
            negs.append(HardNegative(f"r{i:05d}-n{k:02d}", ndoc, nl))
        records.append(GradedRecord(
            query_id=f"r{i:05d}", doc_id=f"r{i:05d}-p", query=g.query_text(t), doc=doc,
            task=task, relevance=label, hard_negatives=tuple(negs), origin="synthetic"))

    return SynthData(corpus, queries, records, qrels, cfg, mixes, q_topics)
