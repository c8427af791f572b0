"""Surrogate retriever trained to imitate the black box from its ranked lists alone."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import TextRecord
from .encoder import DualEncoder, apply_grads, listwise_nll
from .pipeline import BlackBox, CorpusIndex, DenseRetriever

logger = logging.getLogger(__name__)


@dataclass
class SurrogateConfig:
    ell: int = 1
    epochs: int = 30
    learning_rate: float = 50.0
    batch_size: int = 16
    random_negatives: int = 8
    dim: int = 32
    shared_tables: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.ell < 1:
            raise ValueError("ell must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class ImitationEntry:
    query: TextRecord
    ranked: tuple[str, ...]
    positives: tuple[str, ...]
    hard_negatives: tuple[str, ...]


@dataclass
class ImitationDataset:
    entries: list[ImitationEntry]
    ell: int
    _pool_cache: dict[int, list[str]] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.entries)

    def random_pool(self, k: int) -> list[str]:
        """Ranked documents of every other collection query, first occurrence order."""
        if k not in self._pool_cache:
            seen: dict[str, None] = {}
            for j, e in enumerate(self.entries):
                if j != k:
                    seen.update(dict.fromkeys(e.ranked))
            self._pool_cache[k] = list(seen)
        return self._pool_cache[k]


def build_imitation_dataset(queries: Sequence[TextRecord], blackbox: BlackBox,
                            ell: int = 1) -> ImitationDataset:
    """Query the black box once per collection query and split each list at ``ell``."""
    if not queries:
        raise ValueError("query collection is empty")
    if ell < 1:
        raise ValueError("ell must be >= 1")
    entries = []
    for q in queries:
        rl = blackbox.query(q)
        if len(rl) < ell + 1:
            logger.warning("query %s returned %d docs (< ell+1); skipped", q.id, len(rl))
            continue
        entries.append(ImitationEntry(q, rl.doc_ids, rl.doc_ids[:ell], rl.doc_ids[ell:]))
    return ImitationDataset(entries, ell)


def imitation_loss(enc: DualEncoder, query_ids: np.ndarray, pos_ids: np.ndarray,
                   neg_ids: Sequence[np.ndarray], out=None, weight: float = 1.0):
    """Per-query NLL of the positive against hard plus random negatives.

    Scores enter a softmax as raw dot products.
    """
    return listwise_nll(enc, query_ids, [pos_ids, *neg_ids], 0, with_grad=out is not None,
                        out=out, weight=weight)


def train_surrogate(dataset: ImitationDataset, index: CorpusIndex, config: SurrogateConfig,
                    encoder: DualEncoder | None = None) -> tuple[DualEncoder, list[float]]:
    """Fit a freshly initialised dual encoder; returns it with the per-epoch mean loss."""
    config.validate()
    if not dataset.entries:
        raise ValueError("imitation dataset is empty")
    enc = encoder or DualEncoder.create(index.vocab, config.dim, config.seed, config.shared_tables)
    rng = np.random.default_rng(config.seed)
    vocab = index.vocab
    prepared = []
    for k, e in enumerate(dataset.entries):
        own = set(e.ranked)
        pool = [index.pos[d] for d in dataset.random_pool(k) if d not in own]
        prepared.append((vocab.encode(e.query.tokens),
                         [index.token_ids[index.pos[d]] for d in e.positives],
                         [index.token_ids[index.pos[d]] for d in e.hard_negatives],
                         np.array(pool, dtype=np.int64)))
    trace = []
    n = len(prepared)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            gq = np.zeros_like(enc.query_table.matrix)
            gd = gq if enc.shared else np.zeros_like(enc.doc_table.matrix)
            for k in batch:
                q_ids, pos_list, hard, pool = prepared[k]
                m = min(config.random_negatives, len(pool))
                rand = [index.token_ids[i] for i in rng.choice(pool, size=m, replace=False)] if m else []
                w = 1.0 / (len(batch) * len(pos_list))
                for pos_ids in pos_list:
                    loss, _, _ = imitation_loss(enc, q_ids, pos_ids, hard + rand, out=(gq, gd), weight=w)
                    total += loss / len(pos_list)
            apply_grads(enc, gq, gd, config.learning_rate)
        trace.append(total / n)
        if not np.isfinite(trace[-1]):
            raise FloatingPointError("diverged")
    logger.info("surrogate loss %.4f -> %.4f", trace[0], trace[-1])
    return enc, trace


def agreement(surrogate: DualEncoder, target: DualEncoder, index: CorpusIndex,
              queries: Sequence[TextRecord], k: int) -> float:
    """Mean Jaccard overlap of the two encoders' top-k sets."""
    if not queries:
        return 0.0
    a = DenseRetriever(surrogate, index)
    b = DenseRetriever(target, index)
    total = 0.0
    for q in queries:
        sa = set(a.retrieve_topk(q, k).doc_ids)
        sb = set(b.retrieve_topk(q, k).doc_ids)
        total += len(sa & sb) / len(sa | sb)
    return total / len(queries)


def save_dataset(dataset: ImitationDataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in dataset.entries:
            for d in e.positives:
                fh.write(f"{e.query.id}\t{d}\tpos\n")
            for d in e.hard_negatives:
                fh.write(f"{e.query.id}\t{d}\thneg\n")


def load_dataset(path: str | Path, queries: Sequence[TextRecord]) -> ImitationDataset:
    by_id = {q.id: q for q in queries}
    rows: dict[str, tuple[list[str], list[str]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3 or parts[2] not in ("pos", "hneg"):
                raise ValueError(f"{path}: line {lineno}: expected 'query_id<TAB>doc_id<TAB>pos|hneg'")
            pos, neg = rows.setdefault(parts[0], ([], []))
            (pos if parts[2] == "pos" else neg).append(parts[1])
    entries = []
    ell = 1
    for qid, (pos, neg) in rows.items():
        ell = len(pos)
        entries.append(ImitationEntry(by_id[qid], tuple(pos + neg), tuple(pos), tuple(neg)))
    return ImitationDataset(entries, ell)
