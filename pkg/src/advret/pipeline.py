"""Black-box retrieve-then-rerank pipeline over a fixed corpus.

The dense retriever ranks the whole corpus exhaustively by dot product; the
reranker reorders the top-K candidates. Outside callers only see final
``RankedList`` values plus a query counter.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import Store, TextRecord
from .encoder import DualEncoder, apply_grads, embed_many, listwise_nll, load_table, save_table

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RankedList:
    query_id: str
    doc_ids: tuple[str, ...]
    scores: tuple[float, ...]
    K: int

    def __len__(self) -> int:
        return len(self.doc_ids)

    def position(self, doc_id: str) -> int | None:
        """1-based position of ``doc_id`` or ``None`` when absent."""
        try:
            return self.doc_ids.index(doc_id) + 1
        except ValueError:
            return None


class CorpusIndex:
    """Token-id view of the document collection shared by every scorer."""

    def __init__(self, store: Store):
        self.store = store
        self.vocab = store.vocab
        self.doc_ids = [d.id for d in store.docs]
        self.doc_tokens = [d.tokens for d in store.docs]
        self.token_ids = [store.vocab.encode(d.tokens) for d in store.docs]
        if any(len(x) == 0 for x in self.token_ids):
            raise ValueError("documents admitted to an index must be non-empty")
        # rank of each doc id in ascending string order: the global tie-breaker
        self.id_rank = np.empty(len(self.doc_ids), dtype=np.int64)
        self.id_rank[np.argsort(np.array(self.doc_ids), kind="stable")] = np.arange(len(self.doc_ids))
        self.pos = {d: i for i, d in enumerate(self.doc_ids)}

    def __len__(self) -> int:
        return len(self.doc_ids)

    def order(self, scores: np.ndarray) -> np.ndarray:
        """Corpus positions sorted by descending score, ties by ascending doc id."""
        return np.lexsort((self.id_rank, -scores))

    def rank_of(self, scores: np.ndarray, i: int) -> int:
        s = scores[i]
        better = np.count_nonzero(scores > s)
        tied = np.count_nonzero((scores == s) & (self.id_rank < self.id_rank[i]))
        return int(better + tied + 1)


def dot_scores(matrix: np.ndarray, q_vec: np.ndarray) -> np.ndarray:
    # row-wise reduction so one row scored alone matches the batched value bitwise
    return (matrix * q_vec).sum(axis=1)


class DenseRetriever:
    """Exhaustive dot-product retrieval with a cached document matrix."""

    def __init__(self, encoder: DualEncoder, index: CorpusIndex):
        self.encoder = encoder
        self.index = index
        self.refresh()

    def refresh(self) -> None:
        self.doc_matrix = embed_many(self.encoder, self.index.token_ids, "doc")

    def query_vec(self, query: TextRecord | Sequence[str]) -> np.ndarray:
        tokens = query.tokens if isinstance(query, TextRecord) else query
        return self.encoder.encode_tokens(tokens, "query")

    def scores(self, query) -> np.ndarray:
        return dot_scores(self.doc_matrix, self.query_vec(query))

    def retrieve_topk(self, query: TextRecord, K: int) -> RankedList:
        if K < 1:
            raise ValueError("K must be >= 1")
        K = min(K, len(self.index))
        s = self.scores(query)
        top = self.index.order(s)[:K]
        return RankedList(query.id, tuple(self.index.doc_ids[i] for i in top),
                          tuple(float(s[i]) for i in top), K)

    def full_ordering(self, query) -> np.ndarray:
        return self.index.order(self.scores(query))

    def doc_vec(self, tokens: Sequence[str]) -> np.ndarray:
        return embed_many(self.encoder, [self.encoder.ids(tokens)], "doc")[0]

    def recall_rank(self, query, doc: int | str, tokens: Sequence[str] | None = None,
                    q_scores: np.ndarray | None = None) -> int:
        """1-based exhaustive rank of ``doc`` when its content is ``tokens``."""
        i = self.index.pos[doc] if isinstance(doc, str) else int(doc)
        s = self.scores(query) if q_scores is None else q_scores.copy()
        if tokens is not None:
            s[i] = dot_scores(self.doc_vec(tokens)[None, :], self.query_vec(query))[0]
        return self.index.rank_of(s, i)


class Reranker:
    """Second-stage scorer: its own dual encoder plus a query-term overlap bonus.

    ``score = dot(q, d) + alpha * |q ∩ d| / |q|`` with set semantics on tokens.
    """

    def __init__(self, encoder: DualEncoder, index: CorpusIndex, alpha: float = 0.5):
        self.encoder = encoder
        self.index = index
        self.alpha = alpha
        self.doc_matrix = embed_many(encoder, index.token_ids, "doc")
        self.doc_sets = [frozenset(t) for t in index.doc_tokens]

    def score_docs(self, query: TextRecord, positions: Sequence[int],
                   overrides: dict[int, Sequence[str]] | None = None) -> np.ndarray:
        q = self.encoder.encode_tokens(query.tokens, "query")
        qset = set(query.tokens)
        out = np.empty(len(positions))
        for k, i in enumerate(positions):
            if overrides and i in overrides:
                toks = overrides[i]
                vec = embed_many(self.encoder, [self.encoder.ids(toks)], "doc")[0]
                dset = set(toks)
            else:
                vec = self.doc_matrix[i]
                dset = self.doc_sets[i]
            overlap = len(qset & dset) / len(qset) if qset else 0.0
            out[k] = float((vec * q).sum()) + self.alpha * overlap
        return out

    def rerank(self, query: TextRecord, candidates: RankedList,
               overrides: dict[int, Sequence[str]] | None = None) -> RankedList:
        pos = np.array([self.index.pos[d] for d in candidates.doc_ids], dtype=np.int64)
        s = self.score_docs(query, pos, overrides)
        order = np.lexsort((self.index.id_rank[pos], -s))
        return RankedList(query.id, tuple(candidates.doc_ids[k] for k in order),
                          tuple(float(s[k]) for k in order), candidates.K)


class BlackBox:
    """Retrieve-then-rerank pipeline that only reveals final ranked lists.

    The retriever and reranker are private; tests reach them through
    ``_retriever``/``_reranker`` as a white-box oracle.
    """

    def __init__(self, retriever: DenseRetriever, reranker: Reranker, K: int):
        if K < 1:
            raise ValueError("K must be >= 1")
        self._retriever = retriever
        self._reranker = reranker
        self.K = min(K, len(retriever.index))
        self._count = 0
        self._lock = threading.Lock()

    def __getstate__(self):
        state = self.__dict__.copy()
        del state["_lock"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()

    @property
    def query_count(self) -> int:
        return self._count

    @property
    def evaluation_retriever(self) -> DenseRetriever:
        """The first-stage retriever, for scoring finished attacks only."""
        return self._retriever

    def _tick(self) -> None:
        with self._lock:
            self._count += 1

    def query(self, query: TextRecord) -> RankedList:
        self._tick()
        return self._reranker.rerank(query, self._retriever.retrieve_topk(query, self.K))

    def query_with_substitution(self, query: TextRecord, doc: str,
                                tokens: Sequence[str]) -> RankedList:
        """Final ranked list when ``doc`` carries ``tokens``; costs one query."""
        self._tick()
        r = self._retriever
        i = r.index.pos[doc]
        s = r.scores(query)
        s[i] = dot_scores(r.doc_vec(tokens)[None, :], r.query_vec(query))[0]
        top = r.index.order(s)[:self.K]
        cands = RankedList(query.id, tuple(r.index.doc_ids[k] for k in top),
                           tuple(float(s[k]) for k in top), self.K)
        return self._reranker.rerank(query, cands, overrides={i: tokens})

    def recall_rank(self, query: TextRecord, doc: str, tokens: Sequence[str] | None = None) -> int:
        """Exhaustive first-stage rank of ``doc``; costs one query."""
        self._tick()
        return self._retriever.recall_rank(query, doc, tokens)


def retrieve_topk(retriever: DenseRetriever, query: TextRecord, K: int) -> RankedList:
    return retriever.retrieve_topk(query, K)


def rerank(reranker: Reranker, query: TextRecord, candidates: RankedList) -> RankedList:
    return reranker.rerank(query, candidates)


def blackbox_query(blackbox: BlackBox, query: TextRecord) -> RankedList:
    return blackbox.query(query)


def recall_rank(retriever: DenseRetriever, query: TextRecord, doc: int | str,
                tokens: Sequence[str] | None = None) -> int:
    return retriever.recall_rank(query, doc, tokens)


# --- training ----------------------------------------------------------------


@dataclass
class PipelineConfig:
    dim: int = 32
    K: int = 20
    epochs: int = 30
    learning_rate: float = 50.0
    batch_size: int = 16
    random_negatives: int = 8
    reranker_alpha: float = 0.5
    shared_tables: bool = True
    seed: int = 0


def train_dual_encoder(enc: DualEncoder, index: CorpusIndex, pairs: Sequence[tuple[np.ndarray, int]],
                       epochs: int, learning_rate: float, batch_size: int,
                       random_negatives: int, seed: int) -> list[float]:
    """Softmax NLL training with in-batch and uniformly sampled negatives.

    ``pairs`` holds ``(query token ids, relevant doc position)``. Returns the
    mean loss of every epoch.
    """
    rng = np.random.default_rng(seed)
    n_docs = len(index)
    trace = []
    for _ in range(epochs):
        order = rng.permutation(len(pairs))
        total = 0.0
        for start in range(0, len(order), batch_size):
            batch = [pairs[k] for k in order[start:start + batch_size]]
            gq = np.zeros_like(enc.query_table.matrix)
            gd = gq if enc.shared else np.zeros_like(enc.doc_table.matrix)
            batch_pos = [p for _, p in batch]
            for q_ids, pos in batch:
                negs = [p for p in batch_pos if p != pos]
                rand = rng.integers(0, n_docs, size=random_negatives)
                negs.extend(int(r) for r in rand if r != pos)
                cands = [index.token_ids[pos]] + [index.token_ids[p] for p in negs]
                loss, _, _ = listwise_nll(enc, q_ids, cands, 0, out=(gq, gd), weight=1.0 / len(batch))
                total += loss
            apply_grads(enc, gq, gd, learning_rate)
        trace.append(total / len(pairs))
    return trace


def train_pipeline(store: Store, train_queries: Iterable[TextRecord],
                   config: PipelineConfig) -> BlackBox:
    """Train the target retriever and the reranker on relevance pairs."""
    index = CorpusIndex(store)
    rel = {}
    for qid, did in store.qrels:
        rel.setdefault(qid, did)
    pairs = [(store.vocab.encode(q.tokens), index.pos[rel[q.id]])
             for q in train_queries if q.id in rel]
    if not pairs:
        raise ValueError("no relevance pairs for the training queries")
    target = DualEncoder.create(store.vocab, config.dim, config.seed, config.shared_tables)
    trace = train_dual_encoder(target, index, pairs, config.epochs, config.learning_rate,
                               config.batch_size, config.random_negatives, config.seed)
    logger.info("target retriever loss %.4f -> %.4f", trace[0], trace[-1])
    rr_seed = config.seed + 1000
    rr_enc = DualEncoder.create(store.vocab, config.dim, rr_seed, config.shared_tables)
    trace = train_dual_encoder(rr_enc, index, pairs, config.epochs, config.learning_rate,
                               config.batch_size, config.random_negatives, rr_seed)
    logger.info("reranker loss %.4f -> %.4f", trace[0], trace[-1])
    return BlackBox(DenseRetriever(target, index), Reranker(rr_enc, index, config.reranker_alpha), config.K)


def save_ranked_lists(lists: Iterable[RankedList], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rl in lists:
            for rank, (d, s) in enumerate(zip(rl.doc_ids, rl.scores), 1):
                fh.write(f"{rl.query_id}\t{d}\t{rank}\t{s!r}\n")


def load_ranked_lists(path: str | Path, K: int) -> list[RankedList]:
    grouped: dict[str, list[tuple[int, str, float]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}: line {lineno}: expected 4 tab-separated fields")
            grouped.setdefault(parts[0], []).append((int(parts[2]), parts[1], float(parts[3])))
    out = []
    for qid, rows in grouped.items():
        rows.sort()
        out.append(RankedList(qid, tuple(r[1] for r in rows), tuple(r[2] for r in rows), K))
    return out


def _save_encoder(enc: DualEncoder, path: Path, stem: str) -> None:
    save_table(enc.query_table, path / f"{stem}_query.bin")
    if not enc.shared:
        save_table(enc.doc_table, path / f"{stem}_doc.bin")


def _load_encoder(store: Store, path: Path, stem: str) -> DualEncoder:
    q = load_table(path / f"{stem}_query.bin")
    d = path / f"{stem}_doc.bin"
    return DualEncoder(store.vocab, q, load_table(d) if d.exists() else None)


def save_blackbox(bb: BlackBox, path: str | Path) -> None:
    """Write both encoders' tables and a ``key=value`` settings file into ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    _save_encoder(bb._retriever.encoder, path, "retriever")
    _save_encoder(bb._reranker.encoder, path, "reranker")
    (path / "pipeline.txt").write_text(f"K={bb.K}\nreranker_alpha={bb._reranker.alpha!r}\n", encoding="utf-8")


def load_blackbox(store: Store, path: str | Path) -> BlackBox:
    path = Path(path)
    settings = dict(line.split("=", 1) for line in
                    (path / "pipeline.txt").read_text(encoding="utf-8").split())
    index = CorpusIndex(store)
    return BlackBox(DenseRetriever(_load_encoder(store, path, "retriever"), index),
                    Reranker(_load_encoder(store, path, "reranker"), index, float(settings["reranker_alpha"])),
                    int(settings["K"]))


def save_encoder(enc: DualEncoder, path: str | Path, stem: str = "surrogate") -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    _save_encoder(enc, path, stem)


def load_encoder(store: Store, path: str | Path, stem: str = "surrogate") -> DualEncoder:
    return _load_encoder(store, Path(path), stem)
