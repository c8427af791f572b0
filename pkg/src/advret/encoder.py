"""Mean-pooled bag-of-embeddings dual encoder with exact backward passes."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import TextRecord, Vocabulary

_MAGIC = b"ADVE"
_VERSION = 1
_HEADER = struct.Struct("<4sIQIq")


class DivergedError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


@dataclass
class EmbeddingTable:
    matrix: np.ndarray
    init_seed: int = 0

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[1] < 2:
            raise ValueError("embedding table must be 2-D with dim >= 2")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("embedding table has non-finite entries")

    @classmethod
    def random(cls, num_rows: int, dim: int, seed: int, oov_index: int | None = None) -> "EmbeddingTable":
        rng = np.random.default_rng(seed)
        bound = 0.5 / dim
        m = rng.uniform(-bound, bound, size=(num_rows, dim))
        if oov_index is not None:
            m[oov_index] = 0.0
        return cls(m, seed)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def num_rows(self) -> int:
        return self.matrix.shape[0]

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.matrix.copy(), self.init_seed)


def save_table(table: EmbeddingTable, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, table.num_rows, table.dim, table.init_seed))
        fh.write(table.matrix.astype("<f8").tobytes(order="C"))


def load_table(path: str | Path) -> EmbeddingTable:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, rows, dim, seed = _HEADER.unpack_from(data)
    if magic != _MAGIC or version != _VERSION:
        raise ValueError(f"{path}: not an embedding table (magic={magic!r}, version={version})")
    body = data[_HEADER.size:]
    if len(body) != rows * dim * 8:
        raise ValueError(f"{path}: expected {rows * dim * 8} payload bytes, found {len(body)}")
    m = np.frombuffer(body, dtype="<f8").reshape(rows, dim).astype(np.float64)
    return EmbeddingTable(m, seed)


class DualEncoder:
    """Query and document towers that mean-pool rows of an embedding table.

    With ``shared=True`` (the default) both towers read the same table object.
    """

    def __init__(self, vocab: Vocabulary, query_table: EmbeddingTable,
                 doc_table: EmbeddingTable | None = None):
        self.vocab = vocab
        self.query_table = query_table
        self.doc_table = query_table if doc_table is None else doc_table
        for t in (self.query_table, self.doc_table):
            if t.num_rows != vocab.num_rows:
                raise ValueError(f"table has {t.num_rows} rows, vocabulary needs {vocab.num_rows}")
        if self.query_table.dim != self.doc_table.dim:
            raise ValueError("query and document tables differ in dim")

    @classmethod
    def create(cls, vocab: Vocabulary, dim: int, seed: int, shared: bool = True) -> "DualEncoder":
        q = EmbeddingTable.random(vocab.num_rows, dim, seed, vocab.oov_index)
        d = None if shared else EmbeddingTable.random(vocab.num_rows, dim, seed + 1, vocab.oov_index)
        return cls(vocab, q, d)

    @property
    def shared(self) -> bool:
        return self.query_table is self.doc_table

    @property
    def dim(self) -> int:
        return self.query_table.dim

    def table(self, side: str) -> EmbeddingTable:
        if side == "query":
            return self.query_table
        if side == "doc":
            return self.doc_table
        raise ValueError(f"unknown side {side!r}")

    def ids(self, tokens: Sequence[str]) -> np.ndarray:
        return self.vocab.encode(tokens)

    def encode_ids(self, ids: np.ndarray, side: str = "doc") -> np.ndarray:
        if len(ids) == 0:
            raise ValueError("cannot encode empty text")
        return pool_rows(self.table(side).matrix, [ids])[0]

    def encode_tokens(self, tokens: Sequence[str], side: str = "doc") -> np.ndarray:
        return self.encode_ids(self.ids(tokens), side)

    def copy(self) -> "DualEncoder":
        q = self.query_table.copy()
        d = None if self.shared else self.doc_table.copy()
        return DualEncoder(self.vocab, q, d)


def encode(record: TextRecord, enc: DualEncoder, side: str = "doc") -> np.ndarray:
    return enc.encode_tokens(record.tokens, side)


def score(q_vec: np.ndarray, d_vec: np.ndarray) -> float:
    q_vec = np.asarray(q_vec, dtype=np.float64)
    d_vec = np.asarray(d_vec, dtype=np.float64)
    if q_vec.shape != d_vec.shape:
        raise ValueError(f"dimension mismatch: {q_vec.shape} vs {d_vec.shape}")
    return float((q_vec * d_vec).sum())


def backward_score_to_tokens(record: TextRecord, enc: DualEncoder, other: np.ndarray,
                             upstream: float = 1.0) -> np.ndarray:
    """Gradient of ``upstream * score(other, encode(record))`` per token position.

    Returns an ``(L, dim)`` buffer whose row ``z`` is ``upstream * other / L``.
    """
    n = len(record.tokens)
    if n == 0:
        raise ValueError("cannot encode empty text")
    row = upstream * np.asarray(other, dtype=np.float64) / n
    return np.tile(row, (n, 1))


def scatter_pooled_grad(grad: np.ndarray, ids: np.ndarray, pooled_grad: np.ndarray) -> None:
    """Accumulate the gradient of a mean-pooled vector into table rows, in place."""
    np.add.at(grad, ids, pooled_grad / len(ids))


def sgd_step(table: EmbeddingTable, grad: np.ndarray, learning_rate: float) -> EmbeddingTable:
    if grad.shape != table.matrix.shape:
        raise ValueError(f"gradient shape {grad.shape} != table shape {table.matrix.shape}")
    if not np.all(np.isfinite(grad)):
        raise DivergedError("diverged")
    if learning_rate:
        table.matrix -= learning_rate * grad
    return table


def listwise_nll(enc: DualEncoder, query_ids: np.ndarray, cand_ids: Sequence[np.ndarray],
                 pos: int = 0, with_grad: bool = True, out=None, weight: float = 1.0):
    """Softmax negative log-likelihood of candidate ``pos`` among ``cand_ids``.

    Scores are raw dot products. Returns ``(loss, gq, gd)`` where ``gq``/``gd``
    are dense gradients for the query/document tables (``gd is gq`` when the
    encoder shares one table), or ``(loss, None, None)`` without gradients.
    Pass ``out=(gq, gd)`` to accumulate ``weight * gradient`` into existing buffers.
    """
    q = enc.encode_ids(query_ids, "query")
    D = np.stack([enc.encode_ids(c, "doc") for c in cand_ids])
    s = D @ q
    smax = s.max()
    lse = smax + np.log(np.exp(s - smax).sum())
    loss = float(lse - s[pos])
    if not np.isfinite(loss):
        raise DivergedError("diverged")
    if not with_grad:
        return loss, None, None
    p = np.exp(s - lse)
    p[pos] -= 1.0  # dL/ds
    p *= weight
    if out is None:
        gq = np.zeros_like(enc.query_table.matrix)
        gd = gq if enc.shared else np.zeros_like(enc.doc_table.matrix)
    else:
        gq, gd = out
    scatter_pooled_grad(gq, query_ids, p @ D)
    for c, coef in zip(cand_ids, p):
        scatter_pooled_grad(gd, c, coef * q)
    return loss, gq, gd


def apply_grads(enc: DualEncoder, gq: np.ndarray, gd: np.ndarray, learning_rate: float) -> None:
    sgd_step(enc.query_table, gq, learning_rate)
    if not enc.shared:
        sgd_step(enc.doc_table, gd, learning_rate)


def pool_rows(matrix: np.ndarray, id_lists: Sequence[np.ndarray]) -> np.ndarray:
    """Mean of ``matrix`` rows for each id list, as a bag of words.

    Each list is reduced to its distinct ids weighted by ``count / length`` and
    summed in id order, so texts with proportional token counts (equal means)
    get bitwise-equal vectors, and one list pooled alone matches the batch.
    """
    rows, weights, starts = [], [], []
    total = 0
    for ids in id_lists:
        if len(ids) == 0:
            raise ValueError("cannot encode empty text")
        uniq, counts = np.unique(ids, return_counts=True)
        starts.append(total)
        rows.append(uniq)
        weights.append(counts / len(ids))
        total += len(uniq)
    weighted = matrix[np.concatenate(rows)] * np.concatenate(weights)[:, None]
    return np.add.reduceat(weighted, starts, axis=0)


def embed_many(enc: DualEncoder, id_lists: Sequence[np.ndarray], side: str = "doc") -> np.ndarray:
    """Mean-pooled embeddings for many token-id arrays at once."""
    return pool_rows(enc.table(side).matrix, id_lists)
