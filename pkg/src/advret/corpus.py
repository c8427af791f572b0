"""Tokenization, vocabularies, synthetic topic corpora and TSV persistence."""

from __future__ import annotations

import hashlib
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


class CorpusFormatError(ValueError):
    """Raised when a corpus, vocabulary or relevance file cannot be parsed."""


def tokenize(text: str) -> list[str]:
    """Lowercase ``text`` and split it on runs of non-alphanumeric characters."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class TextRecord:
    id: str
    tokens: tuple[str, ...]
    raw_text: str

    @classmethod
    def from_text(cls, id: str, text: str) -> "TextRecord":
        return cls(id, tuple(tokenize(text)), text)

    @classmethod
    def from_tokens(cls, id: str, tokens: Sequence[str]) -> "TextRecord":
        return cls(id, tuple(tokens), " ".join(tokens))

    def __len__(self) -> int:
        return len(self.tokens)


class Vocabulary:
    """Token <-> index bijection; every unknown token maps to one shared OOV index.

    Known tokens occupy ``0 .. len(vocab) - 1`` and ``oov_index == len(vocab)``,
    so an embedding table for this vocabulary has ``len(vocab) + 1`` rows.
    """

    def __init__(self, tokens: Sequence[str]):
        self.itos: list[str] = list(tokens)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    @property
    def oov_index(self) -> int:
        return len(self.itos)

    @property
    def num_rows(self) -> int:
        return len(self.itos) + 1

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def index(self, token: str) -> int:
        return self.stoi.get(token, self.oov_index)

    def token(self, index: int) -> str:
        if index == self.oov_index:
            return "<oov>"
        return self.itos[index]

    def encode(self, tokens: Iterable[str]) -> np.ndarray:
        oov = self.oov_index
        return np.fromiter((self.stoi.get(t, oov) for t in tokens), dtype=np.int64)


def build_vocab(records: Iterable[TextRecord], min_count: int = 1) -> Vocabulary:
    counts: Counter[str] = Counter()
    seen = False
    for rec in records:
        seen = True
        counts.update(rec.tokens)
    if not seen:
        raise ValueError("empty corpus")
    kept = [t for t, c in counts.items() if c >= min_count]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


@dataclass
class SyntheticSpec:
    """Parameters of the topic-clustered toy corpus.

    Each topic owns a disjoint block of keywords; the remaining
    ``background_fraction`` of the vocabulary is shared filler. Documents are
    walks of a sparse per-topic Markov chain so that a bigram model has real
    structure to learn.
    """

    num_topics: int = 20
    docs_per_topic: int = 100
    vocab_size: int = 1000
    doc_length: tuple[int, int] = (40, 80)
    queries_per_topic: int = 25
    seed: int = 0
    background_rate: float = 0.3
    background_fraction: float = 0.2
    branching: int = 4
    chain_strength: float = 0.8

    def validate(self) -> None:
        for name in ("num_topics", "docs_per_topic", "vocab_size", "queries_per_topic", "branching"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        lo, hi = self.doc_length
        if not 1 <= lo <= hi:
            raise ValueError("doc_length must satisfy 1 <= min <= max")
        if self.vocab_size < self.num_topics:
            raise ValueError("vocab_size must be >= num_topics")
        if not 0.0 <= self.background_rate <= 1.0:
            raise ValueError("background_rate must lie in [0, 1]")
        if not 0.0 <= self.chain_strength <= 1.0:
            raise ValueError("chain_strength must lie in [0, 1]")
        n_bg = self.num_background
        if self.background_rate > 0 and n_bg < 1:
            raise ValueError("background_rate > 0 needs at least one background token")
        if (self.vocab_size - n_bg) // self.num_topics < 1:
            raise ValueError("too few keywords per topic")

    @property
    def num_background(self) -> int:
        if self.background_rate == 0:
            return 0
        return max(1, int(round(self.vocab_size * self.background_fraction)))


@dataclass
class SyntheticData:
    docs: list[TextRecord]
    queries: list[TextRecord]
    qrels: list[tuple[str, str]]
    doc_topic: dict[str, int] = field(default_factory=dict)
    query_topic: dict[str, int] = field(default_factory=dict)
    topic_keywords: list[list[str]] = field(default_factory=list)
    background: list[str] = field(default_factory=list)


_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _pseudo_words(count: int, rng: np.random.Generator) -> list[str]:
    syllables = [c + v for c in _CONSONANTS for v in _VOWELS]
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < count:
        k = 2 if len(seen) < len(syllables) ** 2 // 4 else 3
        w = "".join(syllables[i] for i in rng.integers(0, len(syllables), size=k))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    words = _pseudo_words(spec.vocab_size, rng)
    n_bg = spec.num_background
    background = words[:n_bg]
    per_topic = (spec.vocab_size - n_bg) // spec.num_topics
    topic_kw = [words[n_bg + t * per_topic: n_bg + (t + 1) * per_topic] for t in range(spec.num_topics)]

    docs: list[TextRecord] = []
    doc_topic: dict[str, int] = {}
    doc_kw_tokens: list[list[str]] = []
    width = len(str(spec.num_topics * spec.docs_per_topic - 1))
    lo, hi = spec.doc_length
    for t in range(spec.num_topics):
        local = topic_kw[t] + background
        is_bg = np.array([False] * len(topic_kw[t]) + [True] * len(background))
        n_kw = len(topic_kw[t])
        p = np.where(is_bg, spec.background_rate / max(len(background), 1),
                     (1.0 - spec.background_rate) / n_kw)
        p = p / p.sum()
        # sparse successor table of this topic's chain
        succ = np.stack([rng.choice(len(local), size=spec.branching, p=p) for _ in local])
        for _ in range(spec.docs_per_topic):
            length = int(rng.integers(lo, hi + 1))
            state = int(rng.choice(len(local), p=p))
            seq = [state]
            for _ in range(length - 1):
                if rng.random() < spec.chain_strength:
                    state = int(succ[state, rng.integers(spec.branching)])
                else:
                    state = int(rng.choice(len(local), p=p))
                seq.append(state)
            toks = [local[i] for i in seq]
            doc_id = f"d{len(docs):0{width}d}"
            docs.append(TextRecord.from_tokens(doc_id, toks))
            doc_topic[doc_id] = t
            doc_kw_tokens.append([tok for tok, i in zip(toks, seq) if not is_bg[i]])

    queries: list[TextRecord] = []
    query_topic: dict[str, int] = {}
    qrels: list[tuple[str, str]] = []
    qwidth = len(str(spec.num_topics * spec.queries_per_topic - 1))
    # interleave topics so any prefix/suffix split stays topic-balanced
    for j in range(spec.queries_per_topic):
        for t in range(spec.num_topics):
            qid = f"q{len(queries):0{qwidth}d}"
            base = t * spec.docs_per_topic
            order = rng.permutation(spec.docs_per_topic)
            src = None
            for k in order:
                if doc_kw_tokens[base + k]:
                    src = base + int(k)
                    break
            if src is None:
                pool = sorted(set(topic_kw[t]))
                src = base + int(order[0])
            else:
                pool = sorted(set(doc_kw_tokens[src]))
            size = min(len(pool), int(rng.integers(2, 5)))
            picked = [pool[i] for i in rng.choice(len(pool), size=size, replace=False)]
            queries.append(TextRecord.from_tokens(qid, picked))
            query_topic[qid] = t
            qrels.append((qid, docs[src].id))
    return SyntheticData(docs, queries, qrels, doc_topic, query_topic, topic_kw, background)


# --- persistence -----------------------------------------------------------


def _check_field(value: str, what: str) -> None:
    if "\t" in value or "\n" in value or "\r" in value:
        raise ValueError(f"{what} {value!r} contains a tab or newline")


def save_records(records: Iterable[TextRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            _check_field(rec.id, "id")
            _check_field(rec.raw_text, "text")
            fh.write(f"{rec.id}\t{rec.raw_text}\n")


def load_records(path: str | Path) -> list[TextRecord]:
    out: list[TextRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8", newline="\n") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0]:
                raise CorpusFormatError(f"{path}: line {lineno}: expected 'id<TAB>text'")
            if parts[0] in seen:
                raise CorpusFormatError(f"{path}: line {lineno}: duplicate id {parts[0]!r}")
            seen.add(parts[0])
            out.append(TextRecord.from_text(parts[0], parts[1]))
    return out


def save_vocab(vocab: Vocabulary, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, tok in enumerate(vocab.itos):
            fh.write(f"{tok}\t{i}\n")


def load_vocab(path: str | Path) -> Vocabulary:
    tokens: list[str] = []
    with open(path, encoding="utf-8", newline="\n") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise CorpusFormatError(f"{path}: line {lineno}: expected 'token<TAB>index'")
            try:
                idx = int(parts[1])
            except ValueError:
                raise CorpusFormatError(f"{path}: line {lineno}: bad index {parts[1]!r}") from None
            if idx != len(tokens):
                raise CorpusFormatError(f"{path}: line {lineno}: indices must be contiguous from 0")
            tokens.append(parts[0])
    return Vocabulary(tokens)


def save_qrels(pairs: Iterable[tuple[str, str]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid, did in pairs:
            fh.write(f"{qid}\t{did}\n")


def load_qrels(path: str | Path) -> list[tuple[str, str]]:
    out = []
    with open(path, encoding="utf-8", newline="\n") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise CorpusFormatError(f"{path}: line {lineno}: expected 'query_id<TAB>doc_id'")
            out.append((parts[0], parts[1]))
    return out


@dataclass
class Store:
    """Documents, queries, relevance pairs and the vocabulary built over them."""

    docs: list[TextRecord]
    queries: list[TextRecord]
    qrels: list[tuple[str, str]]
    vocab: Vocabulary

    def __post_init__(self):
        self.doc_pos = {d.id: i for i, d in enumerate(self.docs)}
        self.query_pos = {q.id: i for i, q in enumerate(self.queries)}
        if len(self.doc_pos) != len(self.docs) or len(self.query_pos) != len(self.queries):
            raise ValueError("record ids must be unique")

    @classmethod
    def from_synthetic(cls, data: SyntheticData, min_count: int = 1) -> "Store":
        vocab = build_vocab(list(data.docs) + list(data.queries), min_count)
        return cls(data.docs, data.queries, data.qrels, vocab)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for group in (self.docs, self.queries):
            for r in group:
                h.update(r.id.encode())
                h.update(b"\t")
                h.update(" ".join(r.tokens).encode())
                h.update(b"\n")
        for q, d in self.qrels:
            h.update(f"{q}\t{d}\n".encode())
        h.update("\n".join(self.vocab.itos).encode())
        return h.hexdigest()


def save_store(store: Store, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_records(store.docs, path / "docs.tsv")
    save_records(store.queries, path / "queries.tsv")
    save_qrels(store.qrels, path / "qrels.tsv")
    save_vocab(store.vocab, path / "vocab.tsv")


def load_store(path: str | Path) -> Store:
    path = Path(path)
    return Store(
        load_records(path / "docs.tsv"),
        load_records(path / "queries.tsv"),
        load_qrels(path / "qrels.tsv"),
        load_vocab(path / "vocab.tsv"),
    )
