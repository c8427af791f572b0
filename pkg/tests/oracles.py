"""Brute-force reference implementations and random instances for them.

Instances come in two flavours: small-integer embeddings with documents of
length 4 (every score is exact, so ties are frequent and exercise the
doc-id tie rule) and continuous random embeddings.
"""

import math
from fractions import Fraction

import numpy as np

from advret.attack import synonym_candidates
from advret.corpus import Store, TextRecord, build_vocab
from advret.encoder import DualEncoder, EmbeddingTable
from advret.multiview import counter_viewers
from advret.pipeline import CorpusIndex, DenseRetriever


def random_retrieval(rng: np.random.Generator, n_docs: int = 200, exact: bool | None = None):
    exact = bool(rng.integers(2)) if exact is None else exact
    words = [f"w{i}" for i in range(int(rng.integers(5, 40)))]
    ids = [f"d{i:05d}" for i in rng.permutation(n_docs)]
    docs = []
    for d in ids:
        L = 4 if exact else int(rng.integers(1, 12))
        docs.append(TextRecord.from_tokens(d, list(rng.choice(words, size=L))))
    qtoks = list(rng.choice(words, size=4 if exact else int(rng.integers(1, 5))))
    query = TextRecord.from_tokens("q", qtoks)
    vocab = build_vocab(docs + [query])
    dim = int(rng.integers(2, 6))
    if exact:
        m = rng.integers(-2, 3, size=(vocab.num_rows, dim)).astype(float)
    else:
        m = rng.normal(size=(vocab.num_rows, dim))
    enc = DualEncoder(vocab, EmbeddingTable(m))
    store = Store(docs, [query], [], vocab)
    return DenseRetriever(enc, CorpusIndex(store)), query


def oracle_scores(retriever: DenseRetriever, query: TextRecord, override=None) -> list[Fraction]:
    """Exact rational scores, so mathematically tied documents compare equal."""
    vocab = retriever.encoder.vocab
    dt = retriever.encoder.doc_table.matrix
    qt = retriever.encoder.query_table.matrix

    def mean(matrix, toks):
        return [sum((Fraction(matrix[vocab.index(t)][j]) for t in toks), Fraction(0)) / len(toks)
                for j in range(matrix.shape[1])]

    q = mean(qt, query.tokens)
    out = []
    for i, toks in enumerate(retriever.index.doc_tokens):
        if override is not None and i == override[0]:
            toks = override[1]
        out.append(sum((a * b for a, b in zip(q, mean(dt, toks))), Fraction(0)))
    return out


def oracle_order(retriever, query, override=None) -> list[str]:
    s = oracle_scores(retriever, query, override)
    ids = retriever.index.doc_ids
    return [ids[i] for i in sorted(range(len(ids)), key=lambda i: (-s[i], ids[i]))]


def check_retrieve_topk(rng) -> bool:
    r, q = random_retrieval(rng)
    K = int(rng.integers(1, len(r.index) + 5))
    got = list(r.retrieve_topk(q, K).doc_ids)
    return got == oracle_order(r, q)[:K]


def check_recall_rank(rng) -> bool:
    r, q = random_retrieval(rng)
    i = int(rng.integers(len(r.index)))
    if rng.random() < 0.5:
        new = list(rng.choice(list(r.encoder.vocab.itos), size=len(r.index.doc_tokens[i])))
        order = oracle_order(r, q, (i, new))
        got = r.recall_rank(q, i, new)
    else:
        order = oracle_order(r, q)
        got = r.recall_rank(q, r.index.doc_ids[i])
    return got == order.index(r.index.doc_ids[i]) + 1


def check_counter_viewers(rng) -> bool:
    exact = bool(rng.integers(2))
    N, dim = int(rng.integers(5, 80)), int(rng.integers(2, 6))
    M = rng.integers(-2, 3, size=(N, dim)).astype(float) if exact else rng.normal(size=(N, dim))
    w = rng.integers(-2, 3, size=dim).astype(float) if exact else rng.normal(size=dim)
    excluded = rng.choice(N, size=int(rng.integers(0, N - 1)), replace=False)
    n = int(rng.integers(1, 8))
    tie = rng.permutation(N)
    U, pos = counter_viewers(w, M, excluded, n, tie)
    ex = set(excluded.tolist())
    s = [math.fsum(a * b for a, b in zip(M[i], w)) for i in range(N)]
    expect = sorted((i for i in range(N) if i not in ex), key=lambda i: (-s[i], tie[i]))[:n]
    return pos.tolist() == expect and np.array_equal(U, M[expect])


def check_synonym_ranking(rng) -> bool:
    rows, dim = int(rng.integers(5, 60)), int(rng.integers(2, 6))
    table = rng.normal(size=(rows, dim))
    if rng.random() < 0.3:
        # duplicate rows make cosine ties that must resolve by token id
        table[rng.integers(rows, size=3)] = table[0]
    doc = rng.integers(0, rows, size=int(rng.integers(1, 10)))
    p = int(rng.integers(len(doc)))
    pool = np.unique(rng.choice(rows, size=int(rng.integers(1, rows)), replace=True))
    count = int(rng.integers(1, 12))
    got = synonym_candidates(p, doc, pool, table, None, float("inf"), count)
    cur = int(doc[p])

    def cos(a, b):
        return math.fsum(x * y for x, y in zip(a, b)) / (math.sqrt(math.fsum(x * x for x in a))
                                                         * math.sqrt(math.fsum(x * x for x in b)))

    cands = [int(c) for c in pool if c != cur]
    sims = {c: cos(table[c], table[cur]) for c in cands}
    # exact cosine ties (duplicate rows) may differ in the last ulp; snap them
    key = {c: round(sims[c], 12) for c in cands}
    expect = sorted(cands, key=lambda c: (-key[c], c))[:count]
    return got.tolist() == expect
