"""Multi-view contrastive word-substitution attack on a dense retriever, and baselines.

Every decision an attack makes goes through the surrogate encoder or the
budgeted black box. ``AttackContext.judge`` (the real target retriever) is
only read to report original/final ranks of finished outcomes.
"""

from __future__ import annotations

import logging
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import TextRecord
from .encoder import DivergedError, DualEncoder, embed_many, pool_rows
from .lm import BigramLM
from .multiview import (ViewBundle, ViewGenConfig, ViewGenerator, check_kmeans_invariants,
                        counter_viewers, generate_views, kmeans)
from .pipeline import BlackBox, CorpusIndex, DenseRetriever, dot_scores

logger = logging.getLogger(__name__)

MODES = ("mcara", "single", "ind")


@dataclass
class AttackConfig:
    K: int = 20
    n: int = 5
    tau: float = 0.1
    eta: int = 3
    m: int = 50
    rho: float = 50.0
    pgd_radius: float = 1.0
    pgd_step: float | None = None
    synonyms_per_word: int = 8
    mode: str = "mcara"
    rank_check: str = "surrogate"
    query_budget: int = 20
    early_stop: bool = True
    lm_window: int = 5
    check_kmeans: bool = False
    seed: int = 0
    viewgen: ViewGenConfig = field(default_factory=ViewGenConfig)

    def validate(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.eta < 1:
            raise ValueError("eta must be >= 1")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.rho <= 0:
            raise ValueError("rho must be > 0")
        if self.n < 1 or self.K < 1:
            raise ValueError("n and K must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.rank_check not in ("surrogate", "blackbox"):
            raise ValueError("rank_check must be 'surrogate' or 'blackbox'")

    @property
    def epsilon(self) -> int:
        return self.m

    @property
    def step_size(self) -> float:
        return 0.1 * self.pgd_radius / self.eta if self.pgd_step is None else self.pgd_step


@dataclass
class TokenImportance:
    grads: np.ndarray
    importance: np.ndarray
    selected: np.ndarray


@dataclass
class AttackOutcome:
    query_id: str
    doc_id: str
    original_rank: int
    final_rank: int
    K: int
    substitutions: list[tuple[int, str, str]]
    loss_trace: list[float]
    queries_spent: int
    seconds: float
    adv_tokens: tuple[str, ...]
    method: str = "mcara"
    check_original_rank: int | None = None
    check_final_rank: int | None = None
    gate_ok: bool = True
    failed: bool = False

    @property
    def success(self) -> bool:
        return self.final_rank <= self.K

    def log_line(self) -> str:
        return (f"{self.query_id}\t{self.doc_id}\t{self.original_rank}\t{self.final_rank}\t"
                f"{int(self.success)}\t{len(self.substitutions)}\t{self.queries_spent}\t{self.seconds:.6f}")


def write_outcome_log(outcomes: Sequence[AttackOutcome], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for o in outcomes:
            fh.write(o.log_line() + "\n")


def read_outcome_log(path: str | Path, K: int) -> list[AttackOutcome]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            p = line.rstrip("\n").split("\t")
            if len(p) != 8:
                raise ValueError(f"{path}: line {lineno}: expected 8 tab-separated fields")
            o = AttackOutcome(p[0], p[1], int(p[2]), int(p[3]), K, [("", "", "")] * int(p[5]),
                              [], int(p[6]), float(p[7]), ())
            if int(p[4]) != int(o.success):
                raise ValueError(f"{path}: line {lineno}: success flag disagrees with final rank")
            out.append(o)
    return out


# --- losses and gradients -------------------------------------------------------


def contrastive_loss(W: np.ndarray, V: np.ndarray, U: np.ndarray, tau: float,
                     with_grad: bool = False):
    """View-wise InfoNCE: each view against its viewer (positive) and all counter-viewers.

    Similarities are dot products divided by ``tau``. With ``with_grad``
    returns ``(loss, dL/dW)``.
    """
    n = len(W)
    if len(U) == 0:
        logger.warning("no counter-viewers; contrastive loss is 0")
        return (0.0, np.zeros_like(W)) if with_grad else 0.0
    pos = (W * V).sum(1) / tau
    neg = W @ U.T / tau
    logits = np.concatenate([pos[:, None], neg], axis=1)
    mx = logits.max(1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(logits - mx).sum(1))
    loss = float((lse - pos).sum())
    if not with_grad:
        return loss
    p = np.exp(logits - lse[:, None])
    dW = ((p[:, :1] - 1.0) * V + p[:, 1:] @ U) / tau
    assert dW.shape == (n, W.shape[1])
    return loss, dW


def views_for(w_d: np.ndarray, V: np.ndarray, generator: ViewGenerator | None, mode: str) -> np.ndarray:
    """Multi-view representations; the single-view variant repeats ``w_d``."""
    if mode == "single" or generator is None:
        return np.tile(w_d, (len(V), 1))
    return generator.forward(w_d, V)


def doc_gradient(w_d: np.ndarray, bundle: ViewBundle, tau: float, mode: str = "mcara",
                 view: int | None = None) -> tuple[float, np.ndarray]:
    """Contrastive loss at document embedding ``w_d`` and its gradient w.r.t. ``w_d``.

    ``view`` restricts the loss to a single view term (used by the independent variant).
    """
    W = views_for(w_d, bundle.V, bundle.generator, mode)
    V = bundle.V
    if view is not None:
        W, V = W[view:view + 1], V[view:view + 1]
    loss, dW = contrastive_loss(W, V, bundle.U, tau, with_grad=True)
    if mode == "single" or bundle.generator is None:
        return loss, dW.sum(0)
    if view is not None:
        return loss, bundle.generator.backward_doc(w_d, V, dW)
    return loss, bundle.generator.backward_doc(w_d, bundle.V, dW)


def _top_positions(importance: np.ndarray, m: int, allowed: np.ndarray | None) -> np.ndarray:
    idx = np.arange(len(importance)) if allowed is None else np.asarray(allowed, dtype=np.int64)
    order = np.lexsort((idx, -importance[idx]))
    return idx[order[:m]]


def token_gradients(doc_ids: np.ndarray, table: np.ndarray, bundle: ViewBundle, tau: float,
                    m: int, mode: str = "mcara", allowed: np.ndarray | None = None) -> TokenImportance:
    """Per-position gradients of the contrastive loss and the top-m important positions.

    ``allowed`` limits selection to those positions (e.g. not yet substituted).
    Ties in importance go to the earlier position.
    """
    L = len(doc_ids)
    w_d = table[doc_ids].mean(0)
    if mode == "ind":
        per_view = []
        tops = []
        for i in range(bundle.n):
            _, g = doc_gradient(w_d, bundle, tau, mode, view=i)
            G = np.tile(g / L, (L, 1))
            imp = (G * G).sum(1)
            per_view.append(imp)
            tops.append(_top_positions(imp, m, allowed))
        common = set(tops[0].tolist())
        for t in tops[1:]:
            common &= set(t.tolist())
        if len(common) < m / 2:
            # fill by best mean per-view rank
            ranks: dict[int, float] = {}
            for t in tops:
                for r, p in enumerate(t.tolist()):
                    ranks[p] = ranks.get(p, 0.0) + r
            for p in ranks:
                ranks[p] /= len(tops)
            extra = sorted((p for p in ranks if p not in common), key=lambda p: (ranks[p], p))
            common |= set(extra[: max(0, m - len(common))])
        _, g = doc_gradient(w_d, bundle, tau, "mcara")
        G = np.tile(g / L, (L, 1))
        importance = np.mean(per_view, axis=0)
        sel = np.array(sorted(common, key=lambda p: (-importance[p], p))[:m], dtype=np.int64)
        return TokenImportance(G, importance, sel)
    _, g = doc_gradient(w_d, bundle, tau, mode)
    G = np.tile(g / L, (L, 1))
    importance = (G * G).sum(1)
    return TokenImportance(G, importance, _top_positions(importance, m, allowed))


def pgd_perturb(doc_ids: np.ndarray, positions: np.ndarray, table: np.ndarray, bundle: ViewBundle,
                config: AttackConfig) -> tuple[np.ndarray, list[float]]:
    """Projected gradient descent on the embeddings at ``positions``.

    Each step moves the perturbed embeddings by ``step_size`` along the
    normalised negative gradient and projects every per-word perturbation onto
    the L2 ball of radius ``pgd_radius``. Returns ``(e_p, loss per step)``.
    """
    L = len(doc_ids)
    orig = table[doc_ids[positions]].copy()
    ep = orig.copy()
    rest = table[doc_ids].sum(0) - orig.sum(0)
    trace = []
    step = config.step_size
    for _ in range(config.eta):
        w_d = (rest + ep.sum(0)) / L
        if config.mode == "ind":
            loss, g = 0.0, np.zeros_like(w_d)
            for i in range(bundle.n):
                li, gi = doc_gradient(w_d, bundle, config.tau, "ind", view=i)
                nrm = np.linalg.norm(gi)
                loss += li
                if nrm > 0:
                    g += gi / nrm
            g /= bundle.n
        else:
            loss, g = doc_gradient(w_d, bundle, config.tau, config.mode)
        trace.append(loss)
        g = g / L
        if not np.all(np.isfinite(g)):
            raise DivergedError("non-finite gradient during PGD")
        nrm = np.linalg.norm(g)
        if nrm == 0 or step == 0:
            continue
        ep = ep - step * g / nrm
        delta = ep - orig
        dn = np.linalg.norm(delta, axis=1, keepdims=True)
        scale = np.minimum(1.0, config.pgd_radius / np.maximum(dn, 1e-300))
        ep = orig + delta * scale
    return ep, trace


def _cosine_rows(M: np.ndarray, x: np.ndarray) -> np.ndarray:
    nx = np.linalg.norm(x)
    nm = np.linalg.norm(M, axis=1)
    return (M @ x) / np.maximum(nm * nx, 1e-300)


def synonym_candidates(position: int, doc_ids: np.ndarray, pool: np.ndarray, table: np.ndarray,
                       lm: BigramLM | None, rho: float, count: int, window: int = 5) -> np.ndarray:
    """Fluency-gated substitutes for the token at ``position``.

    ``pool`` holds the distinct token ids of the candidate set's documents.
    Candidates are ranked by cosine similarity to the current token's
    embedding (ties by token id); the top ``count`` survive if the ``±window``
    sentence around the substitution has perplexity at most ``rho``.
    """
    cur = int(doc_ids[position])
    pool = np.asarray(pool, dtype=np.int64)
    pool = pool[pool != cur]
    if len(pool) == 0:
        return pool
    sims = _cosine_rows(table[pool], table[cur])
    ranked = pool[np.lexsort((pool, -sims))][:count]
    if lm is None or not np.isfinite(rho):
        return ranked
    lo = max(0, position - window)
    hi = min(len(doc_ids), position + window + 1)
    if hi - lo < 2:
        return ranked
    ctx = np.array(doc_ids[lo:hi])
    keep = []
    for c in ranked:
        ctx[position - lo] = c
        if lm.perplexity(ctx) <= rho:
            keep.append(c)
    return np.array(keep, dtype=np.int64)


# --- context shared by all attacks -------------------------------------------------


class AttackContext:
    """Read-only state shared by attacks against one black box."""

    def __init__(self, surrogate: DualEncoder, index: CorpusIndex, blackbox: BlackBox,
                 lm: BigramLM | None, judge: DenseRetriever | None = None):
        self.surrogate = surrogate
        self.index = index
        self.blackbox = blackbox
        self.lm = lm
        self.judge = judge
        self.sur = DenseRetriever(surrogate, index)
        self.table = surrogate.doc_table.matrix
        vocab = index.vocab
        df = np.zeros(vocab.num_rows, dtype=np.int64)
        for ids in index.token_ids:
            df[np.unique(ids)] += 1
        self.df = df
        self._norm_table = self.table / np.maximum(np.linalg.norm(self.table, axis=1, keepdims=True), 1e-300)

    def judge_rank(self, query: TextRecord, doc_pos: int, tokens: Sequence[str] | None = None) -> int:
        judge = self.judge or self.sur
        return judge.recall_rank(query, doc_pos, tokens)

    def nearest_neighbor(self, token_id: int) -> int:
        """Most cosine-similar vocabulary entry other than itself and OOV."""
        sims = self._norm_table @ self._norm_table[token_id]
        sims[token_id] = -np.inf
        sims[self.index.vocab.oov_index] = -np.inf
        return int(np.argmax(sims))


def pair_seed(seed: int, query_id: str, doc_pos: int) -> int:
    """Deterministic per-(query, document) seed."""
    return int(np.random.SeedSequence([seed, zlib.crc32(query_id.encode()), doc_pos]).generate_state(1)[0])


def _tokens(vocab, ids) -> tuple[str, ...]:
    return tuple(vocab.token(int(i)) for i in ids)


class _RankChecker:
    """Rank of the current document under the configured scorer, with budget accounting."""

    def __init__(self, ctx: AttackContext, query: TextRecord, doc_pos: int, config: AttackConfig):
        self.ctx, self.query, self.doc_pos, self.config = ctx, query, doc_pos, config
        self.spent = 0
        if config.rank_check == "surrogate":
            self.q = ctx.surrogate.encode_tokens(query.tokens, "query")
            self.scores = (ctx.sur.doc_matrix * self.q).sum(1)

    @property
    def exhausted(self) -> bool:
        return self.config.rank_check == "blackbox" and self.spent >= self.config.query_budget

    def __call__(self, ids: np.ndarray) -> int:
        if self.config.rank_check == "surrogate":
            s = self.scores.copy()
            s[self.doc_pos] = dot_scores(pool_rows(self.ctx.table, [ids]), self.q)[0]
            return self.ctx.index.rank_of(s, self.doc_pos)
        self.spent += 1
        return self.ctx.blackbox.recall_rank(self.query, self.ctx.index.doc_ids[self.doc_pos],
                                             _tokens(self.ctx.index.vocab, ids))


def greedy_substitute(doc_ids: np.ndarray, positions: Sequence[int], ep: np.ndarray, pool: np.ndarray,
                      ctx: AttackContext, config: AttackConfig, checker: _RankChecker,
                      current_rank: int, subs: list[tuple[int, int, int]]) -> tuple[np.ndarray, int]:
    """Greedy replacement over ``positions`` (already in importance order).

    For each position the gated synonym nearest (cosine) to its perturbed
    embedding is tried and kept only if the checked rank strictly improves.
    ``subs`` collects ``(position, old id, new id)`` across calls so the total
    stays within ``epsilon``. Returns ``(doc_ids, rank)``.
    """
    ids = np.array(doc_ids)
    table = ctx.table
    if current_rank <= config.K and config.early_stop:
        return ids, current_rank
    for pos, e in zip(positions, ep):
        if len(subs) >= config.epsilon or checker.exhausted:
            break
        S = synonym_candidates(int(pos), ids, pool, table, ctx.lm, config.rho,
                               config.synonyms_per_word, config.lm_window)
        if len(S) == 0:
            continue
        c = int(S[np.argmax(_cosine_rows(table[S], e))])
        old = int(ids[pos])
        trial = ids.copy()
        trial[pos] = c
        r = checker(trial)
        if r < current_rank:
            ids, current_rank = trial, r
            subs.append((int(pos), old, c))
            if config.early_stop and current_rank <= config.K:
                break
    return ids, current_rank


def _finish(ctx: AttackContext, query: TextRecord, doc_pos: int, orig_tokens, ids, subs, trace,
            spent, t0, method, check0=None, check1=None, failed=False) -> AttackOutcome:
    vocab = ctx.index.vocab
    adv = _tokens(vocab, ids) if ids is not None else tuple(orig_tokens)
    # keep untouched positions verbatim (OOV tokens survive an id round-trip otherwise)
    if ids is not None:
        touched = {p for p, _, _ in subs}
        adv = tuple(a if i in touched else o for i, (a, o) in enumerate(zip(adv, orig_tokens)))
    orig_rank = ctx.judge_rank(query, doc_pos)
    final_rank = ctx.judge_rank(query, doc_pos, adv)
    return AttackOutcome(query.id, ctx.index.doc_ids[doc_pos], orig_rank, final_rank, ctx.blackbox.K,
                         [(p, vocab.token(a), vocab.token(b)) for p, a, b in subs], trace, spent,
                         time.perf_counter() - t0, adv, method, check0, check1, failed=failed)


def attack_mcara(query: TextRecord, doc_pos: int, ctx: AttackContext, config: AttackConfig,
                 candidates: Sequence[str] | None = None) -> AttackOutcome:
    """Run the multi-view contrastive attack on one (query, target document) pair.

    ``candidates`` may pass a previously observed top-K list to avoid a
    black-box call; otherwise the black box is queried once.
    """
    config.validate()
    t0 = time.perf_counter()
    method = {"mcara": "mcara", "single": "mcara-single", "ind": "mcara-ind"}[config.mode]
    spent = 0
    if candidates is None:
        candidates = ctx.blackbox.query(query).doc_ids
        spent += 1
    vocab = ctx.index.vocab
    R = np.array([ctx.index.pos[d] for d in candidates], dtype=np.int64)
    orig_tokens = ctx.index.doc_tokens[doc_pos]
    ids = ctx.index.token_ids[doc_pos].copy()
    pool = np.unique(np.concatenate([ctx.index.token_ids[i] for i in R]))
    pool = pool[pool != vocab.oov_index]
    checker = _RankChecker(ctx, query, doc_pos, config)
    rank0 = checker(ids)
    subs: list[tuple[int, int, int]] = []
    trace: list[float] = []
    if config.early_stop and rank0 <= config.K:
        return _finish(ctx, query, doc_pos, orig_tokens, ids, subs, trace, spent + checker.spent,
                       t0, method, rank0, rank0)
    table = ctx.table
    R_emb = ctx.sur.doc_matrix[R]
    n = min(config.n, len(R))
    km = kmeans(R_emb, n, pair_seed(config.seed, query.id, doc_pos), config.viewgen.kmeans_iterations)
    if config.check_kmeans:
        check_kmeans_invariants(R_emb, km)
    V = km.centroids
    gen = None
    if config.mode != "single":
        vg = config.viewgen
        gen = ViewGenerator(len(V[0]), vg.seed, vg.activation, vg.init_scale)
        _, gen, _ = generate_views(table[ids].mean(0), V, vg, gen)
    excluded = np.concatenate([R, [doc_pos]])
    rank = rank0
    failed = False
    for _ in range(config.eta):
        if len(subs) >= config.epsilon or checker.exhausted:
            break
        if config.early_stop and rank <= config.K:
            break
        w_d = table[ids].mean(0)
        U, upos = counter_viewers(w_d, ctx.sur.doc_matrix, excluded, n, ctx.index.id_rank)
        bundle = ViewBundle(V, views_for(w_d, V, gen, config.mode), U, w_d, gen, upos)
        frozen = {p for p, _, _ in subs}
        allowed = np.array([p for p in range(len(ids)) if p not in frozen], dtype=np.int64)
        if len(allowed) == 0:
            break
        m = min(config.m - len(subs), len(allowed))
        imp = token_gradients(ids, table, bundle, config.tau, m, config.mode, allowed)
        try:
            ep, pgd_trace = pgd_perturb(ids, imp.selected, table, bundle, config)
        except DivergedError:
            logger.warning("PGD diverged on %s/%s", query.id, ctx.index.doc_ids[doc_pos])
            failed = True
            break
        trace.append(pgd_trace[0] if pgd_trace else 0.0)
        ids, rank = greedy_substitute(ids, imp.selected, ep, pool, ctx, config, checker, rank, subs)
    return _finish(ctx, query, doc_pos, orig_tokens, ids, subs, trace, spent + checker.spent, t0,
                   method, rank0, rank, failed)


# --- baselines ---------------------------------------------------------------------


def baseline_ts(query: TextRecord, doc_tokens: Sequence[str], m: int, seed: int,
                start: int | None = None) -> tuple[tuple[str, ...], list[tuple[int, str, str]]]:
    """Term spamming: overwrite a run of up to ``m`` tokens from a random start
    with query terms drawn uniformly with replacement."""
    L = len(doc_tokens)
    if L < 1:
        raise ValueError("document must be non-empty")
    rng = np.random.default_rng(seed)
    if start is None:
        start = int(rng.integers(L))
    span = min(m, L - start)
    q = list(query.tokens)
    picks = rng.integers(len(q), size=span)
    out = list(doc_tokens)
    subs = []
    for k, j in enumerate(picks):
        pos = start + k
        subs.append((pos, out[pos], q[j]))
        out[pos] = q[j]
    return tuple(out), subs


def tfidf_positions(query: TextRecord, doc_tokens: Sequence[str], m: int, df: dict[str, int] | Callable,
                    num_docs: int) -> list[int]:
    """Positions holding query terms, ordered by the term's TF-IDF in the document."""
    qset = set(query.tokens)
    tf: dict[str, int] = {}
    for t in doc_tokens:
        tf[t] = tf.get(t, 0) + 1
    get_df = df if callable(df) else df.get
    weight = {t: tf[t] * np.log(num_docs / max(get_df(t) or 1, 1)) for t in tf if t in qset}
    pos = [i for i, t in enumerate(doc_tokens) if t in qset]
    pos.sort(key=lambda i: (-weight[doc_tokens[i]], i))
    return pos[:m]


def baseline_tfidf(query: TextRecord, doc_pos: int, ctx: AttackContext, m: int) -> AttackOutcome:
    t0 = time.perf_counter()
    vocab = ctx.index.vocab
    tokens = ctx.index.doc_tokens[doc_pos]
    positions = tfidf_positions(query, tokens, m, lambda t: int(ctx.df[vocab.index(t)]), len(ctx.index))
    out = list(tokens)
    subs = []
    for p in positions:
        nb = vocab.token(ctx.nearest_neighbor(vocab.index(out[p])))
        subs.append((p, out[p], nb))
        out[p] = nb
    return _finish_tokens(ctx, query, doc_pos, tuple(out), subs, t0, "tfidf")


def attack_ts(query: TextRecord, doc_pos: int, ctx: AttackContext, m: int, seed: int) -> AttackOutcome:
    t0 = time.perf_counter()
    adv, subs = baseline_ts(query, ctx.index.doc_tokens[doc_pos], m, seed)
    return _finish_tokens(ctx, query, doc_pos, adv, subs, t0, "ts")


def _finish_tokens(ctx, query, doc_pos, adv, subs, t0, method) -> AttackOutcome:
    orig_rank = ctx.judge_rank(query, doc_pos)
    final_rank = ctx.judge_rank(query, doc_pos, adv)
    return AttackOutcome(query.id, ctx.index.doc_ids[doc_pos], orig_rank, final_rank, ctx.blackbox.K,
                         list(subs), [], 0, time.perf_counter() - t0, tuple(adv), method)
