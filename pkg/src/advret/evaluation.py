"""Attack metrics, stratified target sampling and plain-text reports."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .attack import AttackOutcome
from .corpus import TextRecord, Vocabulary
from .lm import BigramLM
from .pipeline import BlackBox, DenseRetriever

logger = logging.getLogger(__name__)

THRESHOLDS = (0.08, 0.06, 0.04, 0.02)
STRATA = ("easy", "middle", "hard", "mixture")


# --- target sampling -----------------------------------------------------------------


@dataclass(frozen=True)
class TargetStratum:
    """Ranks ``(lo, hi]`` of the full ordering; ``hi=None`` means to the end.

    ``even`` picks an evenly spaced lattice of ranks, otherwise ranks are drawn
    uniformly without replacement.
    """

    label: str
    lo: int
    hi: int | None
    even: bool = True
    per_query: int = 10


def default_strata(K: int, per_query: int = 10) -> list[TargetStratum]:
    return [TargetStratum("easy", K, 2 * K, True, per_query),
            TargetStratum("middle", 2 * K, 10 * K, True, per_query),
            TargetStratum("hard", 10 * K, None, False, per_query)]


def even_lattice(first: int, last: int, count: int) -> list[int]:
    """``count`` evenly spaced integers from ``first`` to ``last`` inclusive.

    Rounds half up, so ``even_lattice(101, 200, 10)`` is 101, 112, ..., 200.
    """
    if count <= 0 or last < first:
        return []
    if last - first + 1 <= count:
        return list(range(first, last + 1))
    if count == 1:
        return [first]
    return [int(math.floor(x + 0.5)) for x in np.linspace(first, last, count)]


def _stratum_ranks(s: TargetStratum, num_docs: int, K: int, rng: np.random.Generator) -> list[int]:
    lo = max(s.lo, K)
    hi = num_docs if s.hi is None else s.hi
    if hi > num_docs:
        logger.warning("stratum %s range (%d, %d] exceeds corpus size %d; shrunk", s.label, lo, hi, num_docs)
        hi = num_docs
    if hi <= lo:
        logger.warning("stratum %s is empty for a corpus of %d docs", s.label, num_docs)
        return []
    if s.even:
        return even_lattice(lo + 1, hi, s.per_query)
    take = min(s.per_query, hi - lo)
    return sorted(int(r) for r in rng.choice(np.arange(lo + 1, hi + 1), size=take, replace=False))


@dataclass(frozen=True)
class Target:
    query: TextRecord
    doc_pos: int
    rank: int


def sample_targets(queries: Sequence[TextRecord], retriever: DenseRetriever, K: int, seed: int,
                   strata: Sequence[TargetStratum] | None = None,
                   mixture_size: int = 10) -> dict[str, list[Target]]:
    """Per query and stratum, map sampled ranks of the full ordering to documents.

    Mixture draws ``mixture_size`` of the union of the other strata for each query.
    """
    strata = list(strata) if strata is not None else default_strata(K)
    rng = np.random.default_rng(seed)
    out: dict[str, list[Target]] = {s.label: [] for s in strata}
    out["mixture"] = []
    n = len(retriever.index)
    for q in queries:
        order = retriever.full_ordering(q)
        union = []
        for s in strata:
            picked = [Target(q, int(order[r - 1]), r) for r in _stratum_ranks(s, n, K, rng)]
            out[s.label] += picked
            union += picked
        take = min(mixture_size, len(union))
        out["mixture"] += [union[i] for i in sorted(rng.choice(len(union), size=take, replace=False))]
    return out


# --- rank metrics --------------------------------------------------------------------


def _check(outcomes: Sequence[AttackOutcome]) -> None:
    if not outcomes:
        raise ValueError("no outcomes")


def srr_at_k(outcomes: Sequence[AttackOutcome], k: int) -> float:
    """Percentage of adversarial documents ranked within the top ``k``."""
    _check(outcomes)
    return 100.0 * sum(o.final_rank <= k for o in outcomes) / len(outcomes)


def nrs_at_K(outcomes: Sequence[AttackOutcome], K: int) -> float:
    """Mean relative rank improvement; documents not recalled into top-K count 0."""
    _check(outcomes)
    total = 0.0
    for o in outcomes:
        if o.original_rank < 1 or o.final_rank < 1:
            raise ValueError("ranks must be >= 1")
        if o.final_rank <= K:
            total += (o.original_rank - o.final_rank) / o.original_rank * 100.0
    return total / len(outcomes)


# --- naturalness ---------------------------------------------------------------------


def spamicity(doc: Sequence[str], query: Sequence[str], window: int = 20) -> float:
    """Highest density of query terms over sliding windows of ``window`` tokens.

    Documents shorter than the window are scored as a single window.
    """
    L = len(doc)
    if L == 0:
        return 0.0
    qset = set(query)
    hits = np.array([t in qset for t in doc], dtype=np.int64)
    w = min(window, L)
    csum = np.concatenate([[0], np.cumsum(hits)])
    return float((csum[w:] - csum[:-w]).max() / w)


def detection_rate(docs: Sequence[Sequence[str]], queries: Sequence[Sequence[str]], threshold: float,
                   window: int = 20) -> float:
    """Percentage of documents whose spamicity exceeds ``threshold``."""
    if not docs:
        raise ValueError("no documents")
    return 100.0 * sum(spamicity(d, q, window) > threshold for d, q in zip(docs, queries)) / len(docs)


def perplexity(doc: Sequence[str], lm: BigramLM, vocab: Vocabulary) -> float:
    return lm.perplexity(vocab.encode(doc))


# --- transfer to the re-ranking stage --------------------------------------------------


@dataclass
class TransferReport:
    count: int
    avg_rank: float
    top50: float
    top10: float
    drop: float
    nrs: float
    lost: float


def transfer_report(outcomes: Sequence[AttackOutcome], queries: Mapping[str, TextRecord],
                    blackbox: BlackBox) -> TransferReport:
    """Final-list position of recalled adversarial docs, plus first-stage Drop/NRS/Lost.

    Avg.rank, T50% and T10% cover documents recalled into the top-K; each costs
    one black-box query. Drop, NRS and Lost are over all outcomes.
    """
    K = blackbox.K
    positions = []
    for o in outcomes:
        if o.success:
            rl = blackbox.query_with_substitution(queries[o.query_id], o.doc_id, o.adv_tokens)
            positions.append(rl.position(o.doc_id))
    n = len(outcomes)
    if positions:
        avg = float(np.mean(positions))
        t50 = 100.0 * sum(p <= K * 0.5 for p in positions) / len(positions)
        t10 = 100.0 * sum(p <= K * 0.1 for p in positions) / len(positions)
    else:
        avg, t50, t10 = float("nan"), 0.0, 0.0
    if n:
        drop = 100.0 * sum(o.final_rank > o.original_rank for o in outcomes) / n
        lost = 100.0 * sum(not o.success for o in outcomes) / n
        nrs = nrs_at_K(outcomes, K)
    else:
        drop = lost = nrs = 0.0
    return TransferReport(len(positions), avg, t50, t10, drop, nrs, lost)


# --- reports ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    """One (method, stratum) row. Rates are percentages."""

    method: str
    stratum: str
    count: int
    srr: dict[int, float]
    nrs: float
    detection: dict[float, float] = field(default_factory=dict)
    perplexity: float = float("nan")
    seconds: float = float("nan")
    substitutions: float = 0.0

    def validate(self) -> None:
        for v in [*self.srr.values(), *self.detection.values()]:
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"rate out of range: {v}")


def summarize(method: str, stratum: str, outcomes: Sequence[AttackOutcome], K: int, ks: Sequence[int],
              queries: Mapping[str, TextRecord] | None = None, lm: BigramLM | None = None,
              vocab: Vocabulary | None = None, thresholds: Sequence[float] = THRESHOLDS,
              timing: bool = True) -> MetricReport:
    """Aggregate outcomes into a report row.

    Naturalness columns need ``queries`` and adversarial tokens; perplexity
    also needs ``lm`` and ``vocab``.
    """
    if not outcomes:
        return MetricReport(method, stratum, 0, {k: float("nan") for k in ks}, float("nan"))
    row = MetricReport(method, stratum, len(outcomes), {k: srr_at_k(outcomes, k) for k in ks},
                       nrs_at_K(outcomes, K),
                       substitutions=float(np.mean([len(o.substitutions) for o in outcomes])))
    if timing:
        row.seconds = float(np.mean([o.seconds for o in outcomes]))
    docs = [o.adv_tokens for o in outcomes]
    if queries is not None and all(docs):
        qtok = [queries[o.query_id].tokens for o in outcomes]
        row.detection = {t: detection_rate(docs, qtok, t) for t in thresholds}
        if lm is not None and vocab is not None:
            row.perplexity = float(np.mean([perplexity(d, lm, vocab) for d in docs if len(d) >= 2]))
    row.validate()
    return row


def _fmt(x: float, width: int = 7) -> str:
    return f"{'-':>{width}}" if isinstance(x, float) and math.isnan(x) else f"{x:{width}.2f}"


def format_report(rows: Iterable[MetricReport]) -> str:
    """Aligned plain-text table; spamicity is the windowed query-term density proxy."""
    rows = list(rows)
    if not rows:
        return "(no results)\n"
    ks = sorted({k for r in rows for k in r.srr})
    ths = sorted({t for r in rows for t in r.detection}, reverse=True)
    head = (f"{'method':<13}{'stratum':<9}{'n':>5}" + "".join(f"{'SRR@' + str(k):>9}" for k in ks)
            + f"{'NRS':>9}{'subs':>7}" + "".join(f"{'spam>' + format(t, 'g'):>11}" for t in ths)
            + f"{'PPL':>10}{'sec':>9}")
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r.method:<13}{r.stratum:<9}{r.count:>5}"
                     + "".join(f"  {_fmt(r.srr.get(k, float('nan')))}" for k in ks)
                     + f"  {_fmt(r.nrs)}{r.substitutions:7.1f}"
                     + "".join(f"    {_fmt(r.detection.get(t, float('nan')))}" for t in ths)
                     + f"   {_fmt(r.perplexity)}  {_fmt(r.seconds, 7) if not math.isnan(r.seconds) else '      -'}")
    return "\n".join(lines) + "\n"


# --- adversarial document files ------------------------------------------------------


def save_adversarial(outcomes: Sequence[AttackOutcome], path: str | Path) -> None:
    """``query_id<TAB>doc_id<TAB>space-joined tokens``, one line per outcome."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for o in outcomes:
            fh.write(f"{o.query_id}\t{o.doc_id}\t{' '.join(o.adv_tokens)}\n")


def load_adversarial(path: str | Path) -> list[tuple[str, str, tuple[str, ...]]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            p = line.rstrip("\n").split("\t")
            if len(p) != 3:
                raise ValueError(f"{path}: line {lineno}: expected 3 tab-separated fields")
            out.append((p[0], p[1], tuple(p[2].split())))
    return out
