import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from advret.attack import AttackOutcome
from advret.corpus import TextRecord, Vocabulary
from advret.evaluation import (MetricReport, TargetStratum, default_strata, detection_rate, even_lattice,
                               format_report, load_adversarial, nrs_at_K, sample_targets, save_adversarial,
                               spamicity, srr_at_k, summarize, transfer_report)
from advret.lm import BigramLM


def _o(orig, final, K=20, adv=("a",), qid="q", subs=0):
    return AttackOutcome(qid, "d", orig, final, K, [(0, "", "")] * subs, [], 0, 1.0, tuple(adv))


# --- sampling ----------------------------------------------------------------------


def test_even_lattice_examples():
    assert even_lattice(101, 200, 10) == [101, 112, 123, 134, 145, 156, 167, 178, 189, 200]
    assert even_lattice(21, 40, 10) == [21, 23, 25, 27, 29, 32, 34, 36, 38, 40]
    assert even_lattice(5, 7, 10) == [5, 6, 7]
    assert even_lattice(5, 9, 1) == [5]
    assert even_lattice(5, 4, 3) == []


@given(st.integers(1, 500), st.integers(0, 500), st.integers(1, 30))
def test_even_lattice_invariants(first, span, count):
    r = even_lattice(first, first + span, count)
    assert len(r) == min(count, span + 1)
    assert r == sorted(set(r))
    assert r[0] == first and (count == 1 and span > 0 or r[-1] == first + span)


def test_default_strata_ranges():
    e, m, h = default_strata(20)
    assert (e.lo, e.hi, m.lo, m.hi, h.lo, h.hi) == (20, 40, 40, 200, 200, None)
    assert e.even and m.even and not h.even


def test_sample_targets_ranks_and_docs(tiny_bb, tiny_store):
    r = tiny_bb.evaluation_retriever
    qs = tiny_store.queries[40:44]
    t = sample_targets(qs, r, 5, seed=3)
    assert set(t) == {"easy", "middle", "hard", "mixture"}
    assert [x.rank for x in t["easy"][:5]] == [6, 7, 8, 9, 10]
    assert [x.rank for x in t["middle"][:10]] == even_lattice(11, 50, 10)
    for label, (lo, hi) in (("easy", (5, 10)), ("middle", (10, 50)), ("hard", (50, 100))):
        for x in t[label]:
            assert lo < x.rank <= hi
            assert r.recall_rank(x.query, x.doc_pos) == x.rank
    assert len(t["mixture"]) == 10 * len(qs)
    pool = {(x.query.id, x.doc_pos) for k in ("easy", "middle", "hard") for x in t[k]}
    assert all((x.query.id, x.doc_pos) in pool for x in t["mixture"])
    again = sample_targets(qs, r, 5, seed=3)
    assert [(x.query.id, x.doc_pos) for x in again["mixture"]] == [(x.query.id, x.doc_pos) for x in t["mixture"]]


def test_hard_stratum_empty_when_corpus_is_small(tiny_bb, tiny_store, caplog):
    r = tiny_bb.evaluation_retriever
    t = sample_targets(tiny_store.queries[:2], r, 5, 0,
                       [TargetStratum("hard", 100, None, False)])
    assert t["hard"] == [] and t["mixture"] == []
    assert "empty" in caplog.text


# --- rank metrics ------------------------------------------------------------------


def test_srr_and_nrs_examples():
    outs = [_o(100, 10), _o(100, 50)]
    assert srr_at_k(outs, 20) == 50.0
    assert srr_at_k(outs, 5) == 0.0
    assert nrs_at_K(outs, 20) == pytest.approx(45.0)
    assert nrs_at_K([_o(40, 40)], 20) == 0.0
    with pytest.raises(ValueError):
        srr_at_k([], 20)
    with pytest.raises(ValueError):
        nrs_at_K([], 20)


@given(st.lists(st.tuples(st.integers(1, 300), st.integers(1, 300)), min_size=1, max_size=30))
def test_rank_metric_bounds(pairs):
    outs = [_o(a, b) for a, b in pairs]
    s5, s20 = srr_at_k(outs, 5), srr_at_k(outs, 20)
    assert 0 <= s5 <= s20 <= 100
    assert nrs_at_K(outs, 20) < 100


# --- naturalness -------------------------------------------------------------------


def _spam_oracle(doc, query, window):
    w = min(window, len(doc))
    return max(sum(t in query for t in doc[i:i + w]) / w for i in range(len(doc) - w + 1))


def test_spamicity_examples():
    doc = ["x"] * 5 + ["a"] * 35
    assert spamicity(doc, ["x"]) == 5 / 20
    assert spamicity(["a", "x"], ["x"]) == 0.5
    assert spamicity([], ["x"]) == 0.0
    assert detection_rate([doc, ["a"] * 40], [["x"], ["x"]], 0.08) == 50.0


@given(st.lists(st.sampled_from("abcxy"), min_size=1, max_size=60), st.integers(1, 25))
def test_spamicity_matches_oracle(doc, window):
    assert spamicity(doc, ["x", "y"], window) == pytest.approx(_spam_oracle(doc, {"x", "y"}, window))


@given(st.lists(st.sampled_from("abcxy"), min_size=1, max_size=60), st.integers(0, 59))
def test_adding_query_terms_never_lowers_spamicity(doc, p):
    p %= len(doc)
    spammed = list(doc)
    spammed[p] = "x"
    assert spamicity(spammed, ["x"]) >= spamicity(doc, ["x"])


# --- transfer and reports ----------------------------------------------------------


def test_transfer_report(tiny_bb, tiny_store):
    r = tiny_bb.evaluation_retriever
    q = tiny_store.queries[40]
    order = r.full_ordering(q)
    top = r.index.doc_ids[order[0]]
    far = r.index.doc_ids[order[30]]
    outs = [AttackOutcome(q.id, top, 1, 1, 5, [], [], 0, 0.0, r.index.doc_tokens[order[0]]),
            AttackOutcome(q.id, far, 31, 40, 5, [], [], 0, 0.0, r.index.doc_tokens[order[30]])]
    before = tiny_bb.query_count
    rep = transfer_report(outs, {q.id: q}, tiny_bb)
    assert tiny_bb.query_count == before + 1
    assert rep.count == 1 and 1 <= rep.avg_rank <= 5
    assert rep.drop == 50.0 and rep.lost == 50.0 and rep.nrs == 0.0


def test_summarize_and_format(tmp_path):
    lm = BigramLM(3)
    vocab = Vocabulary(["a", "x"])
    outs = [_o(100, 10, adv=["x", "a", "a"], qid="q", subs=2), _o(100, 50, adv=["a", "a", "a"], qid="q")]
    row = summarize("ts", "mixture", outs, 20, (5, 20), {"q": TextRecord.from_tokens("q", ["x"])}, lm, vocab)
    assert row.srr == {5: 0.0, 20: 50.0} and row.substitutions == 1.0
    assert row.detection[0.08] == 50.0 and row.perplexity == pytest.approx(3.0)
    assert row.seconds == 1.0
    text = format_report([row, summarize("mcara", "easy", [], 20, (5, 20))])
    lines = text.splitlines()
    assert "SRR@20" in lines[0] and "spam>0.08" in lines[0]
    assert lines[2].startswith("ts") and "50.00" in lines[2]
    assert format_report([]) == "(no results)\n"
    with pytest.raises(ValueError):
        MetricReport("m", "s", 1, {20: 101.0}, 0.0).validate()
    assert math.isnan(summarize("ts", "x", outs, 20, (20,), timing=False).seconds)


def test_adversarial_round_trip(tmp_path):
    outs = [_o(1, 1, adv=["a", "b"], qid="q1"), _o(2, 1, adv=["c"], qid="q2")]
    save_adversarial(outs, tmp_path / "a.tsv")
    assert load_adversarial(tmp_path / "a.tsv") == [("q1", "d", ("a", "b")), ("q2", "d", ("c",))]
    (tmp_path / "b.tsv").write_text("only\tone\n")
    with pytest.raises(ValueError):
        load_adversarial(tmp_path / "b.tsv")
