"""Acceptance criteria on the desk-scale benchmark (configs/benchmark.cfg, seeds 1-3).

Each test prints one ``criterion N: PASS|FAIL ...`` line; criteria are judged
on the mean over seeds. The benchmark runs once per module (a few minutes on
one core).
"""

import dataclasses
import time
from pathlib import Path

import numpy as np
import pytest

import gradcases
import oracles
from advret import attack as attack_mod
from advret.encoder import DualEncoder
from advret.evaluation import THRESHOLDS, srr_at_k
from advret.experiment import load_config, run_attacks, run_experiment
from advret.multiview import check_kmeans_invariants
from advret.surrogate import agreement

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "benchmark.cfg"
SEEDS = (1, 2, 3)
INSTANCES = 100
ORACLE_INSTANCES = 50


def _config(seed):
    c = load_config(CONFIG)
    c.seed = seed
    return c


@pytest.fixture(scope="module")
def kmeans_calls():
    return []


@pytest.fixture(scope="module")
def bench(tmp_path_factory, kmeans_calls):
    """One full experiment per seed; every clustering is checked and counted."""

    def checked(X, result, *a, **kw):
        check_kmeans_invariants(X, result, *a, **kw)
        kmeans_calls.append(len(X))

    mp = pytest.MonkeyPatch()
    mp.setattr(attack_mod, "check_kmeans_invariants", checked)
    root = tmp_path_factory.mktemp("bench")
    out = {}
    try:
        for seed in SEEDS:
            t0 = time.perf_counter()
            res = run_experiment(_config(seed), root / f"seed{seed}")
            print(f"\nseed {seed}: {time.perf_counter() - t0:.1f}s\n{res.report}")
            out[seed] = (res, root / f"seed{seed}")
    finally:
        mp.undo()
    return out


def _row(res, method, stratum):
    return next(r for r in res.rows if r.method == method and r.stratum == stratum)


def _mean(bench, method, stratum, fn):
    return float(np.mean([fn(_row(res, method, stratum)) for res, _ in bench.values()]))


def _srr(bench, method, stratum):
    res = next(iter(bench.values()))[0]
    K = res.lab.blackbox.K
    return _mean(bench, method, stratum, lambda r: r.srr[K])


# --- 1, 2: gradients and oracles --------------------------------------------------------


def test_criterion_1_gradients(verdict):
    rng = np.random.default_rng(2024)
    errs = {"listwise": max(gradcases.listwise_case(rng) for _ in range(INSTANCES)),
            "view": max(gradcases.view_loss_case(rng) for _ in range(INSTANCES)),
            "contrastive": max(gradcases.contrastive_case(rng) for _ in range(INSTANCES))}
    ok = all(e <= 1e-4 for e in errs.values())
    detail = ", ".join(f"{k} max rel err {v:.1e}" for k, v in errs.items())
    assert verdict(1, ok, f"{INSTANCES} instances each; {detail}")


def test_criterion_2_oracles(verdict):
    rng = np.random.default_rng(2025)
    checks = {"retrieve_topk": oracles.check_retrieve_topk, "recall_rank": oracles.check_recall_rank,
              "counter_viewers": oracles.check_counter_viewers, "synonyms": oracles.check_synonym_ranking}
    got = {k: sum(f(rng) for _ in range(ORACLE_INSTANCES)) for k, f in checks.items()}
    ok = all(v == ORACLE_INSTANCES for v in got.values())
    assert verdict(2, ok, ", ".join(f"{k} {v}/{ORACLE_INSTANCES}" for k, v in got.items()))


# --- 3: surrogate ---------------------------------------------------------------------


def test_criterion_3_surrogate(bench, verdict):
    trained, untrained, ratios = [], [], []
    for res, _ in bench.values():
        lab = res.lab
        c = lab.config.surrogate
        r = lab.blackbox.evaluation_retriever
        init = DualEncoder.create(lab.store.vocab, c.dim, c.seed, c.shared_tables)
        trained.append(agreement(lab.surrogate, r.encoder, r.index, lab.evaluation, 10))
        untrained.append(agreement(init, r.encoder, r.index, lab.evaluation, 10))
        ratios.append(lab.surrogate_trace[-1] / lab.surrogate_trace[0])
    a, u, lr = np.mean(trained), np.mean(untrained), np.mean(ratios)
    ok = a >= 2 * u and lr < 0.5
    assert verdict(3, ok, f"agreement@10 trained {a:.3f} vs untrained {u:.3f} ({a / u:.1f}x); "
                          f"final/first loss {lr:.3f}")


# --- 4, 5, 6: ordinal findings ---------------------------------------------------------


def test_criterion_4_effectiveness(bench, verdict):
    s = {m: _srr(bench, m, "mixture") for m in ("mcara", "ts", "tfidf", "mcara-single")}
    nrs = _mean(bench, "mcara", "mixture", lambda r: r.nrs)
    parts = {"mcara>=ts": s["mcara"] >= s["ts"], "ts>=tfidf": s["ts"] >= s["tfidf"],
             "mcara>single": s["mcara"] > s["mcara-single"], "nrs>0": nrs > 0}
    detail = (" ".join(f"{m} {v:.2f}" for m, v in s.items()) + f"; mcara NRS {nrs:.2f}; "
              + " ".join(f"{k}={'ok' if v else 'NO'}" for k, v in parts.items()))
    assert verdict(4, all(parts.values()), f"mixture SRR@K {detail}")


def test_criterion_5_difficulty(bench, verdict):
    e, m, h = (_srr(bench, "mcara", s) for s in ("easy", "middle", "hard"))
    assert verdict(5, e >= m >= h, f"mcara SRR@K easy {e:.2f} >= middle {m:.2f} >= hard {h:.2f}")


def test_criterion_6_naturalness(bench, verdict):
    det = {t: (_mean(bench, "ts", "mixture", lambda r: r.detection[t]),
               _mean(bench, "mcara", "mixture", lambda r: r.detection[t])) for t in THRESHOLDS}
    ppl_ts = _mean(bench, "ts", "mixture", lambda r: r.perplexity)
    ppl_mc = _mean(bench, "mcara", "mixture", lambda r: r.perplexity)
    ok = all(a > b for a, b in det.values()) and ppl_mc < ppl_ts
    detail = " ".join(f">{t:g}: ts {a:.1f} mcara {b:.1f};" for t, (a, b) in det.items())
    assert verdict(6, ok, f"mixture detection % {detail} PPL ts {ppl_ts:.1f} mcara {ppl_mc:.1f}")


# --- 7, 8: compliance and determinism ---------------------------------------------------


def test_criterion_7_constraints(bench, verdict):
    total = bad_eps = bad_gate = bad_rank = 0
    for res, _ in bench.values():
        lab = res.lab
        cfg = lab.config.attack
        vocab = lab.store.vocab
        for (method, _), outs in res.outcomes.items():
            if not method.startswith("mcara"):
                continue
            for o in outs:
                total += 1
                bad_eps += len(o.substitutions) > cfg.epsilon
                bad_rank += o.check_final_rank > o.check_original_rank
                ids = lab.index.token_ids[lab.index.pos[o.doc_id]].copy()
                for p, old, new in o.substitutions:
                    ids[p] = vocab.index(new)
                    bad_gate += lab.lm.window_perplexity(ids, p, cfg.lm_window) > cfg.rho
    ok = total > 0 and bad_eps == bad_gate == bad_rank == 0
    assert verdict(7, ok, f"{total} mcara outcomes; over budget {bad_eps}, gate violations {bad_gate}, "
                          f"rank increases {bad_rank}")


def test_criterion_8_determinism(bench, tmp_path, verdict):
    _, first = bench[1]
    run_experiment(_config(1), tmp_path / "again")
    files = sorted(p.relative_to(first) for p in first.rglob("*.tsv")) + [Path("report.txt")]
    differ = [str(f) for f in files if (first / f).read_bytes() != (tmp_path / "again" / f).read_bytes()]
    assert verdict(8, not differ, f"{len(files)} files compared, differing: {differ or 'none'}")


# --- 9, 10: ablation and clustering -------------------------------------------------------


def test_criterion_9_viewer_ablation(bench, verdict):
    interior = 0
    lines = []
    for seed, (res, _) in bench.items():
        lab = res.lab
        n0 = lab.config.attack.n
        K = lab.blackbox.K
        targets = res.targets["mixture"]
        srr = {n0: srr_at_k(res.outcomes["mcara", "mixture"], K)}
        for n in (1, 4 * n0):
            cfg = dataclasses.replace(lab.config.attack, n=n)
            srr[n] = srr_at_k(run_attacks(lab, "mcara", targets, cfg), K)
        best = max(srr.values())
        inner = srr[n0] == best and srr[n0] > srr[1] and srr[n0] > srr[4 * n0]
        interior += inner
        lines.append(f"seed {seed}: " + " ".join(f"n={n} {srr[n]:.1f}" for n in sorted(srr)))
    assert verdict(9, interior >= 2, f"interior maximum on {interior}/3 seeds; " + "; ".join(lines))


def test_criterion_10_kmeans(bench, kmeans_calls, verdict):
    # violations raise inside the attacks, so reaching here means every clustering passed
    assert verdict(10, len(kmeans_calls) > 0, f"{len(kmeans_calls)} clusterings checked inline")
