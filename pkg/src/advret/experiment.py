"""End-to-end experiment runner: data, black box, surrogate, targets, attacks, report.

Config files are flat ``key = value`` text. A bare key sets that field on
every section that has it (``K``, ``dim``, ``learning_rate``, ...); a dotted
key such as ``surrogate.learning_rate`` sets one section only. ``seed`` is the
master seed from which every section seed is derived unless set explicitly.
"""

from __future__ import annotations

import contextlib
import dataclasses
import logging
import typing
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .attack import (AttackConfig, AttackContext, AttackOutcome, attack_mcara, attack_ts,
                     baseline_tfidf, pair_seed, read_outcome_log, write_outcome_log)
from .corpus import Store, SyntheticSpec, TextRecord, generate_synthetic, load_store, save_store
from .encoder import DualEncoder
from .evaluation import (STRATA, MetricReport, Target, default_strata, format_report, load_adversarial,
                         sample_targets, save_adversarial, summarize)
from .lm import BigramLM
from .multiview import ViewGenConfig
from .pipeline import (BlackBox, CorpusIndex, PipelineConfig, load_blackbox, load_encoder, save_blackbox,
                       save_encoder, train_pipeline)
from .surrogate import (SurrogateConfig, agreement, build_imitation_dataset, save_dataset,
                        train_surrogate)

logger = logging.getLogger(__name__)

METHODS = ("ts", "tfidf", "mcara", "mcara-single", "mcara-ind")
_MODE = {"mcara": "mcara", "mcara-single": "single", "mcara-ind": "ind"}
SURROGATE_SEED_OFFSET = 2000


class ExperimentError(RuntimeError):
    """A stage of the experiment failed; the message names the stage."""


@dataclass
class RunSettings:
    methods: tuple[str, ...] = ("ts", "tfidf", "mcara")
    strata: tuple[str, ...] = STRATA
    collection_queries: int = 200
    eval_queries: int = 50
    targets_per_stratum: int = 10
    ks: tuple[int, ...] = (5, 10, 20)
    timing: bool = True
    white_box: bool = False
    workers: int = 1

    def validate(self) -> None:
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; choose from {METHODS}")
        bad = [s for s in self.strata if s not in STRATA]
        if bad:
            raise ValueError(f"unknown strata {bad}; choose from {STRATA}")
        if self.collection_queries < 1 or self.eval_queries < 1:
            raise ValueError("collection_queries and eval_queries must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass
class ExperimentConfig:
    seed: int = 1
    run: RunSettings = field(default_factory=RunSettings)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    explicit: set[str] = field(default_factory=set, repr=False)

    SECTIONS = ("run", "synthetic", "pipeline", "surrogate", "attack", "viewgen")

    def section(self, name: str) -> Any:
        return self.attack.viewgen if name == "viewgen" else getattr(self, name)

    def resolved(self) -> "ExperimentConfig":
        """Copy with derived seeds filled in and shared fields made consistent."""
        c = dataclasses.replace(self, run=dataclasses.replace(self.run),
                                synthetic=dataclasses.replace(self.synthetic),
                                pipeline=dataclasses.replace(self.pipeline),
                                surrogate=dataclasses.replace(self.surrogate),
                                attack=dataclasses.replace(self.attack,
                                                           viewgen=dataclasses.replace(self.attack.viewgen)),
                                explicit=set(self.explicit))
        derived = {"synthetic": c.seed, "pipeline": c.seed, "surrogate": c.seed + SURROGATE_SEED_OFFSET,
                   "attack": c.seed, "viewgen": c.seed}
        for name, value in derived.items():
            if f"{name}.seed" not in c.explicit:
                c.section(name).seed = value
        if "attack.K" not in c.explicit:
            c.attack.K = c.pipeline.K
        if "viewgen.n" not in c.explicit:
            c.attack.viewgen.n = c.attack.n
        return c

    def dump(self) -> str:
        """Canonical ``key = value`` text that ``parse_config`` reads back."""
        lines = [f"seed = {self.seed}"]
        for name in self.SECTIONS:
            sec = self.section(name)
            for f in dataclasses.fields(sec):
                if f.name == "viewgen":
                    continue
                lines.append(f"{name}.{f.name} = {_format_value(getattr(sec, f.name))}")
        return "\n".join(lines) + "\n"


def _format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_format_value(x) for x in v)
    if v is None:
        return "none"
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(text: str, hint: Any) -> Any:
    text = text.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if text.lower() == "none":
            return None
        return _parse_value(text, next(a for a in args if a is not type(None)))
    if hint is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if hint is int:
        return int(text)
    if hint is float:
        return float(text)
    if hint is str:
        return text
    if origin is tuple:
        items = [x for x in text.split(",") if x.strip()]
        elem = args[0] if args else str
        return tuple(_parse_value(x, elem) for x in items)
    raise ValueError(f"unsupported field type {hint!r}")


def _hints(obj: Any) -> dict[str, Any]:
    return typing.get_type_hints(type(obj))


def set_option(config: ExperimentConfig, key: str, value: str) -> None:
    """Apply one ``key = value`` pair (bare or ``section.key``)."""
    if key == "seed":
        config.seed = int(value)
        return
    if "." in key:
        name, fname = key.split(".", 1)
        if name not in ExperimentConfig.SECTIONS:
            raise ValueError(f"unknown section {name!r}")
        targets = [name]
    else:
        fname = key
        targets = [n for n in ExperimentConfig.SECTIONS
                   if fname in {f.name for f in dataclasses.fields(config.section(n))} and fname != "viewgen"]
    if not targets:
        raise ValueError(f"unknown config key {key!r}")
    for name in targets:
        sec = config.section(name)
        hints = _hints(sec)
        if fname not in hints or fname == "viewgen":
            raise ValueError(f"unknown config key {key!r}")
        setattr(sec, fname, _parse_value(value, hints[fname]))
        config.explicit.add(f"{name}.{fname}")


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    config = base or ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        try:
            set_option(config, key.strip(), value)
        except ValueError as e:
            raise ValueError(f"line {lineno}: {e}") from None
    return config


def load_config(path: str | Path) -> ExperimentConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except ExperimentError:
        raise
    except Exception as e:
        raise ExperimentError(f"stage {name!r} failed: {type(e).__name__}: {e}") from e


# --- stages ------------------------------------------------------------------------


@dataclass
class Lab:
    """Everything an attack run needs, built once per config."""

    config: ExperimentConfig
    store: Store
    blackbox: BlackBox
    surrogate: DualEncoder
    train: list[TextRecord]
    collection: list[TextRecord]
    evaluation: list[TextRecord]
    lm: BigramLM
    surrogate_trace: list[float] = field(default_factory=list)

    @property
    def index(self) -> CorpusIndex:
        return self.blackbox.evaluation_retriever.index

    def context(self) -> AttackContext:
        return AttackContext(self.surrogate, self.index, self.blackbox, self.lm,
                             judge=self.blackbox.evaluation_retriever)


def split_queries(store: Store, run: RunSettings) -> tuple[list[TextRecord], list[TextRecord], list[TextRecord]]:
    """Last ``eval_queries`` evaluate, the ``collection_queries`` before them
    feed the surrogate, the rest train the target."""
    qs = list(store.queries)
    held = run.collection_queries + run.eval_queries
    if len(qs) <= held:
        raise ValueError(f"{len(qs)} queries cannot cover {held} held-out queries plus training")
    return qs[:-held], qs[-held:-run.eval_queries], qs[-run.eval_queries:]


def build_store(config: ExperimentConfig) -> Store:
    return Store.from_synthetic(generate_synthetic(config.synthetic))


def build_lm(store: Store) -> BigramLM:
    return BigramLM.train((store.vocab.encode(d.tokens) for d in store.docs), store.vocab.num_rows)


def build_surrogate(config: ExperimentConfig, store: Store, blackbox: BlackBox,
                    collection: Sequence[TextRecord]) -> tuple[DualEncoder, list[float]]:
    if config.run.white_box:
        return blackbox.evaluation_retriever.encoder, []
    ds = build_imitation_dataset(collection, blackbox, config.surrogate.ell)
    return train_surrogate(ds, blackbox.evaluation_retriever.index, config.surrogate)


def build_lab(config: ExperimentConfig, store: Store | None = None) -> Lab:
    config = config.resolved()
    config.run.validate()
    with stage("data"):
        store = store or build_store(config)
        train, coll, ev = split_queries(store, config.run)
    with stage("pipeline"):
        bb = train_pipeline(store, train, config.pipeline)
    with stage("surrogate"):
        sur, trace = build_surrogate(config, store, bb, coll)
    with stage("lm"):
        lm = build_lm(store)
    return Lab(config, store, bb, sur, train, coll, ev, lm, trace)


def attack_one(method: str, target: Target, ctx: AttackContext, config: AttackConfig) -> AttackOutcome:
    q, d = target.query, target.doc_pos
    if method == "ts":
        return attack_ts(q, d, ctx, config.m, pair_seed(config.seed, q.id, d))
    if method == "tfidf":
        return baseline_tfidf(q, d, ctx, config.m)
    return attack_mcara(q, d, ctx, dataclasses.replace(config, mode=_MODE[method]))


def run_attacks(lab: Lab, method: str, targets: Sequence[Target], config: AttackConfig | None = None,
                workers: int | None = None, timing: bool | None = None) -> list[AttackOutcome]:
    """Attack every target; outcomes come back in target order."""
    config = config or lab.config.attack
    workers = workers or lab.config.run.workers
    timing = lab.config.run.timing if timing is None else timing
    ctx = lab.context()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            outs = list(pool.map(lambda t: attack_one(method, t, ctx, config), targets))
    else:
        outs = [attack_one(method, t, ctx, config) for t in targets]
    if not timing:
        outs = [dataclasses.replace(o, seconds=0.0) for o in outs]
    return outs


def lab_targets(lab: Lab) -> dict[str, list[Target]]:
    run = lab.config.run
    strata = default_strata(lab.blackbox.K, run.targets_per_stratum)
    return sample_targets(lab.evaluation, lab.blackbox.evaluation_retriever, lab.blackbox.K,
                          lab.config.seed, strata, run.targets_per_stratum)


def save_targets(targets: dict[str, list[Target]], index: CorpusIndex, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for label, ts in targets.items():
            for t in ts:
                fh.write(f"{label}\t{t.query.id}\t{index.doc_ids[t.doc_pos]}\t{t.rank}\n")


def load_targets(path: str | Path, store: Store, index: CorpusIndex) -> dict[str, list[Target]]:
    out: dict[str, list[Target]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            p = line.rstrip("\n").split("\t")
            if len(p) != 4:
                raise ValueError(f"{path}: line {lineno}: expected 4 tab-separated fields")
            q = store.queries[store.query_pos[p[1]]]
            out.setdefault(p[0], []).append(Target(q, index.pos[p[2]], int(p[3])))
    return out


def outcome_paths(out: Path, method: str, stratum: str) -> tuple[Path, Path]:
    return out / "outcomes" / f"{method}_{stratum}.tsv", out / "adversarial" / f"{method}_{stratum}.tsv"


def write_outcomes(out: Path, method: str, stratum: str, outcomes: Sequence[AttackOutcome]) -> None:
    log, adv = outcome_paths(out, method, stratum)
    log.parent.mkdir(parents=True, exist_ok=True)
    adv.parent.mkdir(parents=True, exist_ok=True)
    write_outcome_log(outcomes, log)
    save_adversarial(outcomes, adv)


def read_outcomes(out: Path, method: str, stratum: str, K: int) -> list[AttackOutcome]:
    log, adv = outcome_paths(out, method, stratum)
    outs = read_outcome_log(log, K)
    if adv.exists():
        docs = load_adversarial(adv)
        if len(docs) != len(outs):
            raise ValueError(f"{adv}: {len(docs)} rows, outcome log has {len(outs)}")
        outs = [dataclasses.replace(o, adv_tokens=toks) for o, (_, _, toks) in zip(outs, docs)]
    return outs


def build_report(out: str | Path, store: Store, K: int, ks: Sequence[int], timing: bool = True,
                 methods: Sequence[str] = METHODS, strata: Sequence[str] = STRATA,
                 lm: BigramLM | None = None) -> list[MetricReport]:
    """Report rows recomputed from the outcome logs and adversarial docs in ``out``."""
    out = Path(out)
    lm = lm or build_lm(store)
    queries = {q.id: q for q in store.queries}
    rows = []
    for method in methods:
        for stratum in strata:
            if not outcome_paths(out, method, stratum)[0].exists():
                continue
            outs = read_outcomes(out, method, stratum, K)
            rows.append(summarize(method, stratum, outs, K, [k for k in ks if k <= K], queries, lm,
                                  store.vocab, timing=timing))
    return rows


@dataclass
class ExperimentResult:
    lab: Lab
    targets: dict[str, list[Target]]
    outcomes: dict[tuple[str, str], list[AttackOutcome]]
    rows: list[MetricReport]
    report: str


def run_experiment(config: ExperimentConfig | str | Path, out: str | Path | None = None,
                   lab: Lab | None = None) -> ExperimentResult:
    """Run every configured method on every configured stratum.

    With ``out`` set, writes ``config.txt``, ``targets.tsv``, per-(method,
    stratum) outcome logs and adversarial docs, and ``report.txt``, where the
    report is recomputed from the written files.
    """
    if not isinstance(config, ExperimentConfig):
        config = load_config(config)
    lab = lab or build_lab(config)
    config = lab.config
    run = config.run
    with stage("targets"):
        targets = lab_targets(lab)
    outcomes = {}
    for method in run.methods:
        for stratum in run.strata:
            with stage(f"attack {method}/{stratum}"):
                outcomes[method, stratum] = run_attacks(lab, method, targets[stratum])
    K = lab.blackbox.K
    ks = [k for k in run.ks if k <= K]
    with stage("report"):
        if out is not None:
            out = Path(out)
            out.mkdir(parents=True, exist_ok=True)
            (out / "config.txt").write_text(config.dump(), encoding="utf-8")
            save_targets(targets, lab.index, out / "targets.tsv")
            for (method, stratum), outs in outcomes.items():
                write_outcomes(out, method, stratum, outs)
            rows = build_report(out, lab.store, K, ks, run.timing, run.methods, run.strata, lab.lm)
        else:
            queries = {q.id: q for q in lab.store.queries}
            rows = [summarize(m, s, outcomes[m, s], K, ks, queries, lab.lm, lab.store.vocab, timing=run.timing)
                    for m in run.methods for s in run.strata]
        report = format_report(rows)
        if out is not None:
            (out / "report.txt").write_text(report, encoding="utf-8")
    return ExperimentResult(lab, targets, outcomes, rows, report)


# --- on-disk stages for the command line --------------------------------------------


def stage_gen_data(config: ExperimentConfig, out: Path) -> Store:
    config = config.resolved()
    with stage("data"):
        store = build_store(config)
        save_store(store, out / "data")
        (out / "config.txt").write_text(config.dump(), encoding="utf-8")
    return store


def _load_store(config: ExperimentConfig, out: Path) -> Store:
    if (out / "data" / "docs.tsv").exists():
        return load_store(out / "data")
    return stage_gen_data(config, out)


def stage_train_pipeline(config: ExperimentConfig, out: Path) -> BlackBox:
    config = config.resolved()
    store = _load_store(config, out)
    with stage("pipeline"):
        train, _, _ = split_queries(store, config.run)
        bb = train_pipeline(store, train, config.pipeline)
        save_blackbox(bb, out / "pipeline")
    return bb


def _load_blackbox(config: ExperimentConfig, out: Path, store: Store) -> BlackBox:
    if (out / "pipeline" / "pipeline.txt").exists():
        return load_blackbox(store, out / "pipeline")
    return stage_train_pipeline(config, out)


def stage_train_surrogate(config: ExperimentConfig, out: Path) -> tuple[DualEncoder, float, float]:
    """Train and save the surrogate; returns it with untrained and trained agreement@10."""
    config = config.resolved()
    store = _load_store(config, out)
    bb = _load_blackbox(config, out, store)
    with stage("surrogate"):
        _, coll, ev = split_queries(store, config.run)
        index = bb.evaluation_retriever.index
        target = bb.evaluation_retriever.encoder
        init = DualEncoder.create(store.vocab, config.surrogate.dim, config.surrogate.seed,
                                  config.surrogate.shared_tables)
        before = agreement(init, target, index, ev, 10)
        if config.run.white_box:
            sur, trace = target, []
        else:
            ds = build_imitation_dataset(coll, bb, config.surrogate.ell)
            save_dataset(ds, out / "imitation.tsv")
            sur, trace = train_surrogate(ds, index, config.surrogate)
        save_encoder(sur, out / "surrogate")
        (out / "surrogate" / "trace.txt").write_text("".join(f"{x!r}\n" for x in trace), encoding="utf-8")
        after = agreement(sur, target, index, ev, 10)
    return sur, before, after


def load_lab(config: ExperimentConfig, out: Path) -> Lab:
    """Assemble a ``Lab`` from saved stages, building any stage that is missing."""
    config = config.resolved()
    store = _load_store(config, out)
    bb = _load_blackbox(config, out, store)
    if (out / "surrogate" / "surrogate_query.bin").exists():
        sur = load_encoder(store, out / "surrogate")
    else:
        sur = stage_train_surrogate(config, out)[0]
    train, coll, ev = split_queries(store, config.run)
    return Lab(config, store, bb, sur, train, coll, ev, build_lm(store))


def stage_attack(config: ExperimentConfig, out: Path, methods: Sequence[str],
                 strata: Sequence[str]) -> dict[tuple[str, str], list[AttackOutcome]]:
    lab = load_lab(config, out)
    with stage("targets"):
        targets = lab_targets(lab)
        save_targets(targets, lab.index, out / "targets.tsv")
    result = {}
    for method in methods:
        for stratum in strata:
            with stage(f"attack {method}/{stratum}"):
                outs = run_attacks(lab, method, targets[stratum])
                write_outcomes(out, method, stratum, outs)
                result[method, stratum] = outs
    return result


def stage_report(config: ExperimentConfig, out: Path) -> str:
    config = config.resolved()
    with stage("report"):
        store = load_store(out / "data")
        K = config.pipeline.K
        rows = build_report(out, store, K, config.run.ks, config.run.timing)
        report = format_report(rows)
        (out / "report.txt").write_text(report, encoding="utf-8")
    return report
