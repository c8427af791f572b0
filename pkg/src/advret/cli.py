"""Command line entry point: ``advret <subcommand> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .evaluation import STRATA
from .experiment import (METHODS, ExperimentConfig, ExperimentError, load_config, set_option, stage_attack,
                         stage_gen_data, stage_report, stage_train_pipeline, stage_train_surrogate)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key=value config file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", type=Path, default=Path("run"), help="artifact directory (default: run)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="extra config override; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="advret", description="Adversarial retrieval attack laboratory.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic corpus")
    sub.add_parser("train-pipeline", parents=[common], help="train the black-box retriever and reranker")
    sub.add_parser("train-surrogate", parents=[common], help="imitate the black box with a surrogate")
    a = sub.add_parser("attack", parents=[common], help="sample targets and run attacks")
    a.add_argument("--method", choices=METHODS, action="append",
                   help="attack method; repeatable (default: the config's methods)")
    a.add_argument("--stratum", choices=STRATA, action="append",
                   help="target stratum; repeatable (default: the config's strata)")
    a.add_argument("--rank-check", choices=("surrogate", "blackbox"),
                   help="scorer for greedy acceptance")
    sub.add_parser("report", parents=[common], help="recompute the report table from outcome logs")
    return p


def _config(args: argparse.Namespace) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        config.seed = args.seed
    for kv in args.set:
        if "=" not in kv:
            raise SystemExit(f"--set expects KEY=VALUE, got {kv!r}")
        k, v = kv.split("=", 1)
        set_option(config, k.strip(), v)
    if getattr(args, "rank_check", None):
        set_option(config, "attack.rank_check", args.rank_check)
    return config


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _config(args)
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "gen-data":
            store = stage_gen_data(config, out)
            print(f"{len(store.docs)} docs, {len(store.queries)} queries, {len(store.vocab)} types -> {out / 'data'}")
        elif args.command == "train-pipeline":
            bb = stage_train_pipeline(config, out)
            print(f"black box (K={bb.K}) -> {out / 'pipeline'}")
        elif args.command == "train-surrogate":
            _, before, after = stage_train_surrogate(config, out)
            print(f"agreement@10 untrained {before:.4f} trained {after:.4f} -> {out / 'surrogate'}")
        elif args.command == "attack":
            run = config.resolved().run
            methods = args.method or list(run.methods)
            strata = args.stratum or list(run.strata)
            res = stage_attack(config, out, methods, strata)
            for (m, s), outs in res.items():
                ok = sum(o.success for o in outs)
                print(f"{m:<13}{s:<9}{ok}/{len(outs)} recalled")
        elif args.command == "report":
            sys.stdout.write(stage_report(config, out))
    except (ExperimentError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
