import dataclasses

import pytest

from advret.cli import main
from advret.experiment import (SURROGATE_SEED_OFFSET, ExperimentConfig, ExperimentError, build_lab,
                               parse_config, run_experiment, set_option, stage)

SMALL = """
seed = 4
num_topics = 4
docs_per_topic = 25
vocab_size = 200
queries_per_topic = 12
collection_queries = 16
eval_queries = 2
targets_per_stratum = 3
K = 5
dim = 8
epochs = 6
m = 6
n = 3
rho = 400
methods = ts,tfidf,mcara
ks = 1,5
timing = false
"""


@pytest.fixture(scope="module")
def small_config():
    return parse_config(SMALL)


def test_parse_bare_and_dotted_keys():
    c = parse_config("K = 7\nsurrogate.dim = 3\nmethods = ts, mcara\n# comment\nrho = inf\n")
    assert c.pipeline.K == c.attack.K == 7
    assert c.surrogate.dim == 3 and c.pipeline.dim != 3
    assert c.run.methods == ("ts", "mcara")
    assert c.attack.rho == float("inf")
    for bad in ("nokey = 1", "bogus.K = 1", "K = seven", "justtext"):
        with pytest.raises(ValueError):
            parse_config(bad)


def test_resolved_derives_seeds_and_shared_fields():
    c = parse_config("seed = 9\npipeline.K = 12\nn = 4\n").resolved()
    assert c.synthetic.seed == c.pipeline.seed == c.attack.seed == 9
    assert c.surrogate.seed == 9 + SURROGATE_SEED_OFFSET
    assert c.attack.K == 12 and c.attack.viewgen.n == 4
    c = parse_config("seed = 9\nsurrogate.seed = 3\n").resolved()
    assert c.surrogate.seed == 3


def test_dump_round_trips(small_config):
    c = small_config.resolved()
    back = parse_config(c.dump()).resolved()
    assert back.dump() == c.dump()
    assert dataclasses.asdict(back.attack) == dataclasses.asdict(c.attack)


def test_stage_wraps_errors():
    with pytest.raises(ExperimentError, match="stage 'x' failed: ZeroDivisionError"):
        with stage("x"):
            1 / 0


def test_too_many_held_out_queries():
    c = parse_config(SMALL)
    set_option(c, "collection_queries", "100")
    with pytest.raises(ExperimentError, match="stage 'data'"):
        build_lab(c)


def test_small_run_is_deterministic_and_reproducible_from_files(tmp_path, small_config):
    a = run_experiment(small_config, tmp_path / "a")
    b = run_experiment(parse_config(SMALL), tmp_path / "b")
    for name in ("report.txt", "targets.tsv", "config.txt", "outcomes/mcara_mixture.tsv",
                 "adversarial/ts_easy.tsv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert len(a.rows) == 3 * 4
    assert all(set(r.srr) == {1, 5} for r in a.rows)
    mix = a.targets["mixture"]
    assert len(mix) == 2 * 3
    ts = next(r for r in a.rows if r.method == "ts" and r.stratum == "easy")
    assert ts.count == 2 * 3 and ts.detection
    assert a.report == (tmp_path / "a" / "report.txt").read_text()


def test_cli_stages(tmp_path, capsys):
    cfg = tmp_path / "small.cfg"
    cfg.write_text(SMALL)
    out = tmp_path / "run"
    common = ["--config", str(cfg), "--out", str(out)]
    assert main(["gen-data", *common]) == 0
    assert (out / "data" / "docs.tsv").exists()
    assert main(["train-pipeline", *common]) == 0
    assert main(["train-surrogate", *common]) == 0
    assert "agreement@10" in capsys.readouterr().out
    assert main(["attack", *common, "--method", "ts", "--method", "mcara", "--stratum", "easy",
                 "--rank-check", "blackbox"]) == 0
    assert "recalled" in capsys.readouterr().out
    assert main(["report", *common]) == 0
    text = capsys.readouterr().out
    assert "SRR@5" in text and "mcara" in text and "tfidf" not in text
    assert (out / "report.txt").read_text() == text


def test_cli_errors(tmp_path, capsys):
    assert main(["report", "--out", str(tmp_path / "empty")]) == 1
    assert "error:" in capsys.readouterr().err
    assert main(["gen-data", "--out", str(tmp_path), "--set", "K=abc"]) == 1
    with pytest.raises(SystemExit):
        main(["attack", "--method", "nope"])
