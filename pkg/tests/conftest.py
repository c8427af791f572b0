import numpy as np
import pytest

from advret.attack import AttackContext
from advret.corpus import Store, SyntheticSpec, generate_synthetic
from advret.experiment import build_lm
from advret.pipeline import PipelineConfig, train_pipeline
from advret.surrogate import SurrogateConfig, build_imitation_dataset, train_surrogate

TINY = SyntheticSpec(num_topics=4, docs_per_topic=25, vocab_size=200, doc_length=(15, 30),
                     queries_per_topic=12, seed=7)


@pytest.fixture(scope="session")
def tiny_data():
    return generate_synthetic(TINY)


@pytest.fixture(scope="session")
def tiny_store(tiny_data):
    return Store.from_synthetic(tiny_data)


@pytest.fixture(scope="session")
def tiny_bb(tiny_store):
    qs = tiny_store.queries
    return train_pipeline(tiny_store, qs[:24], PipelineConfig(dim=8, K=5, epochs=10, seed=3))


@pytest.fixture(scope="session")
def tiny_surrogate(tiny_store, tiny_bb):
    ds = build_imitation_dataset(tiny_store.queries[24:40], tiny_bb, 1)
    enc, _ = train_surrogate(ds, tiny_bb.evaluation_retriever.index,
                             SurrogateConfig(dim=8, epochs=10, seed=11))
    return enc


@pytest.fixture(scope="session")
def tiny_ctx(tiny_store, tiny_bb, tiny_surrogate):
    return AttackContext(tiny_surrogate, tiny_bb.evaluation_retriever.index, tiny_bb,
                         build_lm(tiny_store), judge=tiny_bb.evaluation_retriever)


VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record a ``criterion N: PASS|FAIL`` line, echoed in the terminal summary."""
    lines = request.config.stash.setdefault(VERDICTS, [])

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        lines.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
