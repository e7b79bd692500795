import numpy as np
import pytest

from scd2te import boosting as B
from scd2te import csc
from scd2te.pipeline import ModelConfig, train
from scd2te.synthetic import nuclei_corpus


ACCEPTANCE = []


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        layer_count=2, filter_sides=(5, 5), atom_counts=(4, 4), compressed_channels=(8, 8),
        context_offsets=csc.compass_offsets((2, 4)), samples_per_layer=1500,
        ensemble=B.EnsembleConfig(tree_count=4, max_depth=4),
        sparse=csc.SparseCodingConfig(dict_epochs=2, patches_per_epoch=8, max_inner_iters=8,
                                      tol=1e-3),
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def tiny_corpus():
    return nuclei_corpus(seed=5, train=2, test=1, size=48)


@pytest.fixture(scope="session")
def tiny_model(tiny_corpus):
    train_set, _ = tiny_corpus
    return train(train_set, tiny_config())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion():
    """Record one acceptance line; the assertion stays in the test."""
    def record(name: str, ok: bool, detail: str = ""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}  {detail}".rstrip()
        ACCEPTANCE.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
