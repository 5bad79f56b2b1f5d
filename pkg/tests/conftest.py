import numpy as np
import pytest

from vilhub.data import GeneratorConfig, generate_synthetic_dataset, split_dataset
from vilhub.embed import synth_embeddings


@pytest.fixture(scope="session")
def small_cfg():
    return GeneratorConfig(n_shape_classes=4, n_part_classes=8, n_material_classes=5,
                           shapes_total=40, points_per_shape=128, zipf_exponent=1.0, seed=3)


@pytest.fixture(scope="session")
def small_ds(small_cfg):
    return split_dataset(generate_synthetic_dataset(small_cfg), (0.7, 0.1, 0.2), 3)


@pytest.fixture(scope="session")
def small_emb(small_ds):
    return {"part": synth_embeddings(small_ds.part_vocab, 16, 0),
            "mat": synth_embeddings(small_ds.material_vocab, 16, 0)}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from oracles import VERDICTS
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS):
            terminalreporter.write_line(line)
