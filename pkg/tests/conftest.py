import numpy as np
import pytest

from attriweight.dataset import generate_gaussian_classes
from attriweight.model import TrainConfig, make_spec, train

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def blobs():
    return generate_gaussian_classes(3, 60, 5, 3.0, 4)


@pytest.fixture(scope="session")
def small_mlp(blobs):
    spec = make_spec("Mlp1", blobs.dim, blobs.num_classes, hidden=6, hidden_col_blocks=2, distractor_dim=4, distractor_seed=2)
    return train(blobs, blobs.ids, spec, TrainConfig(epochs=5, lr=0.1, batch_size=16, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
