from pathlib import Path

import numpy as np
import pytest

from unrank.data import InteractionDataset, build_dataset, load_interactions
from unrank.models import ModelParams

TOY = Path(__file__).resolve().parents[1] / "src" / "unrank" / "datasets" / "toy50.tsv"
ML100K = Path(__file__).resolve().parents[1] / "data" / "ml-100k" / "u.data"


def small_dataset(train, n_users=None, n_items=None):
    train = np.asarray(train, dtype=np.int64)
    n_users = n_users or int(train[:, 0].max()) + 1
    n_items = n_items or int(train[:, 1].max()) + 1
    return InteractionDataset(n_users, n_items, train, np.empty((0, 2)), np.empty((0, 2)))


def random_params(n_users, n_items, dim, seed=0, backbone="mf", n_layers=0, scale=0.7):
    rng = np.random.default_rng(seed)
    return ModelParams(
        rng.normal(0, scale, (n_users, dim)),
        rng.normal(0, scale, (n_items, dim)),
        backbone,
        n_layers,
    )


@pytest.fixture(scope="session")
def toy_path():
    return TOY


@pytest.fixture(scope="session")
def toy_ds():
    return build_dataset(load_interactions(TOY), seed=0)


@pytest.fixture
def tiny_ds():
    # 3 users x 4 items
    return small_dataset([[0, 0], [0, 1], [1, 1], [1, 2], [2, 2], [2, 3], [0, 3]], 3, 4)


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
