"""Shared builders for the maskproof test suite.

Sizes stay tiny (8 rows, 2 features, minibatches of 4) because every proof
re-runs its circuit in pure Python.
"""
from pathlib import Path

import numpy as np
import pytest

from maskproof.config import Settings
from maskproof.ingestion import synthetic_classification, synthetic_regression
from maskproof.protocol import DataOwner, Trainer

GOLDEN = Path(__file__).parent / "golden"


def make_settings(tmp_path: Path, **overrides) -> Settings:
    values = dict(features=2, batch_size=4, learning_rate=0.1, seed=7, workdir=tmp_path,
                  vault_secret="test-vault-secret")
    values.update(overrides)
    return Settings(**values)


def make_owners(dataset, secret: bytes = b"owners:test"):
    return [DataOwner(entry.owner_id, dataset.rows(entry.start, entry.stop), secret) for entry in dataset.owners]


def start_session(settings: Settings, dataset):
    trainer = Trainer(settings)
    owners = make_owners(dataset)
    trainer.init_session(owners)
    return trainer, {o.owner_id: o for o in owners}


@pytest.fixture
def regression_data():
    return synthetic_regression(8, 2, seed=3, n_owners=2)


@pytest.fixture
def classification_data():
    return synthetic_classification(8, 2, 2, seed=5, n_owners=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def lr_session(tmp_path, regression_data):
    """Trainer with two owners of four rows each, no rounds run yet"""
    return start_session(make_settings(tmp_path), regression_data)
