from pathlib import Path

import numpy as np
import pytest

from splitnn.data import CLASSIFICATION, REGRESSION, Dataset

DATA_DIR = Path(__file__).resolve().parent.parent / "data"


@pytest.fixture(scope="session")
def data_dir():
    return DATA_DIR


def make_dataset(n=60, d=6, missing=0.15, task=CLASSIFICATION, seed=0, name="synthetic"):
    """Random dataset with correlated column pairs and a learnable label."""
    rng = np.random.default_rng(seed)
    base = rng.standard_normal((n, d // 2))
    noise = rng.standard_normal((n, d)) * 0.3
    features = np.repeat(base, 2, axis=1)[:, :d] + noise
    mask = rng.random((n, d)) >= missing
    # keep every column at least half observed
    for j in range(d):
        if mask[:, j].sum() < n // 2:
            mask[: n // 2, j] = True
    score = features[:, 0] - 0.5 * features[:, min(2, d - 1)]
    if task == CLASSIFICATION:
        labels = (score > np.median(score)).astype(np.int64)
        num_classes = 2
    else:
        labels = score + 0.05 * rng.standard_normal(n)
        num_classes = 0
    values = np.where(mask, features, np.nan)
    return Dataset(
        name=name,
        features=values,
        mask=mask,
        labels=labels,
        feature_names=tuple(f"f{j}" for j in range(d)),
        task=task,
        num_classes=num_classes,
    )


@pytest.fixture
def small_classification():
    return make_dataset(n=80, d=6, task=CLASSIFICATION, seed=3)


@pytest.fixture
def small_regression():
    return make_dataset(n=80, d=6, task=REGRESSION, seed=4)
