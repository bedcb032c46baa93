"""Shared fixtures.

Unit tests use a reduced dataset and briefly trained models so the whole
suite stays fast; the acceptance module builds the full desk pipeline
through its own session fixture in test_acceptance.py.
"""

import numpy as np
import pytest

from advpurify.data import DatasetSplit, ImageBatch, load_dataset
from advpurify.models import build_classifier, train_classifier


@pytest.fixture(scope="session")
def dataset(tmp_path_factory) -> DatasetSplit:
    root = tmp_path_factory.mktemp("dataset-cache")
    return load_dataset("mnist-like", root, seed=0)


@pytest.fixture(scope="session")
def small_split(dataset) -> DatasetSplit:
    """A reduced split (2000 train / 500 test) for fast training in tests."""
    return DatasetSplit(
        train=ImageBatch(dataset.train.pixels[:2000], dataset.train.labels[:2000]),
        test=ImageBatch(dataset.test.pixels[:500], dataset.test.labels[:500]),
        num_classes=dataset.num_classes,
        image_shape=dataset.image_shape,
    )


@pytest.fixture(scope="session")
def trained_a(small_split):
    model = build_classifier("small-cnn-a", small_split.image_shape, 10, seed=11)
    train_classifier(model, small_split, epochs=2, learning_rate=0.05, batch_size=64, seed=11)
    return model


@pytest.fixture(scope="session")
def trained_b(small_split):
    model = build_classifier("small-cnn-b", small_split.image_shape, 10, seed=22)
    train_classifier(model, small_split, epochs=2, learning_rate=0.05, batch_size=64, seed=22)
    return model


@pytest.fixture()
def probe_batch(small_split) -> ImageBatch:
    return ImageBatch(small_split.test.pixels[:64], small_split.test.labels[:64])
