import numpy as np
import pytest

from lsplab import kernels
from lsplab.core import LabeledDataset, generate_synthetic_dataset, one_hot


def toy_dataset(n_per_class, num_classes=3, shape=(4, 4, 1), seed=0):
    """Cheap labelled dataset for counting/partition tests."""
    rng = np.random.default_rng(seed)
    counts = [n_per_class] * num_classes if np.isscalar(n_per_class) else list(n_per_class)
    labels = np.concatenate([np.full(c, k) for k, c in enumerate(counts)]).astype(int)
    images = rng.random((labels.size, *shape)).astype(np.float32)
    return LabeledDataset(images, one_hot(labels, num_classes), num_classes)


@pytest.fixture(scope="session")
def small_data():
    """16x16 four-class synthetic train/test pair."""
    train = generate_synthetic_dataset(4, 150, 16, 16, seed=11)
    test = generate_synthetic_dataset(4, 40, 16, 16, seed=12)
    return train, test


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    previous = kernels.backend()
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(previous)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
