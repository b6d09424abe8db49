import os
from pathlib import Path

import numpy as np
import pytest

from qsentry import data

MNIST_DIR = Path(os.environ.get("QSENTRY_MNIST_DIR", "/root/data/mnist"))


def mnist_available() -> bool:
    return all(
        (MNIST_DIR / name).exists() or (MNIST_DIR / (name + ".gz")).exists()
        for names in data.MNIST_FILES.values()
        for name in names
    )


needs_mnist = pytest.mark.skipif(not mnist_available(), reason=f"MNIST IDX files not found in {MNIST_DIR}")


@pytest.fixture(scope="session")
def mnist_dir() -> Path:
    if not mnist_available():
        pytest.skip(f"MNIST IDX files not found in {MNIST_DIR}")
    return MNIST_DIR


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
