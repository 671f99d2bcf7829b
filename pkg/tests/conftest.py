import os
from pathlib import Path

import numpy as np
import pytest

REPO = Path(__file__).resolve().parent.parent
DEFAULT_MNIST = Path("/root/data/mnist")

if "WINU_DATA_DIR" not in os.environ and DEFAULT_MNIST.exists():
    os.environ["WINU_DATA_DIR"] = str(DEFAULT_MNIST)


def mnist_available() -> bool:
    d = os.environ.get("WINU_DATA_DIR")
    if not d:
        return False
    return any((Path(d) / f"train-images-idx3-ubyte{ext}").exists() for ext in ("", ".gz"))


needs_mnist = pytest.mark.skipif(not mnist_available(), reason="MNIST files not found (set WINU_DATA_DIR)")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def persistent_cache() -> Path:
    """Cache shared across test sessions so MNIST models are trained once."""
    path = Path(os.environ.get("WINU_TEST_CACHE", REPO / ".winu-cache"))
    path.mkdir(parents=True, exist_ok=True)
    return path


# one line per acceptance criterion, printed after the test summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
