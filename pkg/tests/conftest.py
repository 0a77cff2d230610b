import os
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
MNIST_DIR = ROOT / "data" / "mnist"
CONFIGS = ROOT / "configs"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist_dir():
    if not (MNIST_DIR / "t10k-labels-idx1-ubyte.gz").exists() and not (MNIST_DIR / "t10k-labels-idx1-ubyte").exists():
        pytest.fail(f"MNIST not found in {MNIST_DIR}; run scripts/fetch_mnist.sh")
    return MNIST_DIR


@pytest.fixture(scope="session")
def mnist(mnist_dir):
    from tinydl.data import load_mnist

    return load_mnist(mnist_dir, "train"), load_mnist(mnist_dir, "test")


@pytest.fixture
def configs():
    return CONFIGS


# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
