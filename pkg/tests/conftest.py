import os

import numpy as np
import pytest
import torch

MNIST_DIR = os.environ.get("CRGAN_MNIST_DIR", "/root/data/mnist")

_acceptance_lines: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    _acceptance_lines.append(f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title} -- {detail}")


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_acceptance_lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def have_mnist() -> bool:
    return os.path.exists(os.path.join(MNIST_DIR, "train-images-idx3-ubyte")) or os.path.exists(
        os.path.join(MNIST_DIR, "train-images-idx3-ubyte.gz")
    )


needs_mnist = pytest.mark.skipif(not have_mnist(), reason=f"MNIST not found in {MNIST_DIR}")


@pytest.fixture(scope="session")
def mnist_train():
    from crgan.dataset import load_mnist

    if not have_mnist():
        pytest.skip(f"MNIST not found in {MNIST_DIR}")
    return load_mnist(MNIST_DIR, "train")


@pytest.fixture(scope="session")
def mnist_test():
    from crgan.dataset import load_mnist

    if not have_mnist():
        pytest.skip(f"MNIST not found in {MNIST_DIR}")
    return load_mnist(MNIST_DIR, "test")


@pytest.fixture
def synthetic_digits():
    """200 random 28x28 'digits' with labels cycling 0..9."""
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(200, 28, 28), dtype=np.uint8)
    labels = (np.arange(200) % 10).astype(np.uint8)
    return images, labels


CACHE_DIR = os.environ.get("CRGAN_CACHE_DIR", os.path.join(os.path.dirname(os.path.dirname(__file__)), ".acceptance"))


@pytest.fixture(scope="session")
def eval_oracle(mnist_train, mnist_test):
    """The digit oracle, trained once (seed 0) and cached on disk."""
    from crgan.diagnostics import load_oracle, save_oracle, train_eval_classifier

    path = os.path.join(CACHE_DIR, "oracle.ckpt")
    if os.path.exists(path):
        return load_oracle(path)
    torch.set_num_threads(1)
    oracle = train_eval_classifier(*mnist_train, *mnist_test, seed=0)
    os.makedirs(CACHE_DIR, exist_ok=True)
    save_oracle(oracle, path)
    return oracle
