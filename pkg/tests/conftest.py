import os
from pathlib import Path

import numpy as np
import pytest

from honeymodel.nn import AFFINE, RELU, SOFTMAX, Layer, Model

MNIST_CANDIDATES = [
    os.environ.get("HONEYMODEL_MNIST"),
    str(Path(__file__).resolve().parents[1] / "data" / "mnist"),
    "/root/data/mnist",
]
MNIST_NAMES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
               "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def find_mnist():
    for cand in MNIST_CANDIDATES:
        if cand and all((Path(cand) / n).is_file() for n in MNIST_NAMES):
            return Path(cand)
    return None


@pytest.fixture(scope="session")
def mnist_dir():
    path = find_mnist()
    if path is None:
        pytest.skip("MNIST IDX files not found; set HONEYMODEL_MNIST")
    return path


@pytest.fixture(scope="session")
def mnist(mnist_dir):
    from honeymodel.data import load_idx
    train = load_idx(mnist_dir / MNIST_NAMES[0], mnist_dir / MNIST_NAMES[1])
    test = load_idx(mnist_dir / MNIST_NAMES[2], mnist_dir / MNIST_NAMES[3])
    return train, test


@pytest.fixture(scope="session")
def mnist_baseline(mnist):
    from honeymodel.nn import TrainConfig, default_mnist_model, train_epochs
    model = default_mnist_model(seed=11)
    model, _ = train_epochs(model, mnist[0], TrainConfig(seed=11))
    return model


def linear_model(W, b):
    """Single affine layer + softmax."""
    W = np.asarray(W, dtype=np.float64)
    return Model([Layer(AFFINE, W.shape[0], W.shape[1]), Layer(SOFTMAX, W.shape[1], W.shape[1])],
                 [(W, np.asarray(b, dtype=np.float64))])


def random_model(gen, widths, scale=1.0):
    layers, params = [], []
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        layers.append(Layer(AFFINE, a, b))
        if i < len(widths) - 2:
            layers.append(Layer(RELU, b, b))
        params.append((gen.normal(scale=scale, size=(a, b)), gen.normal(scale=0.1, size=b)))
    layers.append(Layer(SOFTMAX, widths[-1], widths[-1]))
    return Model(layers, params)


# acceptance criteria append (number, passed, detail) here; printed after the run
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
