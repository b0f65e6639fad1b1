import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from symdefense.data import load_split, prepare_mnist_subset  # noqa: E402
from symdefense.nn import Conv2d, Dense, Flatten, MaxPool, ReLU, build_network  # noqa: E402

ROOT = Path(__file__).resolve().parent.parent
MNIST_DIR = ROOT / "data" / "mnist"


def toy_layers(classes=3, channels=2):
    return [Conv2d(channels, 3), ReLU(), MaxPool(2), Flatten(), Dense(classes)]


def random_toy(seed, shape=(1, 6, 6), classes=3, layers=None):
    rng = np.random.default_rng(seed)
    net = build_network(shape, classes, layers or toy_layers(classes), seed=seed)
    # non-zero biases so the bias gradient path is exercised
    for ps in net.params:
        if ps:
            ps[1][:] = rng.normal(0, 0.1, ps[1].shape).astype(np.float32)
    return net


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist_dir():
    if not (MNIST_DIR / "t10k-images-idx3-ubyte").exists():
        pytest.importorskip("mlxtend")
        prepare_mnist_subset(MNIST_DIR)
    return MNIST_DIR


@pytest.fixture(scope="session")
def mnist_test(mnist_dir):
    return load_split("mnist", mnist_dir, "test")


@pytest.fixture(scope="session")
def mnist_train(mnist_dir):
    return load_split("mnist", mnist_dir, "train")


# Desk-scale MNIST models shared by the slower suites.  They are trained once
# and cached under pytest's cache directory, keyed by the training config.
TRAIN_RECIPE = dict(epochs=10, batch_size=32, lr=0.01, momentum=0.9, seed=0)


@pytest.fixture(scope="session")
def trained_mnist(request, mnist_dir):
    from symdefense.harness import ExperimentConfig, train
    from symdefense.nn import load_checkpoint

    cache_dir = Path(request.config.cache.mkdir("symdefense-models"))
    loaded = {}

    def get(defense):
        if defense not in loaded:
            config = ExperimentConfig(dataset="mnist", data_dir=str(mnist_dir), defense=defense, **TRAIN_RECIPE)
            path = cache_dir / f"mnist-{defense}-{config.config_id()}.symd"
            if not path.exists():
                train(config, path)
            loaded[defense] = load_checkpoint(path)
        return loaded[defense]

    return get


# One line per acceptance criterion, echoed in the terminal summary so the
# verdicts are visible without ``-s``.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
