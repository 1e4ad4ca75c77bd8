import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_CANDIDATES = ("data/mnist", "/root/data/mnist")


def mnist_dir():
    """Directory holding the four MNIST IDX files: $CNNINTE_MNIST_DIR, ./data/mnist or /root/data/mnist."""
    env = os.environ.get("CNNINTE_MNIST_DIR")
    for cand in ([env] if env else []) + [str(Path(__file__).parents[1] / c) for c in _CANDIDATES[:1]] + list(_CANDIDATES[1:]):
        if cand and (Path(cand) / "train-images-idx3-ubyte").exists():
            return Path(cand)
    return None


@pytest.fixture(scope="session")
def mnist():
    d = mnist_dir()
    if d is None:
        pytest.skip("MNIST files not available (set CNNINTE_MNIST_DIR)")
    from cnninte.dataset import load_mnist
    return load_mnist(d)


@pytest.fixture(scope="session")
def small_run(mnist):
    """A cheap but real ensemble: 600 MNIST images, 16 random-ReLU 'neurons', K=3, C=4."""
    import numpy as np
    from cnninte.cnn import ActivationMatrix
    from cnninte.meta import EnsembleConfig, build_meta_test, train_ensemble

    train, test = mnist[0].head(600), mnist[1].head(200)
    w = np.random.default_rng(0).normal(size=(16, 784)) / 10

    def acts(ds):
        return ActivationMatrix(np.maximum(w @ ds.flat().T.astype(np.float64) - 0.5, 0), ds.labels)

    a_train = acts(train)
    ens = train_ensemble(a_train, train, EnsembleConfig(n_factors=3, n_clusters=4, n_trees=4, seed=1))
    return {"train": train, "test": test, "acts": a_train, "acts_fn": acts, "ensemble": ens,
            "meta_test": build_meta_test(ens, test)}


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
