import os

import numpy as np
import pytest
import scipy.sparse as sp

from admm_softmax.linalg import build_laplacian
from admm_softmax.model import Dataset, RegularizerSpec

MNIST_DIR = os.environ.get("MNIST_DIR", "/root/data/mnist")


def separable_instance(seed=0, N=200, n_raw=5, n_c=3, alpha=1e-4):
    """Linearly separable synthetic problem: labels are argmax of a planted W."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n_raw, N))
    W_true = 3.0 * rng.standard_normal((n_c, n_raw + 1))
    D = np.vstack([X, np.ones(N)])
    labels = np.argmax(W_true @ D, axis=0)
    data = Dataset(D, np.eye(n_c)[:, labels], labels, bias_appended=True)
    reg = RegularizerSpec(build_laplacian(1, n_raw, 1, True), alpha)
    return data, reg


def random_dataset(rng, n_f, n_c, N, soft=False):
    D = rng.standard_normal((n_f, N))
    labels = rng.integers(0, n_c, N)
    if soft:
        C = rng.random((n_c, N))
        C /= C.sum(axis=0)
    else:
        C = np.eye(n_c)[:, labels]
    return Dataset(D, C, labels)


def random_spd(rng, n, cond=10.0):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (Q * np.geomspace(1.0, cond, n)) @ Q.T


def dense_w_step(state, data, reg, rho):
    """Minimize rho/2 ||Z + U - W D||^2 + N alpha/2 ||L (W - Wref)^T||^2 by stacked lstsq."""
    L = reg.matrix.toarray() if sp.issparse(reg.matrix) else np.asarray(reg.matrix)
    Wref = np.zeros((data.n_classes, data.n_features)) if reg.Wref is None else reg.Wref
    s = np.sqrt(data.n_examples * reg.alpha)
    M = np.vstack([np.sqrt(rho) * data.D.T, s * L])
    rhs = np.vstack([np.sqrt(rho) * (state.Z + state.U).T, s * L @ Wref.T])
    return np.linalg.lstsq(M, rhs, rcond=None)[0].T


def mnist_paths():
    images = os.path.join(MNIST_DIR, "train-images-idx3-ubyte")
    labels = os.path.join(MNIST_DIR, "train-labels-idx1-ubyte")
    if not (os.path.exists(images) and os.path.exists(labels)):
        return None
    return images, labels


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def separable():
    return separable_instance()


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
