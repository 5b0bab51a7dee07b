import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from admm_softmax.errors import DimensionMismatch, NonPositiveRho
from admm_softmax.linalg import build_laplacian
from admm_softmax.model import (
    Dataset,
    MlrHessian,
    RegularizerSpec,
    accuracy,
    logsumexp,
    misfit,
    mlr_hessian_matvec,
    mlr_objective,
    predict,
    softmax,
    zsub_objective,
)

from conftest import random_dataset


def fd_gradient(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def ridge(n_f, alpha, Wref=None):
    return RegularizerSpec(sp.identity(n_f, format="csr"), alpha, Wref)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax(np.zeros(10)), 0.1, rtol=1e-15)

    def test_analytic(self):
        s = softmax(np.log([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(s, [1 / 6, 2 / 6, 3 / 6], rtol=1e-14)

    def test_shift_invariance_bitwise_on_integers(self, rng):
        x = rng.integers(-20, 20, 8).astype(float)
        np.testing.assert_array_equal(softmax(x), softmax(x + 7.0))

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), shift=st.floats(-50, 50))
    def test_shift_invariance_tolerance(self, seed, shift):
        x = np.random.default_rng(seed).standard_normal(10) * 5
        np.testing.assert_allclose(softmax(x), softmax(x + shift), rtol=1e-12, atol=1e-300)

    def test_no_overflow(self):
        s = softmax(np.array([1000.0, 0.0, -1000.0]))
        assert np.all(np.isfinite(s))
        assert s[0] == 1.0

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_simplex(self, seed):
        x = np.random.default_rng(seed).standard_normal((7, 5)) * 30
        s = softmax(x)
        assert np.all(s >= 0)
        np.testing.assert_allclose(s.sum(axis=0), 1.0, atol=1e-12)

    def test_logsumexp_matches_naive(self, rng):
        x = rng.standard_normal((4, 6))
        np.testing.assert_allclose(logsumexp(x), np.log(np.exp(x).sum(axis=0)), rtol=1e-14)


class TestDataset:
    def test_rejects_non_simplex(self):
        with pytest.raises(ValueError):
            Dataset(np.ones((2, 2)), np.array([[0.5, 1.0], [0.6, 0.0]]), [0, 0])

    def test_rejects_bad_bias(self):
        with pytest.raises(ValueError):
            Dataset(np.array([[1.0], [2.0]]), np.ones((1, 1)), [0], bias_appended=True)

    def test_count_mismatch(self):
        with pytest.raises(DimensionMismatch):
            Dataset(np.ones((2, 3)), np.ones((1, 2)), [0, 0])

    def test_soft_labels_allowed(self, rng):
        data = random_dataset(rng, 3, 4, 5, soft=True)
        assert data.n_classes == 4


class TestMlrObjective:
    def test_uniform_prediction(self, rng):
        data = random_dataset(rng, 4, 10, 12)
        loss, _ = mlr_objective(np.zeros((10, 4)), data, ridge(4, 0.0))
        np.testing.assert_allclose(loss, np.log(10), rtol=1e-14)

    def test_single_example_gradient_formula(self, rng):
        for _ in range(20):
            data = random_dataset(rng, 5, 4, 1)
            W = rng.standard_normal((4, 5))
            _, g = mlr_objective(W, data, ridge(5, 0.0))
            d, c = data.D[:, 0], data.C[:, 0]
            expected = np.outer(softmax(W @ d) - c, d)
            np.testing.assert_allclose(g, expected, rtol=1e-12, atol=1e-14)
            fd = fd_gradient(lambda X: mlr_objective(X, data, ridge(5, 0.0))[0], W)
            assert rel_err(g, fd) <= 1e-6

    def test_regularizer_only_gradient(self, rng):
        n_f, n_c = 6, 3
        L = build_laplacian(1, 5, 1, True)
        Lm = L.matrix.toarray()
        W = rng.standard_normal((n_c, n_f))
        Wref = rng.standard_normal((n_c, n_f))
        d = rng.standard_normal((n_f, 1))
        c = softmax(W @ d)
        data = Dataset(d, c, [0])
        reg = RegularizerSpec(L, 0.3, Wref)
        _, g = mlr_objective(W, data, reg)
        expected = 0.3 * (Lm.T @ Lm @ (W - Wref).T).T
        np.testing.assert_allclose(g, expected, rtol=1e-10, atol=1e-12)

    def test_value_formula(self, rng):
        data = random_dataset(rng, 4, 3, 9, soft=True)
        L = build_laplacian(2, 2)
        W = rng.standard_normal((3, 4))
        loss, _ = mlr_objective(W, data, RegularizerSpec(L, 0.7))
        Y = W @ data.D
        naive = np.mean([-data.C[:, j] @ Y[:, j] + np.log(np.exp(Y[:, j]).sum())
                         for j in range(9)])
        naive += 0.35 * np.linalg.norm(L.matrix.toarray() @ W.T) ** 2
        np.testing.assert_allclose(loss, naive, rtol=1e-13)

    def test_gradient_fd_with_laplacian(self, rng):
        data = random_dataset(rng, 9, 4, 15, soft=True)
        reg = RegularizerSpec(build_laplacian(3, 3), 0.05, rng.standard_normal((4, 9)))
        W = rng.standard_normal((4, 9))
        _, g = mlr_objective(W, data, reg)
        fd = fd_gradient(lambda X: mlr_objective(X, data, reg)[0], W)
        assert rel_err(g, fd) <= 1e-6

    def test_dimension_mismatch(self, rng):
        data = random_dataset(rng, 4, 3, 5)
        with pytest.raises(DimensionMismatch):
            mlr_objective(np.zeros((3, 5)), data, ridge(4, 0.0))
        with pytest.raises(DimensionMismatch):
            mlr_objective(np.zeros((3, 4)), data, ridge(5, 0.0))

    def test_convex_along_lines(self, rng):
        data = random_dataset(rng, 5, 4, 20)
        reg = ridge(5, 1e-2)
        f = lambda X: mlr_objective(X, data, reg)[0]
        for _ in range(100):
            W1, W2 = rng.standard_normal((2, 4, 5)) * 2
            t = rng.random()
            assert f(t * W1 + (1 - t) * W2) <= t * f(W1) + (1 - t) * f(W2) + 1e-10


class TestHessian:
    def test_zero_direction(self, rng):
        data = random_dataset(rng, 5, 3, 10)
        W = rng.standard_normal((3, 5))
        np.testing.assert_array_equal(mlr_hessian_matvec(W, data, ridge(5, 0.1), np.zeros((3, 5))), 0.0)

    def test_fd_of_gradient(self, rng):
        data = random_dataset(rng, 6, 4, 12, soft=True)
        reg = RegularizerSpec(build_laplacian(2, 3), 0.2)
        W = rng.standard_normal((4, 6))
        V = rng.standard_normal((4, 6))
        h = 1e-5
        fd = (mlr_objective(W + h * V, data, reg)[1] - mlr_objective(W - h * V, data, reg)[1]) / (2 * h)
        assert rel_err(mlr_hessian_matvec(W, data, reg, V), fd) <= 1e-5

    def test_symmetric_bilinear(self, rng):
        data = random_dataset(rng, 6, 4, 12)
        H = MlrHessian(rng.standard_normal((4, 6)), data, RegularizerSpec(build_laplacian(2, 3), 0.2))
        V1, V2 = rng.standard_normal((2, 4, 6))
        a, b = np.vdot(V1, H(V2)), np.vdot(V2, H(V1))
        assert abs(a - b) <= 1e-10 * max(abs(a), abs(b))

    def test_regularizer_dominated(self, rng):
        L = build_laplacian(1, 5, 1, True)
        Lm = L.matrix.toarray()
        W = rng.standard_normal((3, 6))
        d = rng.standard_normal((6, 1))
        data = Dataset(d, softmax(W @ d), [0])
        V = rng.standard_normal((3, 6))
        alpha = 1e6
        HV = mlr_hessian_matvec(W, data, RegularizerSpec(L, alpha), V)
        expected = alpha * (Lm @ Lm.T @ V.T).T
        assert rel_err(HV, expected) <= 1e-5

    def test_diagonal_matches_dense(self, rng):
        data = random_dataset(rng, 4, 3, 7)
        reg = RegularizerSpec(build_laplacian(2, 2), 0.3)
        H = MlrHessian(rng.standard_normal((3, 4)), data, reg)
        dense = np.array([H(E.reshape(3, 4)).ravel() for E in np.eye(12)])
        np.testing.assert_allclose(H.diagonal().ravel(), np.diag(dense), rtol=1e-12, atol=1e-14)


class TestZsub:
    def test_uniform_label_zero_gradient(self):
        _, g, _ = zsub_objective(np.zeros(5), np.full(5, 0.2), np.zeros(5), 0.5)
        np.testing.assert_array_equal(g, 0.0)

    def test_value_formula(self, rng):
        z, zref = rng.standard_normal((2, 4))
        c = np.eye(4)[1]
        v, _, _ = zsub_objective(z, c, zref, 0.3)
        np.testing.assert_allclose(v, -z[1] + np.log(np.exp(z).sum()) + 0.15 * np.sum((z - zref) ** 2),
                                   rtol=1e-14)

    def test_fd_gradient_and_hessian(self, rng):
        for _ in range(10):
            z, zref = rng.standard_normal((2, 10)) * 2
            c = softmax(rng.standard_normal(10))
            rho = 10 ** rng.uniform(-3, 1)
            _, g, H = zsub_objective(z, c, zref, rho)
            assert rel_err(g, fd_gradient(lambda x: zsub_objective(x, c, zref, rho)[0], z)) <= 1e-6
            Hfd = np.array([fd_gradient(lambda x: zsub_objective(x, c, zref, rho)[1][i], z)
                            for i in range(10)])
            assert rel_err(H, Hfd) <= 1e-6

    def test_hessian_floor(self, rng):
        for _ in range(50):
            z = rng.standard_normal(8) * 3
            rho = 10 ** rng.uniform(-4, 2)
            _, _, H = zsub_objective(z, np.eye(8)[0], np.zeros(8), rho)
            assert np.linalg.eigvalsh(H).min() >= rho - 1e-12

    def test_penalty_dominated_minimizer(self, rng):
        zref = rng.standard_normal(4)
        c = np.eye(4)[2]
        z = np.zeros(4)
        for _ in range(5):
            _, g, H = zsub_objective(z, c, zref, 1e8)
            z = z - np.linalg.solve(H, g)
        np.testing.assert_allclose(z, zref, atol=1e-6)

    def test_nonpositive_rho(self):
        with pytest.raises(NonPositiveRho):
            zsub_objective(np.zeros(3), np.eye(3)[0], np.zeros(3), 0.0)


class TestAccuracy:
    def test_zero_weights_pick_class_zero(self, rng):
        data = random_dataset(rng, 3, 4, 40)
        assert accuracy(np.zeros((4, 3)), data) == np.mean(data.labels == 0)

    def test_perfect(self):
        labels = np.array([0, 2, 1, 2])
        C = np.eye(3)[:, labels]
        data = Dataset(C.copy(), C, labels)
        assert accuracy(np.eye(3), data) == 1.0

    def test_matches_loop(self, rng):
        data = random_dataset(rng, 5, 6, 50)
        W = rng.standard_normal((6, 5))
        hits = 0
        for j in range(50):
            scores = list(W @ data.D[:, j])
            hits += scores.index(max(scores)) == data.labels[j]
        assert accuracy(W, data) == hits / 50

    def test_logits_and_probabilities_agree(self, rng):
        D = rng.standard_normal((5, 30))
        W = rng.standard_normal((4, 5))
        np.testing.assert_array_equal(predict(W, D), np.argmax(softmax(W @ D), axis=0))

    def test_empty(self, rng):
        data = random_dataset(rng, 3, 2, 4).empty_like()
        assert np.isnan(accuracy(np.zeros((2, 3)), data))
        assert np.isnan(misfit(np.zeros((2, 3)), data))
