import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from coaltask.errors import InvalidArgumentError
from coaltask.glm import (
    TaskDataset,
    WeightPosterior,
    data_log_likelihood,
    estep_posterior,
    laplace_covariance,
    laplace_curvature,
    log_posterior_and_grad,
    map_weights,
    predict,
)
from coaltask.tree import GaussianMessage


def ridge_oracle(X, y, prior_mean, prior_var_full, rho2):
    """Closed-form Gaussian posterior mean for linear regression."""
    prec = np.linalg.inv(prior_var_full)
    lhs = X.T @ X / rho2 + prec
    rhs = X.T @ y / rho2 + prec @ prior_mean
    return np.linalg.solve(lhs, rhs)


def fd_gradient(f, w, h=1e-5):
    g = np.zeros_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (f(w + e) - f(w - e)) / (2 * h)
    return g


class TestTaskDataset:
    def test_label_remap_zero_one(self):
        d = TaskDataset("t", np.ones((3, 2)), [0, 1, 0], "classification")
        np.testing.assert_array_equal(d.labels, [-1.0, 1.0, -1.0])

    def test_rejects_bad_labels(self):
        with pytest.raises(InvalidArgumentError):
            TaskDataset("t", np.ones((2, 2)), [1, 3], "classification")

    def test_rejects_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            TaskDataset("t", np.ones((2, 2)), [1.0], "regression")

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidArgumentError):
            TaskDataset("t", np.array([[np.inf, 0.0]]), [1.0], "regression")


class TestMapWeights:
    def test_no_data_returns_prior_mean(self):
        data = TaskDataset("t", np.zeros((0, 3)), np.zeros(0), "regression")
        prior = GaussianMessage(np.array([1.0, -2.0, 0.5]), np.eye(3))
        np.testing.assert_allclose(map_weights(data, prior), prior.mean)

    def test_ridge_single_point(self):
        # prior N(0,1), rho2=1, one example (x=1, y=1): w = (1 + 1)^-1 (1) = 0.5
        data = TaskDataset("t", np.array([[1.0]]), np.array([1.0]), "regression")
        prior = GaussianMessage(np.zeros(1), np.ones(1))
        w = map_weights(data, prior, 1.0)
        assert w[0] == pytest.approx(0.5, abs=1e-8)

    @pytest.mark.parametrize("seed", range(6))
    def test_regression_matches_closed_form(self, seed):
        rng = np.random.default_rng(seed)
        n, d = 20, 4
        X = rng.standard_normal((n, d))
        y = rng.standard_normal(n)
        a = rng.standard_normal((d, d))
        prior_var = a @ a.T / d + 0.3 * np.eye(d)
        prior_mean = rng.standard_normal(d)
        rho2 = 0.7
        data = TaskDataset("t", X, y, "regression")
        w = map_weights(data, GaussianMessage(prior_mean, prior_var), rho2)
        want = ridge_oracle(X, y, prior_mean, prior_var, rho2)
        np.testing.assert_allclose(w, want, atol=1e-8)

    def test_classification_symmetric_1d(self):
        X = np.array([[1.0], [-1.0], [1.0], [-1.0]])
        y = np.array([1.0, -1.0, 1.0, -1.0])
        data = TaskDataset("t", X, y, "classification")
        prior = GaussianMessage(np.zeros(1), np.ones(1))
        w = map_weights(data, prior)
        assert w[0] > 0
        _, grad = log_posterior_and_grad(w, data, prior)
        assert np.max(np.abs(grad)) < 1e-6
        # independent 1-D maximization
        res = minimize_scalar(
            lambda s: -log_posterior_and_grad(np.array([s]), data, prior)[0],
            bounds=(-5, 5), method="bounded",
            options={"xatol": 1e-10},
        )
        assert w[0] == pytest.approx(res.x, abs=1e-6)

    def test_gradient_zero_at_optimum_classification(self):
        rng = np.random.default_rng(12)
        for _ in range(5):
            n, d = 30, 3
            X = rng.standard_normal((n, d))
            y = np.sign(X @ rng.standard_normal(d) + 0.3 * rng.standard_normal(n))
            y[y == 0] = 1.0
            data = TaskDataset("t", X, y, "classification")
            prior = GaussianMessage(np.zeros(d), 2.0 * np.eye(d))
            w = map_weights(data, prior)
            _, grad = log_posterior_and_grad(w, data, prior)
            assert np.max(np.abs(grad)) < 1e-6

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(23)
        for kind in ("regression", "classification"):
            for _ in range(20):
                n, d = 12, 3
                X = rng.standard_normal((n, d))
                if kind == "regression":
                    y = rng.standard_normal(n)
                else:
                    y = rng.choice([-1.0, 1.0], size=n)
                data = TaskDataset("t", X, y, kind)
                prior = GaussianMessage(rng.standard_normal(d), 1.5 * np.eye(d))
                w = rng.standard_normal(d)
                _, grad = log_posterior_and_grad(w, data, prior, 0.8)
                fd = fd_gradient(lambda v: log_posterior_and_grad(v, data, prior, 0.8)[0], w)
                assert np.max(np.abs(grad - fd)) / max(1.0, np.max(np.abs(fd))) < 1e-4

    def test_rejects_singular_prior(self):
        data = TaskDataset("t", np.ones((1, 2)), np.ones(1), "regression")
        prior = GaussianMessage(np.zeros(2), np.zeros((2, 2)))
        with pytest.raises(Exception):
            map_weights(data, prior)


class TestLaplace:
    def test_curvature_at_zero_margin(self):
        data = TaskDataset("t", np.array([[1.0, 0.0]]), np.array([1.0]), "classification")
        a = laplace_curvature(data, np.zeros(2))
        assert a[0] == pytest.approx(0.25)

    def test_curvature_regression_identity(self):
        data = TaskDataset("t", np.random.default_rng(0).standard_normal((4, 2)),
                           np.zeros(4), "regression")
        np.testing.assert_array_equal(laplace_curvature(data, np.array([5.0, -3.0])), np.ones(4))

    def test_curvature_saturates(self):
        data = TaskDataset("t", np.array([[1.0]]), np.array([1.0]), "classification")
        a = laplace_curvature(data, np.array([40.0]))
        assert a[0] < 1e-15

    def test_covariance_no_data_is_prior(self):
        data = TaskDataset("t", np.zeros((0, 2)), np.zeros(0), "regression")
        prior_var = np.array([[2.0, 0.3], [0.3, 1.0]])
        np.testing.assert_allclose(laplace_covariance(data, np.zeros(0), prior_var), prior_var)

    def test_covariance_1d_example(self):
        data = TaskDataset("t", np.array([[1.0]]), np.array([1.0]), "regression")
        c = laplace_covariance(data, np.ones(1), np.ones(1))
        assert c[0, 0] == pytest.approx(0.5)

    def test_covariance_psd_random(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            n, d = int(rng.integers(0, 6)), 3
            X = rng.standard_normal((n, d))
            a = rng.uniform(0.0, 1.0, size=n)
            b = rng.standard_normal((d, d))
            prior_var = b @ b.T / d + 0.1 * np.eye(d)
            data = TaskDataset("t", X, rng.choice([-1.0, 1.0], size=n), "classification")
            cov = laplace_covariance(data, a, prior_var)
            w = np.linalg.eigvalsh(cov)
            assert w.min() > -1e-12
            np.testing.assert_allclose(cov, cov.T, atol=1e-12)


class TestEstepPosterior:
    def test_regression_exact_posterior(self):
        rng = np.random.default_rng(7)
        n, d = 25, 3
        X = rng.standard_normal((n, d))
        y = rng.standard_normal(n)
        data = TaskDataset("t", X, y, "regression")
        prior = GaussianMessage(np.zeros(d), 1.7 * np.eye(d))
        rho2 = 0.5
        post = estep_posterior(data, prior, rho2)
        want_cov = np.linalg.inv(X.T @ X / rho2 + np.eye(d) / 1.7)
        np.testing.assert_allclose(post.cov, want_cov, atol=1e-10)
        np.testing.assert_allclose(
            post.mean, ridge_oracle(X, y, prior.mean, 1.7 * np.eye(d), rho2), atol=1e-8
        )


class TestPredict:
    def test_zero_weights_half(self):
        assert predict(np.zeros(3), np.ones(3), "classification") == pytest.approx(0.5)

    def test_dot_product(self):
        assert predict(np.array([1.0, 2.0]), np.array([3.0, 4.0]), "regression") == 11.0

    def test_monotone_in_margin(self):
        w = np.array([1.0])
        probs = [predict(w, np.array([z]), "classification") for z in np.linspace(-3, 3, 21)]
        assert all(b > a for a, b in zip(probs, probs[1:]))

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            predict(np.zeros(2), np.zeros(3), "regression")


class TestDataLogLikelihood:
    def test_regression_matches_normal_density(self):
        from scipy.stats import norm

        data = TaskDataset("t", np.array([[1.0], [2.0]]), np.array([0.5, 1.0]), "regression")
        w = np.array([0.3])
        rho2 = 0.8
        want = norm.logpdf(0.5, 0.3, np.sqrt(rho2)) + norm.logpdf(1.0, 0.6, np.sqrt(rho2))
        assert data_log_likelihood(w, data, rho2) == pytest.approx(want)

    def test_classification_bernoulli(self):
        data = TaskDataset("t", np.array([[2.0]]), np.array([-1.0]), "classification")
        w = np.array([0.5])
        want = np.log(1.0 - 1.0 / (1.0 + np.exp(-1.0)))
        assert data_log_likelihood(w, data) == pytest.approx(want)
