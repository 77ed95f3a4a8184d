
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import multivariate_normal, norm

from fedgrem.errors import ContractError, DegenerateClusterError
from fedgrem.mixture import (
    MixtureParams,
    ModelKind,
    TaskDataset,
    exact_m_step_gmm,
    log_likelihood,
    posterior,
    q_hat_gradient,
    q_hat_value,
    sample,
    weight_m_step,
)

GMM, MOR = ModelKind.GMM, ModelKind.MOR


def random_instance(rng, kind, n=20, d=3, R=2):
    w = rng.dirichlet(np.ones(R)) * 0.9 + 0.1 / R
    w /= w.sum()
    params = MixtureParams(w, rng.normal(scale=2.0, size=(R, d)))
    x = rng.normal(size=(n, d))
    if kind is GMM:
        data = TaskDataset(GMM, x + rng.normal(scale=2.0, size=(1, d)))
    else:
        data = TaskDataset(MOR, x, rng.normal(scale=2.0, size=n))
    return params, data


def density_posterior_oracle(kind, params, data):
    """Posterior straight from Bayes' rule with scipy densities."""
    out = np.zeros((data.n, params.R))
    for i in range(data.n):
        for r in range(params.R):
            if kind is GMM:
                p = multivariate_normal(params.components[r], np.eye(data.d)).pdf(data.observations[i])
            else:
                mu = data.observations[i] @ params.components[r]
                p = norm.pdf(data.responses[i], loc=mu)
            out[i, r] = params.weights[r] * p
        out[i] /= out[i].sum()
    return out


def q_hat_oracle(kind, theta, gamma, data):
    total = 0.0
    for i in range(data.n):
        for r in range(theta.shape[0]):
            if kind is GMM:
                resid = data.observations[i] - theta[r]
                total += gamma[i, r] * float(resid @ resid)
            else:
                resid = data.responses[i] - data.observations[i] @ theta[r]
                total += gamma[i, r] * resid ** 2
    return -total / (2 * data.n)


def finite_difference_gradient(kind, theta, gamma, data, step=1e-6):
    grad = np.zeros_like(theta)
    for idx in np.ndindex(*theta.shape):
        hi, lo = theta.copy(), theta.copy()
        hi[idx] += step
        lo[idx] -= step
        grad[idx] = (q_hat_value(kind, hi, gamma, data) - q_hat_value(kind, lo, gamma, data)) / (2 * step)
    return grad


class TestPosterior:
    def test_equidistant_point_is_split_evenly(self):
        params = MixtureParams([0.5, 0.5], [[1.0], [-1.0]])
        gamma = posterior(GMM, params, TaskDataset(GMM, [[0.0]]))
        np.testing.assert_allclose(gamma, [[0.5, 0.5]], atol=1e-15)

    def test_identical_components_return_priors(self):
        rng = np.random.default_rng(0)
        params = MixtureParams([0.3, 0.7], [[1.0, 2.0], [1.0, 2.0]])
        gamma = posterior(GMM, params, TaskDataset(GMM, rng.normal(size=(7, 2))))
        np.testing.assert_allclose(gamma, np.tile([0.3, 0.7], (7, 1)), atol=1e-15)

    def test_matches_density_ratio(self):
        params = MixtureParams([0.3, 0.7], [[0.0], [2.0]])
        gamma = posterior(GMM, params, TaskDataset(GMM, [[1.5]]))
        a, b = 0.3 * norm.pdf(1.5), 0.7 * norm.pdf(-0.5)
        np.testing.assert_allclose(gamma[0], [a / (a + b), b / (a + b)], rtol=1e-13)

    def test_mor_symmetric_residuals(self):
        params = MixtureParams([0.5, 0.5], [[1.0], [-1.0]])
        gamma = posterior(MOR, params, TaskDataset(MOR, [[1.0]], [0.0]))
        np.testing.assert_allclose(gamma, [[0.5, 0.5]], atol=1e-15)

    @pytest.mark.parametrize("kind", [GMM, MOR])
    def test_random_instances_match_density_oracle(self, kind):
        rng = np.random.default_rng(1)
        for _ in range(5):
            params, data = random_instance(rng, kind, n=8, d=2, R=3)
            np.testing.assert_allclose(posterior(kind, params, data),
                                       density_posterior_oracle(kind, params, data), atol=1e-12)

    def test_huge_separation_stays_finite(self):
        params = MixtureParams([0.5, 0.5], [[1e4], [-1e4]])
        gamma = posterior(GMM, params, TaskDataset(GMM, [[3.0], [-3.0]]))
        np.testing.assert_allclose(gamma, [[1.0, 0.0], [0.0, 1.0]])

    def test_reference_class_invariance(self):
        # choosing a different reference component must not change the result
        rng = np.random.default_rng(2)
        params, data = random_instance(rng, GMM, R=3)
        perm = [2, 0, 1]
        gamma = posterior(GMM, params, data)
        gamma_perm = posterior(GMM, params.permuted(perm), data)
        np.testing.assert_allclose(gamma_perm, gamma[:, perm], atol=1e-14)

    def test_dimension_mismatch(self):
        params = MixtureParams([0.5, 0.5], [[1.0, 0.0], [0.0, 1.0]])
        with pytest.raises(ContractError):
            posterior(GMM, params, TaskDataset(GMM, [[1.0, 2.0, 3.0]]))

    def test_kind_mismatch(self):
        params = MixtureParams([1.0], [[1.0]])
        with pytest.raises(ContractError):
            posterior(MOR, params, TaskDataset(GMM, [[1.0]]))


class TestQHat:
    def test_zero_residual(self):
        data = TaskDataset(GMM, [[1.0, 2.0]])
        theta = np.array([[1.0, 2.0], [5.0, 5.0]])
        assert q_hat_value(GMM, theta, [[1.0, 0.0]], data) == 0.0

    def test_quadratic_form(self):
        v = np.array([0.3, -1.2])
        theta = np.array([[1.0, 2.0], [5.0, 5.0]])
        data = TaskDataset(GMM, [theta[0] + v])
        assert q_hat_value(GMM, theta, [[1.0, 0.0]], data) == pytest.approx(-0.5 * v @ v, abs=1e-15)
        np.testing.assert_allclose(q_hat_gradient(GMM, theta, [[1.0, 0.0]], data)[0], v, atol=1e-15)

    @pytest.mark.parametrize("kind", [GMM, MOR])
    def test_direct_summation(self, kind):
        rng = np.random.default_rng(3)
        params, data = random_instance(rng, kind, n=12, d=3, R=3)
        gamma = posterior(kind, params, data)
        theta = params.components + rng.normal(size=params.components.shape)
        assert q_hat_value(kind, theta, gamma, data) == pytest.approx(
            q_hat_oracle(kind, theta, gamma, data), rel=1e-12, abs=1e-12)

    def test_stationary_at_hard_cluster_means(self):
        x = np.array([[0.0, 1.0], [2.0, 3.0], [10.0, 10.0], [12.0, 8.0], [11.0, 9.0]])
        gamma = np.array([[1, 0], [1, 0], [0, 1], [0, 1], [0, 1]], dtype=float)
        theta = np.array([x[:2].mean(0), x[2:].mean(0)])
        np.testing.assert_allclose(q_hat_gradient(GMM, theta, gamma, TaskDataset(GMM, x)), 0, atol=1e-14)

    @pytest.mark.parametrize("kind", [GMM, MOR])
    def test_gradient_matches_finite_differences(self, kind):
        rng = np.random.default_rng(4)
        for _ in range(10):
            params, data = random_instance(rng, kind, n=20, d=3, R=2)
            gamma = posterior(kind, params, data)
            theta = params.components + rng.normal(size=params.components.shape)
            g = q_hat_gradient(kind, theta, gamma, data)
            fd = finite_difference_gradient(kind, theta, gamma, data)
            assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-12)

    def test_posterior_shape_checked(self):
        data = TaskDataset(GMM, [[1.0], [2.0]])
        with pytest.raises(ContractError):
            q_hat_value(GMM, [[0.0], [1.0]], [[1.0, 0.0]], data)


class TestWeightMStep:
    def test_uniform(self):
        np.testing.assert_allclose(weight_m_step(np.full((5, 4), 0.25)), [0.25] * 4)

    def test_counting(self):
        gamma = [[1, 0], [1, 0], [1, 0], [0, 1]]
        np.testing.assert_allclose(weight_m_step(gamma), [0.75, 0.25])

    def test_mean(self):
        np.testing.assert_allclose(weight_m_step([[0.9, 0.1], [0.4, 0.6]]), [0.65, 0.35])


class TestExactMStep:
    def test_hard_posterior_gives_cluster_means(self):
        x = np.array([[0.0], [2.0], [7.0]])
        gamma = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_allclose(exact_m_step_gmm(gamma, TaskDataset(GMM, x)), [[1.0], [7.0]])

    def test_uniform_posterior_gives_global_mean(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(9, 2))
        theta = exact_m_step_gmm(np.full((9, 3), 1 / 3), TaskDataset(GMM, x))
        np.testing.assert_allclose(theta, np.tile(x.mean(0), (3, 1)), atol=1e-14)

    def test_weighted_mean_oracle(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(10, 2))
        gamma = rng.dirichlet(np.ones(3), size=10)
        theta = exact_m_step_gmm(gamma, TaskDataset(GMM, x))
        for r in range(3):
            num = sum(gamma[i, r] * x[i] for i in range(10))
            np.testing.assert_allclose(theta[r], num / sum(gamma[:, r]), atol=1e-12)

    def test_empty_cluster_is_an_error(self):
        with pytest.raises(DegenerateClusterError):
            exact_m_step_gmm([[1.0, 0.0], [1.0, 0.0]], TaskDataset(GMM, [[1.0], [2.0]]))

    def test_exact_step_dominates_any_gradient_step(self):
        rng = np.random.default_rng(7)
        params, data = random_instance(rng, GMM, n=30)
        gamma = posterior(GMM, params, data)
        best = q_hat_value(GMM, exact_m_step_gmm(gamma, data), gamma, data)
        grad = q_hat_gradient(GMM, params.components, gamma, data)
        for eta in [0.1, 0.5, 1.0, 3.0]:
            assert best >= q_hat_value(GMM, params.components + eta * grad, gamma, data) - 1e-12


class TestSample:
    def test_rejects_empty(self):
        with pytest.raises(ContractError):
            sample(GMM, MixtureParams([1.0], [[0.0]]), 0, np.random.default_rng(0))

    def test_dominant_component_mean(self):
        params = MixtureParams([1.0 - 1e-13, 1e-13], [[1.5, -2.0], [50.0, 50.0]])
        data = sample(GMM, params, 100_000, np.random.default_rng(8))
        assert np.all(np.abs(data.observations.mean(0) - [1.5, -2.0]) < 0.02)

    def test_single_regression_recovered_by_ols(self):
        theta = np.array([1.0, -2.0, 0.5])
        n = 2000
        data = sample(MOR, MixtureParams([1.0], [theta]), n, np.random.default_rng(9))
        beta, *_ = np.linalg.lstsq(data.observations, data.responses, rcond=None)
        assert np.all(np.abs(beta - theta) < 3 / np.sqrt(n))

    def test_labels_only_on_request(self):
        params = MixtureParams([0.5, 0.5], [[0.0], [1.0]])
        out = sample(GMM, params, 5, np.random.default_rng(0))
        assert isinstance(out, TaskDataset)
        data, z = sample(GMM, params, 5, np.random.default_rng(0), return_labels=True)
        assert z.shape == (5,)
        np.testing.assert_array_equal(data.observations, out.observations)


class TestLogLikelihood:
    def test_single_point_at_mean(self):
        ll = log_likelihood(GMM, MixtureParams([1.0], [[0.7]]), TaskDataset(GMM, [[0.7]]))
        assert ll == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-15)

    @pytest.mark.parametrize("kind", [GMM, MOR])
    def test_direct_density_oracle(self, kind):
        rng = np.random.default_rng(10)
        params, data = random_instance(rng, kind, n=15, d=2, R=3)
        total = 0.0
        for i in range(data.n):
            x = data.observations[i]
            mix = 0.0
            for r in range(params.R):
                if kind is GMM:
                    p = multivariate_normal(params.components[r], np.eye(2)).pdf(x)
                else:
                    p = norm.pdf(data.responses[i], loc=x @ params.components[r])
                    p *= multivariate_normal(np.zeros(2), np.eye(2)).pdf(x)
                mix += params.weights[r] * p
            total += np.log(mix)
        assert log_likelihood(kind, params, data) == pytest.approx(total / data.n, rel=1e-12)


@st.composite
def instances(draw):
    kind = draw(st.sampled_from([GMM, MOR]))
    seed = draw(st.integers(0, 2**32 - 1))
    R = draw(st.integers(1, 4))
    d = draw(st.integers(1, 4))
    n = draw(st.integers(1, 15))
    return kind, np.random.default_rng(seed), R, d, n


@settings(max_examples=60, deadline=None)
@given(instances())
def test_posterior_rows_on_simplex(inst):
    kind, rng, R, d, n = inst
    params, data = random_instance(rng, kind, n=n, d=d, R=R)
    gamma = posterior(kind, params, data)
    assert np.all(gamma >= 0) and np.all(gamma <= 1)
    np.testing.assert_allclose(gamma.sum(1), 1.0, atol=1e-10)
    w = weight_m_step(gamma)
    assert abs(w.sum() - 1) <= 1e-12 and np.all(w >= 0)


@settings(max_examples=40, deadline=None)
@given(instances())
def test_joint_permutation_invariance(inst):
    kind, rng, R, d, n = inst
    params, data = random_instance(rng, kind, n=n, d=d, R=R)
    perm = rng.permutation(R)
    gamma = posterior(kind, params, data)
    moved = params.permuted(perm)
    np.testing.assert_allclose(posterior(kind, moved, data), gamma[:, perm], atol=1e-12)
    assert q_hat_value(kind, moved, gamma[:, perm], data) == pytest.approx(
        q_hat_value(kind, params, gamma, data), rel=1e-12, abs=1e-12)
    assert log_likelihood(kind, moved, data) == pytest.approx(
        log_likelihood(kind, params, data), rel=1e-12, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(instances(), st.floats(0.05, 1.0))
def test_gmm_curvature_safe_step_never_decreases_q(inst, frac):
    _, rng, R, d, n = inst
    params, data = random_instance(rng, GMM, n=n, d=d, R=R)
    gamma = posterior(GMM, params, data)
    w = weight_m_step(gamma)
    grad = q_hat_gradient(GMM, params.components, gamma, data)
    eta = frac / np.maximum(w, 1e-300)
    stepped = params.components + eta[:, None] * grad
    before = q_hat_value(GMM, params.components, gamma, data)
    assert q_hat_value(GMM, stepped, gamma, data) >= before - 1e-10 * (1 + abs(before))
