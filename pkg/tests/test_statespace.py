import math

import numpy as np
import pytest
from scipy import integrate, stats

from meshfree_filter.exceptions import DimensionError, InvalidSpecError, ModelDomainError
from meshfree_filter.scenarios import TumorModel
from meshfree_filter.statespace import (
    GaussianSpec,
    RandomSource,
    finite_difference_jacobian,
    gaussian_logpdf,
    jacobian_x,
    observation_loglik,
    propagate,
    propagate_batch,
    propagate_rows,
    sample_gaussian,
    sample_in_domain,
)


class TestRandomSource:
    def test_same_stream_same_draws(self):
        a = RandomSource(11, (1, 2)).generator().standard_normal(8)
        b = RandomSource(11, (1, 2)).generator().standard_normal(8)
        np.testing.assert_array_equal(a, b)

    def test_streams_differ(self):
        a = RandomSource(11, (1, 2)).generator().standard_normal(8)
        b = RandomSource(11, (1, 3)).generator().standard_normal(8)
        c = RandomSource(12, (1, 2)).generator().standard_normal(8)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_child_extends_stream(self):
        assert RandomSource(5).child(1).child(4, 2) == RandomSource(5, (1, 4, 2))

    def test_rejects_negative_seed(self):
        with pytest.raises(InvalidSpecError):
            RandomSource(-1)

    def test_sibling_streams_uncorrelated(self):
        a = RandomSource(11, (2, 1)).generator().standard_normal(100_000)
        b = RandomSource(11, (2, 2)).generator().standard_normal(100_000)
        assert abs(np.corrcoef(a, b)[0, 1]) < 0.01


class TestGaussianSpec:
    def test_rejects_asymmetric_covariance(self):
        with pytest.raises(InvalidSpecError):
            GaussianSpec(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_rejects_indefinite_covariance(self):
        with pytest.raises(InvalidSpecError):
            GaussianSpec(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_rejects_non_positive_diagonal(self):
        with pytest.raises(InvalidSpecError):
            GaussianSpec(np.zeros(2), np.array([1.0, 0.0]))

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            GaussianSpec(np.zeros(3), np.ones(2))

    def test_scaled_diagonal(self):
        spec = GaussianSpec.isotropic(2, 0.2).scaled(np.array([0.1, 0.5]))
        np.testing.assert_allclose(spec.covariance, [0.002, 0.05])


class TestGaussianLogpdf:
    def test_standard_normal_at_mean(self):
        spec = GaussianSpec(np.zeros(1), np.ones(1))
        assert gaussian_logpdf(spec, np.zeros(1)) == pytest.approx(-0.5 * math.log(2 * math.pi))

    def test_full_matches_diagonal(self):
        diagonal = GaussianSpec(np.array([1.0, -2.0]), np.array([0.5, 2.0]))
        full = GaussianSpec(np.array([1.0, -2.0]), np.diag([0.5, 2.0]))
        points = np.random.default_rng(0).normal(size=(20, 2))
        np.testing.assert_allclose(gaussian_logpdf(diagonal, points), gaussian_logpdf(full, points), rtol=1e-12)

    def test_correlated_against_closed_form(self):
        cov = np.array([[2.0, 0.6], [0.6, 1.0]])
        spec = GaussianSpec(np.zeros(2), cov)
        x = np.array([0.3, -0.7])
        expected = -0.5 * (2 * math.log(2 * math.pi) + math.log(np.linalg.det(cov)) + x @ np.linalg.solve(cov, x))
        assert gaussian_logpdf(spec, x) == pytest.approx(expected, rel=1e-12)

    def test_batch_shape(self):
        spec = GaussianSpec.isotropic(3, 1.0)
        assert gaussian_logpdf(spec, np.zeros((4, 5, 3))).shape == (4, 5)

    def test_integrates_to_one(self):
        spec = GaussianSpec(np.array([0.4]), np.array([2.5]))
        grid = np.linspace(-20.0, 20.0, 40_001)
        density = np.exp(gaussian_logpdf(spec, grid[:, np.newaxis]))
        assert integrate.trapezoid(density, grid) == pytest.approx(1.0, abs=1e-8)


class TestSampleGaussian:
    def test_moments(self):
        cov = np.array([[1.0, 0.3], [0.3, 0.5]])
        spec = GaussianSpec(np.array([1.0, -1.0]), cov)
        draws = sample_gaussian(spec, RandomSource(3), size=50_000)
        np.testing.assert_allclose(draws.mean(axis=0), spec.mean, atol=0.03)
        np.testing.assert_allclose(np.cov(draws.T), cov, atol=0.03)

    def test_single_draw_shape(self):
        assert sample_gaussian(GaussianSpec.isotropic(4, 1.0), RandomSource(1)).shape == (4,)

    def test_goodness_of_fit(self):
        spec = GaussianSpec(np.array([1.5]), np.array([0.64]))
        draws = sample_gaussian(spec, RandomSource(4), size=100_000)[:, 0]
        edges = 1.5 + 0.8 * stats.norm.ppf(np.linspace(0.0, 1.0, 21))
        observed = np.histogram(draws, bins=np.clip(edges, -1e6, 1e6))[0]
        assert stats.chisquare(observed).pvalue > 1e-3

    def test_domain_redraws(self, function_model):
        model = function_model(lambda x, w: x + w, positive=True)
        draws = sample_in_domain(GaussianSpec(np.array([0.5]), np.ones(1)), RandomSource(2), 2000, model)
        assert draws.shape == (2000, 1)
        assert np.all(draws > 0)

    def test_domain_out_of_reach(self, function_model):
        model = function_model(lambda x, w: x + w, positive=True)
        with pytest.raises(ModelDomainError):
            sample_in_domain(GaussianSpec(np.array([-100.0]), np.ones(1)), RandomSource(2), 3, model)


class TestJacobians:
    def test_finite_difference_of_linear_map(self):
        matrix = np.array([[1.0, 2.0], [-3.0, 0.5]])
        jac = finite_difference_jacobian(lambda z: z @ matrix.T, np.array([0.4, -1.2]))
        np.testing.assert_allclose(jac, matrix, atol=1e-8)

    def test_tumor_analytic_matches_finite_difference(self):
        model = TumorModel(0.2, (1.0, 0.2, 0.2), (0.01, 0.01), (0.1, 0.1))
        x = np.array([[0.8, 0.3], [0.6, 0.45]])
        w = np.zeros((2, 2))
        analytic = jacobian_x(model, x, w, 0)
        numeric = finite_difference_jacobian(lambda z: model.transition(z, w, 0), x)
        np.testing.assert_allclose(analytic, numeric, atol=1e-7)


class TestPropagate:
    def test_redraws_noise_until_inside_domain(self, function_model):
        model = function_model(lambda x, w: x + w, positive=True)
        out = propagate_batch(model, np.full((500, 1), 0.1), RandomSource(9), 0)
        assert np.all(out > 0)

    def test_gives_up_after_retry_cap(self, function_model):
        model = function_model(lambda x, w: -np.abs(x) - 1.0, positive=True)
        with pytest.raises(ModelDomainError) as info:
            propagate(model, np.array([0.5]), RandomSource(1), 0)
        np.testing.assert_array_equal(info.value.node, [0.5])

    def test_rejects_start_outside_domain(self, function_model):
        model = function_model(lambda x, w: x + w, positive=True)
        with pytest.raises(ModelDomainError):
            propagate(model, np.array([-1.0]), RandomSource(1), 0)

    def test_rows_reports_stuck_rows(self, function_model):
        model = function_model(lambda x, w: np.where(x > 1.0, -1.0, x + np.abs(w)), positive=True)
        out, stuck = propagate_rows(model, np.array([[0.5], [2.0], [0.2]]), RandomSource(3), 0)
        np.testing.assert_array_equal(stuck, [False, True, False])
        assert np.all(out[~stuck] > 0)

    def test_batch_raises_on_stuck_row(self, function_model):
        model = function_model(lambda x, w: np.where(x > 1.0, -1.0, x + np.abs(w)), positive=True)
        with pytest.raises(ModelDomainError) as info:
            propagate_batch(model, np.array([[0.5], [2.0]]), RandomSource(3), 0)
        np.testing.assert_array_equal(info.value.node, [2.0])


class TestObservationLoglik:
    def test_peaks_at_matching_state(self, static_model):
        model = static_model(d=2)
        nodes = np.array([[0.0, 0.0], [1.0, 1.0], [3.0, -2.0]])
        loglik = observation_loglik(model, np.array([1.0, 1.0]), nodes, 1)
        assert loglik.shape == (3,)
        assert np.argmax(loglik) == 1

    def test_rejects_wrong_observation_size(self, static_model):
        with pytest.raises(DimensionError):
            observation_loglik(static_model(d=2), np.zeros(3), np.zeros((1, 2)), 1)
