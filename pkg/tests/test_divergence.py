import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.integrate import quad
from scipy.special import eval_hermitenorm
from scipy.stats import multivariate_normal, norm

from app.bounds import chapman_robbins_orbit
from app.channel import ChannelModel, identity_projection
from app.divergence import (
    QUADRATURE_MAX_POINTS,
    AlphaExpansion,
    DivergenceMethod,
    alpha_coefficient,
    chi2_alpha_form,
    chi2_divergence,
    chi2_leading_order,
    chi2_n_samples,
    hermite_e,
    kl_divergence,
    kl_leading_order,
    log_expm1,
    mixture_components,
    mixture_logpdf,
    model_logpdf,
    moment_pairing,
    normalized_density,
    scaled_hermite,
    _gauss_hermite_grid,
    _kl_excess,
)
from app.errors import QuadratureUnsupportedError, ToolkitError, UnreliableEstimateError
from app.group import GroupDistribution, cyclic_shift_group, trivial_group, uniform_distribution


def gaussian_pair(delta: float, sigma: float) -> tuple[ChannelModel, ChannelModel]:
    group = trivial_group(1)
    theta = uniform_distribution(group)
    projection = identity_projection(1)
    return (
        ChannelModel(np.array([delta]), theta, projection, sigma),
        ChannelModel(np.array([0.0]), theta, projection, sigma),
    )


class TestMixtureDensity:
    """Log-densities of the observation mixture."""

    def test_single_component_is_gaussian(self):
        """A one-element group reduces the mixture to a single Gaussian."""
        group = trivial_group(2)
        x = np.array([0.5, -1.0])
        value = mixture_logpdf(x, uniform_distribution(group), identity_projection(2), 1.5, [1.0, 1.0])
        assert value == pytest.approx(multivariate_normal.logpdf([1.0, 1.0], mean=x, cov=1.5**2 * np.eye(2)))

    def test_example2_mixture(self, example2):
        """Two equally weighted components at 1 and 2."""
        expected = math.log(0.5 * norm.pdf(0.0, 1.0, 2.0) + 0.5 * norm.pdf(0.0, 2.0, 2.0))
        assert model_logpdf(example2.model(2.0), 0.0) == pytest.approx(expected)

    def test_density_integrates_to_one(self, example2):
        """The observation density has unit mass."""
        model = example2.model(0.7)
        total, _ = quad(lambda y: math.exp(model_logpdf(model, y)), -20, 20)
        assert total == pytest.approx(1.0, abs=1e-8)

    def test_batch_evaluation_shape(self, example1):
        """An (M, K) array gives M log-densities."""
        values = model_logpdf(example1.model(1.0), np.zeros((5, 2)))
        assert values.shape == (5,)

    def test_zero_weights_are_dropped(self, example1):
        """Components with zero weight do not enter the mixture."""
        theta = GroupDistribution(example1.group, np.array([0.5, 0.5, 0.0]))
        means, weights = mixture_components(example1.x, theta, example1.projection)
        assert means.shape == (2, 2)
        assert_allclose(weights, [0.5, 0.5])

    def test_translated_orbit_member_has_identical_density(self, example1):
        """(g·x, translated θ) has bit-for-bit the same density as (x, θ)."""
        theta = GroupDistribution(example1.group, np.array([0.2, 0.3, 0.5]))
        g = example1.group.elements[2]
        y = np.array([[0.3, -0.2], [1.5, 2.0]])
        a = mixture_logpdf(example1.x, theta, example1.projection, 1.0, y)
        b = mixture_logpdf(g.act(example1.x), theta.right_translate(g), example1.projection, 1.0, y)
        assert np.array_equal(a, b)

    def test_sigma_must_be_positive(self, example2):
        with pytest.raises(ToolkitError):
            mixture_logpdf(example2.x, example2.theta, example2.projection, 0.0, 1.0)


class TestDivergences:
    """χ² and KL between channel models."""

    def test_identical_models_have_zero_divergence(self, example1):
        """A model against itself gives exactly zero."""
        model = example1.model(2.0)
        assert chi2_divergence(model, model).value == 0.0
        assert kl_divergence(model, model).value == 0.0

    def test_gaussian_pair_chi2(self):
        """χ² between N(1, 1) and N(0, 1) is e − 1."""
        a, b = gaussian_pair(1.0, 1.0)
        assert chi2_divergence(a, b).value == pytest.approx(math.e - 1, rel=1e-7)

    def test_gaussian_pair_kl(self):
        """KL between N(1, 4) and N(0, 4) is 1/8."""
        a, b = gaussian_pair(1.0, 2.0)
        assert kl_divergence(a, b).value == pytest.approx(1.0 / 8.0, rel=1e-7)

    def test_quadrature_rejects_three_dimensions(self):
        """Tensor quadrature stops at K = 2."""
        group = cyclic_shift_group(3)
        model = ChannelModel(np.array([0.0, 1.0, 2.0]), uniform_distribution(group), identity_projection(3), 1.0)
        with pytest.raises(QuadratureUnsupportedError):
            chi2_divergence(model, model)

    def test_monte_carlo_agrees_with_quadrature(self, example2):
        """The sampled χ² lands within five standard errors of quadrature."""
        a, b = example2.alternative_model(2.0), example2.model(2.0)
        exact = chi2_divergence(a, b).value
        estimate = chi2_divergence(a, b, DivergenceMethod.MONTE_CARLO, budget=200_000, seed=3)
        assert estimate.method == DivergenceMethod.MONTE_CARLO
        assert abs(estimate.value - exact) < 5 * estimate.std_error + 1e-3

    def test_monte_carlo_kl_agrees_with_quadrature(self, example2):
        """The control-variate KL estimate agrees with quadrature."""
        a, b = example2.alternative_model(2.0), example2.model(2.0)
        exact = kl_divergence(a, b).value
        estimate = kl_divergence(a, b, "monte-carlo", budget=200_000, seed=5)
        assert abs(estimate.value - exact) < 5 * estimate.std_error + 1e-3

    def test_heavy_tailed_monte_carlo_is_refused(self):
        """Well separated Gaussians give a ratio too heavy-tailed to average."""
        a, b = gaussian_pair(5.0, 1.0)
        with pytest.raises(UnreliableEstimateError):
            chi2_divergence(a, b, DivergenceMethod.MONTE_CARLO, budget=20_000, seed=0)

    def test_models_must_share_sigma(self, example2):
        """Divergences compare models observed at one noise level."""
        with pytest.raises(ToolkitError):
            chi2_divergence(example2.model(1.0), example2.model(2.0))

    def test_leading_order_is_not_a_numeric_method(self, example2):
        """The leading-order form has its own function."""
        with pytest.raises(ToolkitError):
            chi2_divergence(example2.model(1.0), example2.model(1.0), DivergenceMethod.LEADING_ORDER)

    def test_chi2_approaches_leading_order(self, example2):
        """At σ = 8 the exact χ² is within 5% of σ⁻⁴·K²."""
        sigma = 8.0
        exact = chi2_divergence(example2.alternative_model(sigma), example2.model(sigma)).value
        leading, d = chi2_leading_order(
            example2.alternative, example2.theta, example2.x, example2.theta, example2.projection, sigma
        )
        assert d == 2
        assert exact / leading == pytest.approx(1.0, abs=0.05)

    def test_kl_is_half_of_chi2_at_high_noise(self, example2):
        """KL/χ² approaches one half."""
        sigma = 8.0
        a, b = example2.alternative_model(sigma), example2.model(sigma)
        assert kl_divergence(a, b).value / chi2_divergence(a, b).value == pytest.approx(0.5, abs=0.05)


class TestLeadingOrder:
    """Closed-form leading terms in 1/σ."""

    def test_example2(self, example2):
        """The swap pair first differs at order 2 with K² = 2."""
        value, d = chi2_leading_order(
            example2.alternative, example2.theta, example2.x, example2.theta, example2.projection, 2.0
        )
        assert d == 2
        assert value == pytest.approx(2.0 / 16.0)

    def test_example1(self, example1):
        """The three-point pair first differs at order 3 with K³ = 4."""
        value, d = chi2_leading_order(
            example1.alternative, example1.theta, example1.x, example1.theta, example1.projection, 2.0
        )
        assert d == 3
        assert value == pytest.approx(4.0 / 64.0)

    def test_kl_is_half(self, example1):
        """The KL leading term is half the χ² one."""
        chi2, _ = chi2_leading_order(
            example1.alternative, example1.theta, example1.x, example1.theta, example1.projection, 3.0
        )
        kl, _ = kl_leading_order(
            example1.alternative, example1.theta, example1.x, example1.theta, example1.projection, 3.0
        )
        assert kl == pytest.approx(chi2 / 2)

    def test_moment_pairing(self, example1):
        """⟨M², M²⟩ for the three-point example."""
        value = moment_pairing(example1.x, example1.theta, example1.x, example1.theta, example1.projection, 2)
        assert value == pytest.approx(58.0 / 9.0)


class TestTensorizedChi2:
    """(1 + χ²)^N − 1 without overflow."""

    def test_small_values(self):
        """(1 + 0.5)² − 1."""
        result = chi2_n_samples(0.5, 2)
        assert result.value == pytest.approx(1.25)
        assert result.log_value == pytest.approx(math.log(1.25))
        assert not result.overflow

    def test_many_weak_observations(self):
        """10⁶ observations with χ² = 10⁻⁶ each give e − 1."""
        assert chi2_n_samples(1e-6, 1_000_000).value == pytest.approx(math.e - 1, rel=1e-4)

    def test_zero(self):
        """No information per observation means none in N."""
        result = chi2_n_samples(0.0, 10)
        assert result.value == 0.0
        assert result.log_value == -math.inf

    def test_overflow_keeps_the_log(self):
        """An overflowing value still reports its logarithm."""
        result = chi2_n_samples(1.0, 2000)
        assert result.overflow
        assert result.value == math.inf
        assert result.log_value == pytest.approx(2000 * math.log(2.0))

    def test_invalid_arguments(self):
        """Negative χ² and empty samples are rejected."""
        with pytest.raises(ToolkitError):
            chi2_n_samples(-0.1, 1)
        with pytest.raises(ToolkitError):
            chi2_n_samples(0.1, 0)

    def test_log_expm1(self):
        """log(e^a − 1) for small and huge a."""
        assert log_expm1(1.0) == pytest.approx(math.log(math.e - 1))
        assert log_expm1(800.0) == pytest.approx(800.0)


class TestHermite:
    """Probabilists' Hermite polynomials."""

    @pytest.mark.parametrize("j", range(7))
    def test_matches_scipy(self, j):
        """Recurrence values agree with eval_hermitenorm."""
        u = np.linspace(-3, 3, 13)
        assert_allclose(hermite_e(j, u), eval_hermitenorm(j, u), atol=1e-9)

    def test_scaled(self):
        """s^j·He_j(u/s) at s = 2."""
        u = np.linspace(-3, 3, 7)
        assert_allclose(scaled_hermite(4, u, 4.0), 2.0**4 * eval_hermitenorm(4, u / 2.0), atol=1e-9)

    def test_negative_degree(self):
        """Degrees start at zero."""
        with pytest.raises(ToolkitError):
            hermite_e(-1, 0.0)


class TestAlphaExpansion:
    """Coefficients of the expansion of the normalized density in γ."""

    def test_low_orders(self, example1):
        """α⁰ = 1 and α¹ pairs y with M¹."""
        expansion = AlphaExpansion(example1.x, example1.theta, example1.projection)
        assert alpha_coefficient(expansion, 0, [0.3, 0.4]) == pytest.approx(1.0)
        # α¹(y) = ⟨y, M¹⟩
        assert alpha_coefficient(expansion, 1, [1.0, 2.0]) == pytest.approx(3.0)

    def test_second_order_uses_second_moment(self, example1):
        """α² is a centred quadratic form in M²."""
        expansion = AlphaExpansion(example1.x, example1.theta, example1.projection)
        # α²(y) = yᵀM²y − tr M²
        assert alpha_coefficient(expansion, 2, [1.0, -1.0]) == pytest.approx(2.0 - 10.0 / 3.0)

    def test_truncated_series_matches_density(self, example1):
        """At σ = 10 the truncated series reproduces the normalized density."""
        model = example1.model(10.0)
        expansion = AlphaExpansion.from_model(model)
        y = np.array([[0.0, 0.0], [0.5, -1.0], [1.5, 1.0], [-2.0, 0.3]])
        assert_allclose(expansion.truncated_density(y, model.gamma), normalized_density(model, y), rtol=1e-6)

    def test_negative_order(self, example1):
        """Orders start at zero."""
        expansion = AlphaExpansion(example1.x, example1.theta, example1.projection)
        with pytest.raises(ToolkitError):
            alpha_coefficient(expansion, -1, [0.0, 0.0])

    def test_chi2_alpha_form_matches_leading_order(self, example2):
        """The α form of the leading term agrees with the moment form."""
        estimate, d = chi2_alpha_form(
            example2.alternative, example2.theta, example2.x, example2.theta, example2.projection, 4.0,
            budget=200_000, seed=1,
        )
        assert d == 2
        assert estimate.value == pytest.approx(2.0 / 4.0**4, rel=0.05)


class TestQuadratureRange:
    """Quadrature from very low to very high noise."""

    def test_largest_grid_has_finite_weights(self):
        """The 640-node rule keeps finite weights that still integrate 1 and u²."""
        _, w, u = _gauss_hermite_grid(QUADRATURE_MAX_POINTS, 1, np.zeros(1), 1.0)
        assert np.all(np.isfinite(w))
        assert w.sum() == pytest.approx(1.0, rel=1e-10)
        assert np.sum(w * u[:, 0] ** 2) == pytest.approx(1.0, rel=1e-10)

    @pytest.mark.parametrize("sigma", [16.0, 32.0])
    def test_kl_is_finite_at_high_noise(self, example2, sigma):
        """KL for the swap pair tracks its leading term instead of turning into NaN."""
        value = kl_divergence(example2.alternative_model(sigma), example2.model(sigma)).value
        leading, _ = kl_leading_order(
            example2.alternative, example2.theta, example2.x, example2.theta, example2.projection, sigma
        )
        assert math.isfinite(value)
        assert value == pytest.approx(leading, rel=0.1)

    @pytest.mark.parametrize(("family", "sigma"), [("example1", 0.2), ("example2", 0.1)])
    def test_chi2_is_finite_at_low_noise(self, request, family, sigma):
        """Huge density ratios in the tails are summed in log space."""
        example = request.getfixturevalue(family)
        value = chi2_divergence(example.alternative_model(sigma), example.model(sigma)).value
        reference = chi2_divergence(example.alternative_model(1.0), example.model(1.0)).value
        assert math.isfinite(value)
        assert value > reference

    def test_exact_bound_is_finite_at_low_noise(self, example1):
        """The exact-χ² bound at σ = 0.2 is a number, not NaN."""
        bound = chapman_robbins_orbit(
            example1.alternative, example1.theta, example1.x, example1.theta, example1.projection, 0.2, 10,
            chi2_mode="exact-chi2",
        )
        assert math.isfinite(bound.mse_lower)
        assert bound.mse_lower >= 0.0

    def test_kl_excess_series_matches_direct_formula(self):
        """r·log r − r + 1 near r = 1 agrees with the closed form on both sides of the series radius."""
        log_r = np.array([-0.0501, -0.0499, -0.01, 0.003, 0.0499, 0.0501])
        direct = np.exp(log_r) * log_r - np.expm1(log_r)
        assert_allclose(_kl_excess(log_r), direct, rtol=1e-9)
