"""Gaussian-mixture observation densities, χ² and KL divergences, and the α-coefficient expansion.

Quadrature integrates against a Gaussian N(μ, σ²I) centred on the reference mixture with a
tensor-product probabilists' Gauss-Hermite rule. χ² is evaluated as ∫(f_A − f_B)²/f_B and KL as
∫ f_B·(r·log r − r + 1) with r = f_A/f_B; both integrands are nonnegative, which keeps small
divergences free of cancellation.
"""

import math
from dataclasses import dataclass
from enum import StrEnum
from logging import getLogger
from typing import Optional

import numpy as np
from scipy.special import logsumexp, roots_hermitenorm
from scipy.stats import kurtosis

from app.channel import ChannelModel, Projection, projected_orbit, simulate
from app.errors import (
    DimensionMismatchError,
    InvalidDistributionError,
    QuadratureUnsupportedError,
    ToolkitError,
    UnreliableEstimateError,
)
from app.group import GroupDistribution, as_signal
from app.moments import exact_moment, first_distinguishing_order

logger = getLogger(__name__)

QUADRATURE_START_POINTS = 40
QUADRATURE_MAX_POINTS = 640
QUADRATURE_RTOL = 1e-9
# absolute floor on successive differences; below it the value is at rounding level
QUADRATURE_ATOL = 1e-14
MAX_KURTOSIS = 1e3
KL_SERIES_RADIUS = 0.05
LOG_OVERFLOW = 709.0


class DivergenceMethod(StrEnum):
    QUADRATURE = "quadrature"
    MONTE_CARLO = "monte-carlo"
    LEADING_ORDER = "leading-order"


@dataclass(frozen=True)
class DivergenceEstimate:
    value: float
    std_error: float
    method: DivergenceMethod
    budget: int


def mixture_components(
    x, theta: GroupDistribution, projection: Projection
) -> tuple[np.ndarray, np.ndarray]:
    """Component means P·g·x and weights, zero weights dropped, sorted canonically.

    The canonical order makes the density of x and of g·x with the translated θ bit-identical.
    """
    means = projected_orbit(as_signal(x), theta, projection)
    weights = theta.weights
    keep = weights > 0
    if not np.any(keep):
        raise InvalidDistributionError("all mixture weights are zero")
    means, weights = means[keep], weights[keep]
    order = np.lexsort(np.column_stack([means, weights]).T[::-1])
    return means[order], weights[order]


def _component_logpdf(means: np.ndarray, weights: np.ndarray, sigma: float, y: np.ndarray) -> np.ndarray:
    y = np.atleast_2d(y)
    if y.shape[1] != means.shape[1]:
        raise DimensionMismatchError(f"points have dimension {y.shape[1]}, mixture lives in {means.shape[1]}")
    squared = np.sum((y[:, None, :] - means[None, :, :]) ** 2, axis=2)
    dim = means.shape[1]
    log_norm = 0.5 * dim * math.log(2 * math.pi * sigma**2)
    return logsumexp(-squared / (2 * sigma**2), axis=1, b=weights[None, :]) - log_norm


def mixture_logpdf(x, theta: GroupDistribution, projection: Projection, sigma: float, y) -> np.ndarray | float:
    """log Σ_g θ_g N(y; P·g·x, σ²I), evaluated with log-sum-exp; y may be one point or an (M, K) array."""
    if not sigma > 0:
        raise ToolkitError(f"sigma must be positive, got {sigma}")
    means, weights = mixture_components(x, theta, projection)
    y = np.asarray(y, dtype=np.float64)
    values = _component_logpdf(means, weights, sigma, y)
    return float(values[0]) if y.ndim <= 1 else values


def model_logpdf(model: ChannelModel, y) -> np.ndarray | float:
    return mixture_logpdf(model.x, model.theta, model.projection, model.sigma, y)


def _check_comparable(model_a: ChannelModel, model_b: ChannelModel) -> None:
    if model_a.output_dim != model_b.output_dim:
        raise DimensionMismatchError(f"models observe K={model_a.output_dim} and K={model_b.output_dim}")
    if model_a.sigma != model_b.sigma:
        raise ToolkitError(f"models must share sigma, got {model_a.sigma} and {model_b.sigma}")


def _mixture_mean(model: ChannelModel) -> np.ndarray:
    return model.theta.weights @ model.components


def _gauss_hermite_grid(
    points: int, dim: int, center: np.ndarray, scale: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # roots_hermitenorm stays finite at several hundred nodes where hermegauss overflows
    nodes, weights = roots_hermitenorm(points)
    weights = weights / math.sqrt(2 * math.pi)
    grids = np.meshgrid(*([nodes] * dim), indexing="ij")
    weight_grids = np.meshgrid(*([weights] * dim), indexing="ij")
    u = np.column_stack([g.ravel() for g in grids])
    w = np.prod(np.column_stack([g.ravel() for g in weight_grids]), axis=1)
    # tail weights underflow to zero at large point counts
    keep = w > 0
    return center[None, :] + scale * u[keep], w[keep], u[keep]


def _quadrature_converged(value: float, previous: Optional[float]) -> bool:
    if previous is None:
        return False
    return abs(value - previous) <= max(QUADRATURE_RTOL * abs(value), QUADRATURE_ATOL)


def _adaptive_quadrature(
    log_integrand, model_a: ChannelModel, model_b: ChannelModel, center: np.ndarray
) -> tuple[float, int]:
    """E_{U~N(center, σ²I)}[integrand(U)·f(U)/φ(U)] with doubling point counts until the value settles.

    The integrand is supplied in log space and summed with log-sum-exp, so tail nodes with
    huge density ratios cannot overflow. A value that is not finite raises.
    """
    dim = model_b.output_dim
    if dim > 2:
        raise QuadratureUnsupportedError(f"quadrature supports K <= 2, got K={dim}")
    sigma = model_b.sigma
    points = QUADRATURE_START_POINTS
    previous: Optional[float] = None
    evaluations = 0
    while True:
        y, w, u = _gauss_hermite_grid(points, dim, center, sigma)
        log_a = model_logpdf(model_a, y)
        log_b = model_logpdf(model_b, y)
        # log of the N(center, σ²I) density at y
        log_phi = -0.5 * np.sum(u**2, axis=1) - 0.5 * dim * math.log(2 * math.pi * sigma**2)
        log_value = logsumexp(log_integrand(log_a, log_b, log_phi) + np.log(w))
        value = float(np.exp(log_value)) if log_value < LOG_OVERFLOW else math.inf
        evaluations += y.shape[0]
        if not math.isfinite(value):
            raise UnreliableEstimateError(
                f"quadrature with {points} points per axis gave a non-finite value (log value {log_value})"
            )
        if _quadrature_converged(value, previous):
            return value, evaluations
        if points >= QUADRATURE_MAX_POINTS:
            logger.warning(
                "quadrature stopped at %d points per axis without reaching rtol %.0e", points, QUADRATURE_RTOL
            )
            return value, evaluations
        previous = value
        points *= 2


def _log_abs_expm1(log_r: np.ndarray) -> np.ndarray:
    """log|r − 1| as a function of log r; −inf where r = 1."""
    large = log_r > 30
    with np.errstate(divide="ignore"):
        moderate = np.log(np.abs(np.expm1(np.where(large, 0.0, log_r))))
    clipped = np.where(large, log_r, 30.0)
    return np.where(large, clipped + np.log1p(-np.exp(-clipped)), moderate)


def _chi2_log_integrand(log_a: np.ndarray, log_b: np.ndarray, log_phi: np.ndarray) -> np.ndarray:
    # log of f_B·(r − 1)² / φ
    return log_b - log_phi + 2 * _log_abs_expm1(log_a - log_b)


def _kl_excess(log_r: np.ndarray) -> np.ndarray:
    """r·log r − r + 1 as a function of l = log r, by the series Σ_{k≥2} (k−1)·l^k/k! near 0."""
    log_r = np.asarray(log_r, dtype=np.float64)
    small = np.abs(log_r) < KL_SERIES_RADIUS
    l_small = np.where(small, log_r, 0.0)
    series = sum((k - 1) * l_small**k / math.factorial(k) for k in range(2, 12))
    with np.errstate(over="ignore", invalid="ignore"):
        direct = np.exp(log_r) * log_r - np.expm1(log_r)
    return np.where(small, series, direct)


def _log_kl_excess(log_r: np.ndarray) -> np.ndarray:
    large = log_r > 30
    with np.errstate(divide="ignore"):
        moderate = np.log(_kl_excess(np.where(large, 0.0, log_r)))
    # r·log r − r + 1 = e^l·(l − 1) + 1 ≈ e^l·(l − 1) for l > 30
    return np.where(large, log_r + np.log(np.where(large, log_r - 1, 1.0)), moderate)


def _kl_log_integrand(log_a: np.ndarray, log_b: np.ndarray, log_phi: np.ndarray) -> np.ndarray:
    return log_b - log_phi + _log_kl_excess(log_a - log_b)


def _monte_carlo_estimate(values: np.ndarray, method_budget: int) -> DivergenceEstimate:
    tail_kurtosis = kurtosis(values, fisher=False) if np.std(values) > 0 else 0.0
    if tail_kurtosis > MAX_KURTOSIS:
        raise UnreliableEstimateError(
            f"sample kurtosis {tail_kurtosis:.1f} exceeds {MAX_KURTOSIS:.0f}; the standard error is not reliable"
        )
    return DivergenceEstimate(
        value=float(np.mean(values)),
        std_error=float(np.std(values, ddof=1) / math.sqrt(len(values))) if len(values) > 1 else math.inf,
        method=DivergenceMethod.MONTE_CARLO,
        budget=method_budget,
    )


def chi2_divergence(
    model_a: ChannelModel,
    model_b: ChannelModel,
    method: DivergenceMethod | str = DivergenceMethod.QUADRATURE,
    budget: int = 100_000,
    seed: int = 0,
    threads: Optional[int] = None,
) -> DivergenceEstimate:
    """χ²(f_A‖f_B) = E_B[(f_A/f_B)²] − 1 between two channel models sharing K and σ."""
    _check_comparable(model_a, model_b)
    match DivergenceMethod(method):
        case DivergenceMethod.QUADRATURE:
            value, evaluations = _adaptive_quadrature(_chi2_log_integrand, model_a, model_b, _mixture_mean(model_b))
            return DivergenceEstimate(max(value, 0.0), 0.0, DivergenceMethod.QUADRATURE, evaluations)
        case DivergenceMethod.MONTE_CARLO:
            y = simulate(model_b, budget, seed, threads=threads).observations
            values = np.expm1(model_logpdf(model_a, y) - model_logpdf(model_b, y)) ** 2
            return _monte_carlo_estimate(values, budget)
        case _:
            raise ToolkitError(f"chi2_divergence does not support method {method!r}; use chi2_leading_order")


def kl_divergence(
    model_a: ChannelModel,
    model_b: ChannelModel,
    method: DivergenceMethod | str = DivergenceMethod.QUADRATURE,
    budget: int = 100_000,
    seed: int = 0,
    threads: Optional[int] = None,
) -> DivergenceEstimate:
    """D(f_A‖f_B) = E_A[log f_A/f_B].

    Monte Carlo draws from f_A and averages log r + (1/r − 1); the added term has mean zero
    under f_A and removes the leading fluctuation of the log ratio.
    """
    _check_comparable(model_a, model_b)
    match DivergenceMethod(method):
        case DivergenceMethod.QUADRATURE:
            value, evaluations = _adaptive_quadrature(_kl_log_integrand, model_a, model_b, _mixture_mean(model_b))
            return DivergenceEstimate(max(value, 0.0), 0.0, DivergenceMethod.QUADRATURE, evaluations)
        case DivergenceMethod.MONTE_CARLO:
            y = simulate(model_a, budget, seed, threads=threads).observations
            log_r = model_logpdf(model_a, y) - model_logpdf(model_b, y)
            # l + e^{-l} − 1 = e^{-l}·(r·log r − r + 1)
            values = np.exp(-log_r) * _kl_excess(log_r)
            return _monte_carlo_estimate(values, budget)
        case _:
            raise ToolkitError(f"kl_divergence does not support method {method!r}; use kl_leading_order")


def chi2_leading_order(
    xt, thetat: GroupDistribution, x, theta: GroupDistribution, projection: Projection, sigma: float,
    max_order: int = 6,
) -> tuple[float, int]:
    """(σ^{−2d}/d!)·‖M^d_{x̃,θ̃} − M^d_{x,θ}‖² at the first distinguishing order d."""
    d, k_d = first_distinguishing_order(xt, thetat, x, theta, projection, max_order)
    return sigma ** (-2 * d) * k_d, d


def kl_leading_order(
    xt, thetat: GroupDistribution, x, theta: GroupDistribution, projection: Projection, sigma: float,
    max_order: int = 6,
) -> tuple[float, int]:
    """Half the χ² leading term: σ^{−2d}/(2·d!)·‖ΔM^d‖²."""
    value, d = chi2_leading_order(xt, thetat, x, theta, projection, sigma, max_order)
    return value / 2, d


@dataclass(frozen=True)
class TensorizedChi2:
    value: float
    log_value: float
    overflow: bool


def chi2_n_samples(chi2_single: float, n_samples: int) -> TensorizedChi2:
    """(1 + χ²)^N − 1 for N independent observations, through log1p/expm1."""
    if chi2_single < 0:
        raise ToolkitError(f"chi2 must be nonnegative, got {chi2_single}")
    if n_samples < 1:
        raise ToolkitError(f"N must be positive, got {n_samples}")
    exponent = n_samples * math.log1p(chi2_single)
    if exponent == 0:
        return TensorizedChi2(0.0, -math.inf, False)
    log_value = log_expm1(exponent)
    if exponent > LOG_OVERFLOW:
        return TensorizedChi2(math.inf, log_value, True)
    return TensorizedChi2(math.expm1(exponent), log_value, False)


def log_expm1(a: float) -> float:
    """log(e^a − 1) for a > 0 without overflow."""
    if a > 30:
        return a + math.log1p(-math.exp(-a))
    return math.log(math.expm1(a))


def hermite_e(j: int, u) -> np.ndarray:
    """Probabilists' Hermite polynomial He_j(u) by the three-term recurrence."""
    return scaled_hermite(j, u, 1.0)


def scaled_hermite(j: int, u, s2) -> np.ndarray:
    """s^j·He_j(u/s) as a polynomial in u and s², via H_{j+1} = u·H_j − j·s²·H_{j−1}."""
    if j < 0:
        raise ToolkitError(f"Hermite degree must be >= 0, got {j}")
    u = np.asarray(u, dtype=np.float64)
    s2 = np.asarray(s2, dtype=np.float64)
    previous = np.ones_like(u * s2)
    if j == 0:
        return previous
    current = u * np.ones_like(s2)
    for k in range(1, j):
        previous, current = current, u * current - k * s2 * previous
    return current


@dataclass(frozen=True, eq=False)
class AlphaExpansion:
    """Taylor coefficients in γ = 1/σ of the normalized density f_{x,θ}(y; γ) = E_G[f_Z(y − γ·P·G·x)]."""

    x: np.ndarray
    theta: GroupDistribution
    projection: Projection
    max_order: int = 8

    def __post_init__(self):
        object.__setattr__(self, "x", as_signal(self.x))
        projected_orbit(self.x, self.theta, self.projection)

    @classmethod
    def from_model(cls, model: ChannelModel, max_order: int = 8) -> "AlphaExpansion":
        return cls(model.x, model.theta, model.projection, max_order)

    def coefficient(self, order: int, y) -> np.ndarray:
        """α^j(y) = E_G[s_G^j·He_j(⟨y, v_G⟩/s_G)] with v_G = P·G·x, s_G = ‖v_G‖."""
        v = projected_orbit(self.x, self.theta, self.projection)
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        if y.shape[1] != v.shape[1]:
            raise DimensionMismatchError(f"points have dimension {y.shape[1]}, expansion lives in {v.shape[1]}")
        inner = y @ v.T
        s2 = np.sum(v**2, axis=1)[None, :]
        return scaled_hermite(order, inner, s2) @ self.theta.weights

    def truncated_density(self, y, gamma: float) -> np.ndarray:
        """f_Z(y)·Σ_{j ≤ max_order} α^j(y)·γ^j/j!."""
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        dim = y.shape[1]
        f_z = np.exp(-0.5 * np.sum(y**2, axis=1)) / (2 * math.pi) ** (dim / 2)
        series = sum(self.coefficient(j, y) * gamma**j / math.factorial(j) for j in range(self.max_order + 1))
        return f_z * series


def alpha_coefficient(expansion: AlphaExpansion, order: int, y) -> np.ndarray | float:
    if order < 0:
        raise ToolkitError(f"alpha order must be >= 0, got {order}")
    values = expansion.coefficient(order, y)
    return float(values[0]) if np.asarray(y).ndim <= 1 else values


def normalized_density(model: ChannelModel, y) -> np.ndarray:
    """Density of Ỹ = Y/σ, i.e. the mixture of N(γ·P·g·x, I)."""
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    return np.exp(mixture_logpdf(model.x * model.gamma, model.theta, model.projection, 1.0, y))


def chi2_alpha_form(
    xt, thetat: GroupDistribution, x, theta: GroupDistribution, projection: Projection, sigma: float,
    budget: int = 1_000_000, seed: int = 0, max_order: int = 6,
) -> tuple[DivergenceEstimate, int]:
    """σ^{−2d}/(d!)²·E[(α̃^d(Z) − α^d(Z))²] by Monte Carlo over Z ~ N(0, I)."""
    d, _ = first_distinguishing_order(xt, thetat, x, theta, projection, max_order)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed])))
    z = rng.standard_normal((budget, projection.output_dim))
    difference = AlphaExpansion(xt, thetat, projection).coefficient(d, z)
    difference = difference - AlphaExpansion(x, theta, projection).coefficient(d, z)
    scale = sigma ** (-2 * d) / math.factorial(d) ** 2
    values = scale * difference**2
    estimate = DivergenceEstimate(
        value=float(np.mean(values)),
        std_error=float(np.std(values, ddof=1) / math.sqrt(budget)),
        method=DivergenceMethod.MONTE_CARLO,
        budget=budget,
    )
    return estimate, d


def moment_pairing(
    xt, thetat: GroupDistribution, x, theta: GroupDistribution, projection: Projection, order: int
) -> float:
    """⟨M^d_{x̃,θ̃}, M^d_{x,θ}⟩."""
    return exact_moment(xt, thetat, projection, order).inner(exact_moment(x, theta, projection, order))
