"""Marginalized maximum likelihood by EM over the hidden group element, the normalized
log-likelihood ratio statistic, and the closed-form moment inversion for the two-point swap model."""

import math
from dataclasses import dataclass, field
from enum import StrEnum
from logging import getLogger
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import logsumexp

from app.channel import ObservationBatch, Projection
from app.divergence import mixture_logpdf
from app.errors import DimensionMismatchError, InfeasibleConstraintError, ToolkitError
from app.group import FiniteGroup, GroupDistribution, as_signal, orbit_distance, uniform_distribution
from app.parallel import ordered_map

logger = getLogger(__name__)


class ThetaMode(StrEnum):
    KNOWN = "known-fixed"
    ESTIMATED = "estimated"


class MleOptions(BaseModel):
    model_config = ConfigDict(frozen=True)

    restarts: int = Field(default=8, ge=1)
    max_iters: int = Field(default=500, ge=1)
    tol: float = Field(default=1e-9, gt=0)
    theta_mode: ThetaMode = ThetaMode.KNOWN
    init_scale: float = Field(default=1.0, gt=0)
    seed: int = Field(default=0, ge=0)


@dataclass(frozen=True, eq=False)
class FitResult:
    x_hat: np.ndarray
    theta_hat: GroupDistribution
    final_loglik: float
    iterations: int
    converged: bool
    loglik_trace: list[float] = field(default_factory=list)
    restart: int = 0
    singular: bool = False


def _e_step(
    y: np.ndarray, means: np.ndarray, log_theta: np.ndarray, sigma: float
) -> tuple[np.ndarray, float]:
    """Responsibilities r_{jg} and the log-likelihood, both in log space."""
    squared = np.sum((y[:, None, :] - means[None, :, :]) ** 2, axis=2)
    joint = log_theta[None, :] - squared / (2 * sigma**2)
    normalizer = logsumexp(joint, axis=1)
    responsibilities = np.exp(joint - normalizer[:, None])
    n, dim = y.shape
    loglik = float(np.sum(normalizer)) - 0.5 * n * dim * math.log(2 * math.pi * sigma**2)
    return responsibilities, loglik


def _m_step(
    y: np.ndarray, responsibilities: np.ndarray, operators: np.ndarray
) -> tuple[np.ndarray, bool]:
    """Solve (Σ_g w_g A_gᵀA_g) x = Σ_g A_gᵀ Σ_j r_{jg} y_j with A_g = P·g; lstsq when singular."""
    totals = responsibilities.sum(axis=0)
    weighted_sums = responsibilities.T @ y
    lhs = np.einsum("g,gkl,gkm->lm", totals, operators, operators)
    rhs = np.einsum("gkl,gk->l", operators, weighted_sums)
    if np.linalg.matrix_rank(lhs) < lhs.shape[0]:
        solution, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
        return solution, True
    return np.linalg.solve(lhs, rhs), False


def _log_weights(weights: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(weights)


def _run_em(
    y: np.ndarray,
    group: FiniteGroup,
    projection: Projection,
    sigma: float,
    x0: np.ndarray,
    theta0: GroupDistribution,
    opts: MleOptions,
    restart: int,
) -> FitResult:
    operators = np.einsum("kl,glm->gkm", projection.matrix, group.stacked)
    x = x0
    weights = theta0.weights
    responsibilities, loglik = _e_step(y, operators @ x, _log_weights(weights), sigma)
    trace = [loglik]
    converged = False
    singular = False
    iterations = 0
    while iterations < opts.max_iters:
        x, was_singular = _m_step(y, responsibilities, operators)
        singular = singular or was_singular
        if opts.theta_mode == ThetaMode.ESTIMATED:
            weights = responsibilities.mean(axis=0)
            weights = weights / weights.sum()
        iterations += 1
        previous = loglik
        responsibilities, loglik = _e_step(y, operators @ x, _log_weights(weights), sigma)
        trace.append(loglik)
        if abs(loglik - previous) <= opts.tol * abs(previous):
            converged = True
            break
    if singular:
        logger.warning("restart %d hit a singular M-step system; returning the least-squares solution", restart)
    return FitResult(
        x_hat=as_signal(x),
        theta_hat=GroupDistribution(group, weights),
        final_loglik=loglik,
        iterations=iterations,
        converged=converged and not singular,
        loglik_trace=trace,
        restart=restart,
        singular=singular,
    )


def mle_fit(
    batch: ObservationBatch,
    group: FiniteGroup,
    projection: Projection,
    sigma: float,
    opts: Optional[MleOptions] = None,
    theta: Optional[GroupDistribution] = None,
    x_init: Optional[np.ndarray] = None,
    threads: Optional[int] = None,
) -> FitResult:
    """Best-of-restarts EM estimate of x (and θ when estimated) from raw observations.

    Restart r starts from x₀ ~ N(0, (init_scale·rms(Y))²·I) drawn from its own stream; with
    ``x_init`` restart 0 starts there instead. ``theta`` is the known distribution in
    known-fixed mode (uniform when omitted) and is ignored when θ is estimated.
    """
    opts = opts or MleOptions()
    if not sigma > 0:
        raise ToolkitError(f"sigma must be positive, got {sigma}")
    if batch.dim != projection.output_dim or projection.input_dim != group.dimension:
        raise DimensionMismatchError(
            f"batch dimension {batch.dim}, projection {projection.matrix.shape} and group dimension "
            f"{group.dimension} are inconsistent"
        )
    if theta is not None and theta.group.order != group.order:
        raise DimensionMismatchError(f"theta has {theta.group.order} weights for a group of order {group.order}")
    y = batch.observations
    L = group.dimension
    theta0 = uniform_distribution(group)
    if opts.theta_mode == ThetaMode.KNOWN and theta is not None:
        theta0 = GroupDistribution(group, theta.weights)
    scale = opts.init_scale * float(np.sqrt(np.mean(y**2)))

    def fit(restart: int) -> FitResult:
        if restart == 0 and x_init is not None:
            x0 = np.array(as_signal(x_init))
            if x0.shape != (L,):
                raise DimensionMismatchError(f"x_init has shape {x0.shape}, expected ({L},)")
        else:
            rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([opts.seed, restart])))
            x0 = rng.normal(scale=scale, size=L)
        return _run_em(y, group, projection, sigma, x0, theta0, opts, restart)

    results = ordered_map(fit, range(opts.restarts), threads)
    best = max(results, key=lambda result: (result.final_loglik, -result.restart))
    logger.info(
        "mle fit: best restart %d of %d, loglik %.6f after %d iterations (converged=%s)",
        best.restart, opts.restarts, best.final_loglik, best.iterations, best.converged,
    )
    return best


def loglik_ratio_statistic(
    batch: ObservationBatch,
    candidate_x,
    candidate_theta: GroupDistribution,
    truth_x,
    truth_theta: GroupDistribution,
    projection: Projection,
    sigma: float,
    d_bar: int,
) -> float:
    """(σ^{2d̄}/N)·Σ_j log f_{x̃,θ̃}(Y_j)/f_{x,θ}(Y_j)."""
    if d_bar < 1:
        raise ToolkitError(f"d_bar must be >= 1, got {d_bar}")
    y = batch.observations
    log_candidate = mixture_logpdf(candidate_x, candidate_theta, projection, sigma, y)
    log_truth = mixture_logpdf(truth_x, truth_theta, projection, sigma, y)
    return float(sigma ** (2 * d_bar) * np.sum(log_candidate - log_truth) / batch.n_samples)


def mom_example2(m1: float, m2: float) -> tuple[float, float]:
    """Invert M¹ = (a+b)/2, M² = (a²+b²)/2 for the two-point swap model, larger value first."""
    spread_sq = m2 - m1**2
    if spread_sq < -1e-12:
        raise InfeasibleConstraintError(f"m2={m2} < m1²={m1**2}: no real solution")
    spread = math.sqrt(max(spread_sq, 0.0))
    return m1 + spread, m1 - spread


def aligned_squared_error(x_hat, x, group: FiniteGroup) -> float:
    """‖φ_x(x̂) − x‖²."""
    return orbit_distance(x_hat, x, group) ** 2
