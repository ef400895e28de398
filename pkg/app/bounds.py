"""Chapman-Robbins lower bounds for estimating an orbit, and MSE accounting against the orbit."""

import math
from dataclasses import dataclass, field
from enum import StrEnum
from logging import getLogger
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.channel import ChannelModel, Projection
from app.divergence import LOG_OVERFLOW, DivergenceMethod, chi2_divergence, chi2_n_samples, log_expm1
from app.errors import DimensionMismatchError, NoDistinguishingOrderError, NoInformationError, ToolkitError
from app.group import FiniteGroup, GroupDistribution, as_signal, best_alignment
from app.moments import directional_order, first_distinguishing_order
from app.parallel import ordered_map

logger = getLogger(__name__)

UNDERFLOW_FLOOR = 1e-300
NO_INFORMATION_CAP = 1e12


class BoundForm(StrEnum):
    EXACT_CHI2 = "exact-chi2"
    LEADING_ORDER = "leading-order"
    CR_LIMIT = "cr-limit"


@dataclass(frozen=True)
class MseReport:
    mse: float
    bias_sq: float
    cov_trace: float
    n_estimates: int
    std_error: float = 0.0


def mse_against_orbit(estimates: Sequence[np.ndarray], x, group: FiniteGroup) -> MseReport:
    """Empirical E‖φ_x(X̂) − x‖² split into squared bias and covariance trace.

    The covariance uses the 1/M normalization so that mse = cov_trace + bias_sq holds exactly.
    """
    if len(estimates) == 0:
        raise ToolkitError("mse_against_orbit needs at least one estimate")
    x = as_signal(x)
    aligned = np.stack([best_alignment(estimate, x, group)[0] for estimate in estimates])
    errors = np.sum((aligned - x[None, :]) ** 2, axis=1)
    mean = aligned.mean(axis=0)
    bias_sq = float(np.sum((mean - x) ** 2))
    cov_trace = float(np.sum((aligned - mean[None, :]) ** 2) / len(estimates))
    std_error = float(np.std(errors, ddof=1) / math.sqrt(len(errors))) if len(errors) > 1 else 0.0
    return MseReport(
        mse=float(errors.mean()), bias_sq=bias_sq, cov_trace=cov_trace, n_estimates=len(estimates), std_error=std_error
    )


@dataclass(frozen=True, eq=False)
class BoundReport:
    mse_lower: float
    witness_x: np.ndarray
    witness_theta: GroupDistribution
    d: int
    lam: float
    chi2_n: float
    form: BoundForm
    numerator: float
    k_d: float
    log_chi2_n: float
    sigma: float
    n_samples: int
    flags: tuple[str, ...] = field(default_factory=tuple)


def covariance_lower_bound(z, chi2_n: float) -> np.ndarray:
    """zzᵀ/χ²_N, valid for any z = E_{x̃,θ̃}[φ_x(X̂)] − E_{x,θ}[φ_x(X̂)]."""
    if not chi2_n > 0:
        raise NoInformationError(f"chi2_N must be positive, got {chi2_n}")
    z = as_signal(z)
    return np.outer(z, z) / chi2_n


def _lambda(n_samples: int, sigma: float, order: int) -> float:
    return n_samples / sigma ** (2 * order)


def _assemble(
    numerator: float,
    log_chi2_n: float,
    *,
    witness_x: np.ndarray,
    witness_theta: GroupDistribution,
    d: int,
    lam: float,
    form: BoundForm,
    k_d: float,
    sigma: float,
    n_samples: int,
    flags: list[str],
) -> BoundReport:
    """numerator/χ²_N evaluated in log space, with the underflow and no-information caps applied."""
    log_bound = math.log(numerator) - log_chi2_n
    if log_bound > math.log(numerator * NO_INFORMATION_CAP):
        logger.warning("no-information regime at sigma=%g, N=%d: bound capped", sigma, n_samples)
        flags.append("no-information")
        mse_lower = numerator * NO_INFORMATION_CAP
    elif log_bound < math.log(UNDERFLOW_FLOOR):
        flags.append("underflow")
        mse_lower = 0.0
    else:
        mse_lower = math.exp(log_bound)
    chi2_n = math.exp(log_chi2_n) if log_chi2_n < LOG_OVERFLOW else math.inf
    return BoundReport(
        mse_lower=mse_lower,
        witness_x=as_signal(witness_x),
        witness_theta=witness_theta,
        d=d,
        lam=lam,
        chi2_n=chi2_n,
        form=form,
        numerator=numerator,
        k_d=k_d,
        log_chi2_n=log_chi2_n,
        sigma=sigma,
        n_samples=n_samples,
        flags=tuple(flags),
    )


def chapman_robbins_orbit(
    witness_x,
    witness_theta: GroupDistribution,
    x,
    theta: GroupDistribution,
    projection: Projection,
    sigma: float,
    n_samples: int,
    chi2_mode: BoundForm | str = BoundForm.LEADING_ORDER,
    max_order: int = 6,
    budget: int = 200_000,
    seed: int = 0,
    threads: Optional[int] = None,
) -> BoundReport:
    """Lower bound ‖φ_x(x̃) − x‖²/χ²(f^N_{x̃,θ̃}‖f^N_{x,θ}) on the orbit MSE.

    ``exact-chi2`` computes the single-observation χ² (quadrature for K ≤ 2, Monte Carlo
    otherwise) and tensorizes it; ``leading-order`` uses exp(λ^d_N·K^d) − 1.
    """
    if n_samples < 1:
        raise ToolkitError(f"N must be positive, got {n_samples}")
    witness_x = as_signal(witness_x)
    x = as_signal(x)
    aligned, _ = best_alignment(witness_x, x, theta.group)
    numerator = float(np.sum((aligned - x) ** 2))
    try:
        d, k_d = first_distinguishing_order(witness_x, witness_theta, x, theta, projection, max_order)
    except NoDistinguishingOrderError as error:
        raise NoInformationError(f"witness is indistinguishable from the truth up to order {max_order}") from error
    if numerator == 0:
        raise NoInformationError("witness lies in the orbit of the truth, so z = 0")
    lam = _lambda(n_samples, sigma, d)
    flags: list[str] = []

    match BoundForm(chi2_mode):
        case BoundForm.LEADING_ORDER:
            exponent = lam * k_d
            if exponent == 0:
                raise NoInformationError(f"lambda*K underflows to 0 at sigma={sigma}")
            log_chi2_n = log_expm1(exponent)
            form = BoundForm.LEADING_ORDER
        case BoundForm.EXACT_CHI2:
            method = DivergenceMethod.QUADRATURE if projection.output_dim <= 2 else DivergenceMethod.MONTE_CARLO
            estimate = chi2_divergence(
                ChannelModel(witness_x, witness_theta, projection, sigma),
                ChannelModel(x, theta, projection, sigma),
                method=method,
                budget=budget,
                seed=seed,
                threads=threads,
            )
            if estimate.value <= 0:
                raise NoInformationError(f"single-observation chi2 is {estimate.value} at sigma={sigma}")
            if estimate.method == DivergenceMethod.MONTE_CARLO:
                flags.append("monte-carlo-chi2")
            tensorized = chi2_n_samples(estimate.value, n_samples)
            log_chi2_n = tensorized.log_value
            form = BoundForm.EXACT_CHI2
        case _:
            raise ToolkitError(f"chapman_robbins_orbit does not support form {chi2_mode!r}")

    flags.append("asymptotic-z")
    return _assemble(
        numerator,
        log_chi2_n,
        witness_x=witness_x,
        witness_theta=witness_theta,
        d=d,
        lam=lam,
        form=form,
        k_d=k_d,
        sigma=sigma,
        n_samples=n_samples,
        flags=flags,
    )


def cr_limit_bound(
    x,
    theta: GroupDistribution,
    direction_x,
    direction_theta: GroupDistribution,
    projection: Projection,
    sigma: float,
    n_samples: int,
    max_order: int = 6,
) -> BoundReport:
    """‖x̃ − x‖²/(λ^q_N·Q^q) along the path x_h = x + h(x̃ − x), θ_h = θ + h(θ̃ − θ).

    The numerator is the h → 0 limit of ‖φ_x(x_h) − x‖²/h². The O(λ·σ^{−1}) correction of the
    denominator is not included and the report carries a flag saying so.
    """
    if n_samples < 1:
        raise ToolkitError(f"N must be positive, got {n_samples}")
    x = as_signal(x)
    direction_x = as_signal(direction_x)
    if direction_x.shape != x.shape:
        raise DimensionMismatchError(f"direction has shape {direction_x.shape}, signal has shape {x.shape}")
    numerator = float(np.sum((direction_x - x) ** 2))
    if numerator == 0 and np.array_equal(direction_theta.weights, theta.weights):
        raise NoInformationError("zero direction")
    q, q_value = directional_order(x, theta, direction_x, direction_theta, projection, max_order)
    if numerator == 0:
        raise NoInformationError("direction moves only theta, so the orbit error along it is zero")
    lam = _lambda(n_samples, sigma, q)
    return _assemble(
        numerator,
        math.log(lam * q_value),
        witness_x=direction_x,
        witness_theta=direction_theta,
        d=q,
        lam=lam,
        form=BoundForm.CR_LIMIT,
        k_d=q_value,
        sigma=sigma,
        n_samples=n_samples,
        flags=["neglects O(lambda/sigma)"],
    )


@dataclass(frozen=True)
class BoundComparison:
    leading_order: float
    cr_limit: float
    dominant: BoundForm
    ratio: float


def compare_bound_forms(leading: BoundReport, cr_limit: BoundReport) -> BoundComparison:
    """Which of the moment-cutoff bound and the directional limit bound is larger."""
    dominant = BoundForm.LEADING_ORDER if leading.mse_lower >= cr_limit.mse_lower else BoundForm.CR_LIMIT
    ratio = leading.mse_lower / cr_limit.mse_lower if cr_limit.mse_lower > 0 else math.inf
    return BoundComparison(leading.mse_lower, cr_limit.mse_lower, dominant, ratio)


class NRule(BaseModel):
    """Sample sizes for a σ grid: an explicit list matched position by position, or N = c·σ^{2m}."""

    model_config = ConfigDict(frozen=True)

    counts: Optional[list[int]] = None
    coefficient: float = Field(default=1.0, gt=0)
    order: int = Field(default=1, ge=0)

    @model_validator(mode="after")
    def check_counts(self) -> "NRule":
        if self.counts is not None:
            if not self.counts:
                raise ValueError("explicit N list must be nonempty")
            if any(n < 1 for n in self.counts):
                raise ValueError("every N must be positive")
        return self

    def sample_sizes(self, sigma_grid: Sequence[float]) -> list[int]:
        if self.counts is not None:
            if len(self.counts) != len(sigma_grid):
                raise DimensionMismatchError(f"{len(self.counts)} N values for {len(sigma_grid)} sigma values")
            return list(self.counts)
        return [max(1, round(self.coefficient * sigma ** (2 * self.order))) for sigma in sigma_grid]


class BoundOptions(BaseModel):
    model_config = ConfigDict(frozen=True)

    chi2_mode: BoundForm = BoundForm.LEADING_ORDER
    max_order: int = Field(default=6, ge=1, le=8)
    budget: int = Field(default=200_000, ge=1)
    seed: int = Field(default=0, ge=0)


@dataclass(frozen=True, eq=False)
class BoundRow:
    sigma: float
    n_samples: int
    witness_id: str
    report: Optional[BoundReport]
    flags: tuple[str, ...] = ()

    def as_dict(self) -> dict:
        report = self.report
        return {
            "sigma": self.sigma,
            "N": self.n_samples,
            "lambda": report.lam if report else math.nan,
            "d": report.d if report else -1,
            "K_d": report.k_d if report else math.nan,
            "chi2_n": report.chi2_n if report else math.nan,
            "mse_lower": report.mse_lower if report else math.nan,
            "witness": self.witness_id,
            "form": str(report.form) if report else "",
            "flags": ";".join(self.flags),
        }


def bound_sweep(
    x,
    theta: GroupDistribution,
    projection: Projection,
    witnesses: Sequence[tuple[str, np.ndarray, GroupDistribution]],
    sigma_grid: Sequence[float],
    n_rule: NRule,
    opts: Optional[BoundOptions] = None,
    threads: Optional[int] = None,
) -> list[BoundRow]:
    """One row per (σ, witness) in grid order, each σ followed by a ``sup`` row over its witnesses."""
    if not witnesses or not sigma_grid:
        raise ToolkitError("bound_sweep needs at least one witness and one sigma")
    opts = opts or BoundOptions()
    sizes = n_rule.sample_sizes(sigma_grid)
    points = [(sigma, n, witness) for sigma, n in zip(sigma_grid, sizes) for witness in witnesses]

    def evaluate(point: tuple[float, int, tuple[str, np.ndarray, GroupDistribution]]) -> BoundRow:
        sigma, n, (witness_id, witness_x, witness_theta) = point
        try:
            report = chapman_robbins_orbit(
                witness_x, witness_theta, x, theta, projection, sigma, n,
                chi2_mode=opts.chi2_mode, max_order=opts.max_order, budget=opts.budget, seed=opts.seed,
            )
        except ToolkitError as error:
            logger.warning("bound at sigma=%g, N=%d, witness %s failed: %s", sigma, n, witness_id, error)
            return BoundRow(sigma, n, witness_id, None, (f"error:{type(error).__name__}",))
        return BoundRow(sigma, n, witness_id, report, report.flags)

    rows = ordered_map(evaluate, points, threads)
    table: list[BoundRow] = []
    per_sigma = len(witnesses)
    for start in range(0, len(rows), per_sigma):
        block = rows[start : start + per_sigma]
        table.extend(block)
        successful = [row for row in block if row.report is not None]
        if successful:
            best = max(successful, key=lambda row: row.report.mse_lower)
            table.append(BoundRow(best.sigma, best.n_samples, f"sup:{best.witness_id}", best.report, best.flags))
        else:
            table.append(BoundRow(block[0].sigma, block[0].n_samples, "sup", None, ("error:all-witnesses-failed",)))
    logger.info("bound sweep finished: %d grid points, %d witnesses", len(sigma_grid), len(witnesses))
    return table
