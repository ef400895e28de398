"""Experiment orchestration: dispatch a validated config, emit the CSV table, and the built-in
verification suite for the two worked examples (three-point cyclic model, two-point swap model)."""

import math
import time
from dataclasses import dataclass, field
from datetime import datetime
from logging import getLogger
from pathlib import Path
from typing import Literal, Optional

import numpy as np

from app.artifacts import cutoff_document, output_dir, write_batch, write_csv, write_document
from app.bounds import BoundRow, bound_sweep, chapman_robbins_orbit, cr_limit_bound, mse_against_orbit
from app.channel import ChannelModel, coordinate_projection, simulate
from app.config import TOOLKIT_VERSION, ExperimentConfig, ExperimentKind
from app.divergence import (
    DivergenceMethod,
    chi2_divergence,
    chi2_leading_order,
    kl_divergence,
    kl_leading_order,
)
from app.errors import ToolkitError
from app.estimators import aligned_squared_error, mle_fit, mom_example2
from app.group import GroupDistribution, cyclic_shift_group, orbit_distance, uniform_distribution
from app.models import RunRecord
from app.moments import (
    ConstraintSet,
    SearchOptions,
    cutoff_search,
    directional_order,
    empirical_moment,
    exact_moment,
    first_distinguishing_order,
    moments_match,
)
from app.parallel import ordered_map

logger = getLogger(__name__)

ANALYTIC_TOL = 1e-9
WITNESS_TOL = 1e-4
BIGINT_RANGE = 2**63


@dataclass
class RunOutcome:
    record: RunRecord
    rows: list[dict]
    csv_path: Path
    extra_paths: list[Path] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return 2 if self.record.n_flagged else 0


def derived_seed(seed: int, *path: int) -> int:
    """A 63-bit seed for a sub-experiment, derived from the master seed through SeedSequence."""
    return int(np.random.SeedSequence([seed, *path]).generate_state(1, np.uint64)[0] >> np.uint64(1))


def _is_hard_failure(row: dict) -> bool:
    if row.get("status") == "FAIL":
        return True
    return any(flag.startswith("error:") for flag in str(row.get("flags", "")).split(";") if flag)


def _error_flag(error: Exception) -> str:
    return f"error:{type(error).__name__}"


def _signal_text(x: np.ndarray) -> str:
    return " ".join(repr(float(v)) for v in x)


def _truth(config: ExperimentConfig, sigma: float) -> ChannelModel:
    assert config.model is not None
    return config.model.channel(sigma)


def _witnesses(config: ExperimentConfig, truth: ChannelModel) -> list[tuple[str, np.ndarray, GroupDistribution]]:
    """Configured witnesses, or the witness of a cutoff search when none are configured."""
    witnesses = config.witness_models(truth.theta.group, truth.theta)
    if witnesses:
        return witnesses
    search = config.cutoff.search.model_copy(update={"seed": config.seed})
    report = cutoff_search(truth.x, truth.theta, truth.projection, config.cutoff.constraints, search, config.threads)
    logger.info("no witnesses configured; using the cutoff-search witness (d_bar=%d)", report.d_bar)
    return [("cutoff", np.array(report.witness_x), report.witness_theta)]


def _run_simulate(config: ExperimentConfig, csv_path: Path, extra: list[Path]) -> list[dict]:
    assert config.model is not None
    rows = []
    sizes = config.n_rule.sample_sizes(config.model.sigma)
    for index, (sigma, n) in enumerate(zip(config.model.sigma, sizes)):
        model = _truth(config, sigma)
        batch = simulate(model, n, config.seed, replicate=config.simulate.replicate, threads=config.threads)
        batch_path = write_batch(csv_path.with_name(f"{csv_path.stem}-s{index}.gacb"), batch)
        extra.append(batch_path)
        m1 = exact_moment(model.x, model.theta, model.projection, 1).entries
        rows.append(
            {
                "sigma": sigma,
                "N": n,
                "replicate": config.simulate.replicate,
                "model_digest": model.digest,
                "batch_file": batch_path.name,
                "first_moment_error": float(np.linalg.norm(batch.observations.mean(axis=0) - m1)),
            }
        )
    return rows


def _run_moments(config: ExperimentConfig) -> list[dict]:
    assert config.model is not None
    opts = config.moments
    model = _truth(config, config.model.sigma[0])
    batch = None
    if opts.n_samples is not None:
        batch = simulate(model, opts.n_samples, config.seed, threads=config.threads)
    rows = []
    for order in opts.orders:
        exact = exact_moment(model.x, model.theta, model.projection, order)
        empirical = None
        if batch is not None:
            empirical = empirical_moment(batch, order, model.sigma, debias=opts.debias and order <= 3)
        for index, value in exact.rows():
            estimate = float(empirical.entries[index]) if empirical is not None else math.nan
            rows.append(
                {
                    "order": order,
                    "multi_index": ",".join(str(i) for i in index),
                    "exact": value,
                    "empirical": estimate,
                    "abs_error": abs(estimate - value),
                }
            )
    return rows


def _run_cutoff(config: ExperimentConfig, csv_path: Path, extra: list[Path]) -> list[dict]:
    assert config.model is not None
    model = _truth(config, config.model.sigma[0])
    search = config.cutoff.search.model_copy(update={"seed": config.seed})
    report = cutoff_search(model.x, model.theta, model.projection, config.cutoff.constraints, search, config.threads)
    extra.append(write_document(csv_path.with_name(f"{csv_path.stem}-cutoff.json"), cutoff_document(report)))
    common = {
        "d_bar": report.d_bar,
        "certified": report.certified,
        "witness": _signal_text(report.witness_x),
        "notes": "; ".join(report.notes),
    }
    rows = [
        {"kind": "matched", "order": n, "squared_difference": value, **common} for n, value in report.matched_orders
    ]
    summary = {"kind": "summary", "order": report.d_bar, "squared_difference": report.first_distinguishing_order_value}
    rows.append(summary | common)
    return rows


def _divergence_rows(
    config: ExperimentConfig, sigma: float, index: int, witness: tuple[str, np.ndarray, GroupDistribution]
) -> list[dict]:
    opts = config.divergence
    truth = _truth(config, sigma)
    name, witness_x, witness_theta = witness
    candidate = ChannelModel(witness_x, witness_theta, truth.projection, sigma)
    method = opts.method
    flags: list[str] = []
    if method == DivergenceMethod.QUADRATURE and truth.output_dim > 2:
        method = DivergenceMethod.MONTE_CARLO
        flags.append("quadrature-unsupported")
    seed = derived_seed(config.seed, index)
    kinds = [("chi2", chi2_divergence, chi2_leading_order)]
    if opts.include_kl:
        kinds.append(("kl", kl_divergence, kl_leading_order))
    rows = []
    for label, exact_fn, leading_fn in kinds:
        row = {"sigma": sigma, "witness": name, "divergence": label, "method": str(method)}
        try:
            leading, d = leading_fn(
                witness_x, witness_theta, truth.x, truth.theta, truth.projection, sigma, opts.max_order
            )
            estimate = exact_fn(candidate, truth, method=method, budget=opts.budget, seed=seed)
        except ToolkitError as error:
            logger.warning("%s at sigma=%g failed: %s", label, sigma, error)
            row |= {"value": math.nan, "std_error": math.nan, "d": -1, "leading_order_value": math.nan,
                    "ratio": math.nan, "flags": ";".join([*flags, _error_flag(error)])}
        else:
            row |= {"value": estimate.value, "std_error": estimate.std_error, "d": d, "leading_order_value": leading,
                    "ratio": estimate.value / leading, "flags": ";".join(flags)}
        rows.append(row)
    return rows


def _run_divergence_sweep(config: ExperimentConfig) -> list[dict]:
    assert config.model is not None
    witness = _witnesses(config, _truth(config, config.model.sigma[0]))[0]
    blocks = ordered_map(
        lambda item: _divergence_rows(config, item[1], item[0], witness),
        list(enumerate(config.model.sigma)),
        config.threads,
    )
    return [row for block in blocks for row in block]


def _run_bound_sweep(config: ExperimentConfig) -> list[dict]:
    assert config.model is not None
    truth = _truth(config, config.model.sigma[0])
    witnesses = _witnesses(config, truth)
    opts = config.bounds.bound.model_copy(update={"seed": derived_seed(config.seed, 0)})
    table = bound_sweep(
        truth.x, truth.theta, truth.projection, witnesses, config.model.sigma, config.n_rule, opts, config.threads
    )
    rows = [row.as_dict() for row in table]
    if config.bounds.compare_cr_limit:
        sizes = config.n_rule.sample_sizes(config.model.sigma)
        for sigma, n in zip(config.model.sigma, sizes):
            for name, witness_x, witness_theta in witnesses:
                try:
                    report = cr_limit_bound(truth.x, truth.theta, witness_x, witness_theta, truth.projection, sigma, n)
                except ToolkitError as error:
                    logger.warning("cr-limit bound at sigma=%g for %s failed: %s", sigma, name, error)
                    rows.append(BoundRow(sigma, n, f"cr:{name}", None, (_error_flag(error),)).as_dict())
                else:
                    rows.append(BoundRow(sigma, n, f"cr:{name}", report, report.flags).as_dict())
    return rows


def _run_mle_sweep(config: ExperimentConfig) -> list[dict]:
    assert config.model is not None
    opts = config.mle
    sizes = config.n_rule.sample_sizes(config.model.sigma)
    rows: list[dict] = []
    for grid_index, (sigma, n) in enumerate(zip(config.model.sigma, sizes)):
        truth = _truth(config, sigma)
        group = truth.theta.group

        def replicate(r: int):
            batch = simulate(truth, n, config.seed, replicate=r, threads=1)
            fit_opts = opts.fit.model_copy(update={"seed": derived_seed(config.seed, grid_index, r)})
            return mle_fit(batch, group, truth.projection, sigma, fit_opts, theta=truth.theta, threads=1)

        fits = ordered_map(replicate, range(opts.replicates), config.threads)
        errors = []
        for r, fit in enumerate(fits):
            error = aligned_squared_error(fit.x_hat, truth.x, group)
            errors.append(error)
            rows.append(
                {"sigma": sigma, "N": n, "replicate": r, "statistic": "aligned_sq_error", "value": error,
                 "loglik": fit.final_loglik, "iterations": fit.iterations, "converged": fit.converged,
                 "flags": "singular" if fit.singular else ""}
            )
        report = mse_against_orbit([fit.x_hat for fit in fits], truth.x, group)
        summary = {
            "median": float(np.median(errors)),
            "mse": report.mse,
            "mse_std_error": report.std_error,
            "bias_sq": report.bias_sq,
            "cov_trace": report.cov_trace,
        }
        for statistic, value in summary.items():
            rows.append(
                {"sigma": sigma, "N": n, "replicate": -1, "statistic": statistic, "value": value,
                 "loglik": None, "iterations": None, "converged": None, "flags": ""}
            )
        logger.info("mle sweep sigma=%g N=%d: median aligned error %.4g", sigma, n, summary["median"])
    return rows


@dataclass(frozen=True)
class VerifyRow:
    check: str
    expected: float
    actual: float
    status: Literal["PASS", "FAIL", "SKIP"]
    tolerance: float = ANALYTIC_TOL
    note: str = ""

    def as_dict(self) -> dict:
        return {
            "check": self.check,
            "expected": self.expected,
            "actual": self.actual,
            "tolerance": self.tolerance,
            "status": self.status,
            "note": self.note,
        }


def _check(check: str, expected: float, actual: float, tolerance: float = ANALYTIC_TOL, note: str = "") -> VerifyRow:
    passed = abs(actual - expected) <= tolerance * max(1.0, abs(expected))
    return VerifyRow(check, float(expected), float(actual), "PASS" if passed else "FAIL", tolerance, note)


def _skip(check: str, note: str) -> VerifyRow:
    return VerifyRow(check, math.nan, math.nan, "SKIP", note=note)


def _verify_cyclic_three(b: float, c: float, transposed: bool, seed: int, threads: Optional[int]) -> list[VerifyRow]:
    if b == c or b == 0 or c == 0:
        return [_skip("example-1", "needs one zero and two distinct nonzero entries; x* would lie in the orbit of x")]
    group = cyclic_shift_group(3, transposed=transposed)
    projection = coordinate_projection(3, [0, 1])
    theta = uniform_distribution(group)
    x = np.array([0.0, b, c])
    x_star = np.array([0.0, c, b])
    rows = []

    m1 = exact_moment(x, theta, projection, 1).entries
    for i in range(2):
        rows.append(_check(f"ex1.M1[{i}]", (b + c) / 3, m1[i]))
    m2 = exact_moment(x, theta, projection, 2).entries
    expected_m2 = np.array([[b**2 + c**2, b * c], [b * c, b**2 + c**2]]) / 3
    for i, j in np.ndindex(2, 2):
        rows.append(_check(f"ex1.M2[{i},{j}]", expected_m2[i, j], m2[i, j]))

    # θ = (½, ½, 0) on (I, R, R²): I·x and R·x project to (0, b) and (c, 0)
    skewed = GroupDistribution(group, np.array([0.5, 0.5, 0.0]))
    m2_skewed = exact_moment(x, skewed, projection, 2).entries
    expected_skewed = np.array([[c**2, 0.0], [0.0, b**2]]) / 2
    for i, j in np.ndindex(2, 2):
        rows.append(_check(f"ex1.M2_skewed[{i},{j}]", expected_skewed[i, j], m2_skewed[i, j], note="theta=(1/2,1/2,0)"))

    for order in (1, 2):
        a_moment = exact_moment(x_star, theta, projection, order)
        b_moment = exact_moment(x, theta, projection, order)
        rows.append(_check(f"ex1.M{order}_matches_x_star", 1.0, float(moments_match(a_moment, b_moment))))
    difference = exact_moment(x_star, theta, projection, 3).entries - exact_moment(x, theta, projection, 3).entries
    rows.append(_check("ex1.M3_distance_sq", 6 * (b**2 * c - c**2 * b) ** 2, float(np.sum(difference**2))))
    d, k_d = first_distinguishing_order(x_star, theta, x, theta, projection)
    rows.append(_check("ex1.d", 3, d))
    rows.append(_check("ex1.K3", (b**2 * c - c**2 * b) ** 2, k_d))

    report = cutoff_search(
        x, theta, projection, ConstraintSet(zero_entries=1, theta_known=True), SearchOptions(seed=seed), threads
    )
    rows.append(_check("ex1.d_bar", 3, report.d_bar))
    rows.append(
        _check("ex1.witness_in_orbit_of_x_star", 0.0, orbit_distance(report.witness_x, x_star, group), WITNESS_TOL)
    )

    numerator = 2 * min(b**2, c**2, (b - c) ** 2)
    rows.append(_check("ex1.aligned_distance_sq", numerator, aligned_squared_error(x_star, x, group)))
    # σ = 2 and N = σ⁶ give λ³ = 1
    bound = chapman_robbins_orbit(x_star, theta, x, theta, projection, 2.0, 64, chi2_mode="leading-order")
    rows.append(_check("ex1.leading_order_bound", numerator / math.expm1((b**2 * c - c**2 * b) ** 2), bound.mse_lower))
    return rows


def _verify_swap_two(a: float, b: float) -> list[VerifyRow]:
    if a == b:
        return [_skip("example-2", "a = b puts every alternative in the orbit of x")]
    group = cyclic_shift_group(2)
    projection = coordinate_projection(2, [0])
    theta = uniform_distribution(group)
    x = np.array([a, b])
    rows = [
        _check("ex2.M1", (a + b) / 2, exact_moment(x, theta, projection, 1).entries[0]),
        _check("ex2.M2", (a**2 + b**2) / 2, exact_moment(x, theta, projection, 2).entries[0, 0]),
    ]
    high, low = mom_example2((a + b) / 2, (a**2 + b**2) / 2)
    rows.append(_check("ex2.inversion_high", max(a, b), high))
    rows.append(_check("ex2.inversion_low", min(a, b), low))

    direction = np.array([a + 1.0, b - 1.0])
    q, q_value = directional_order(x, theta, direction, theta, projection)
    rows.append(_check("ex2.q", 2, q))
    rows.append(_check("ex2.Q2", (a - b) ** 2 / 2, q_value))

    report = cutoff_search(x, theta, projection, ConstraintSet(theta_known=True), SearchOptions(max_order=3))
    rows.append(_check("ex2.d_bar", 2, report.d_bar))

    # σ = 2 and N = σ⁴ give λ² = 1
    bound = cr_limit_bound(x, theta, direction, theta, projection, 2.0, 16)
    rows.append(_check("ex2.cr_limit_bound", 4 / (a - b) ** 2, bound.mse_lower))
    return rows


def verify_examples(
    example1: tuple[float, float] = (1.0, 2.0),
    example2: tuple[float, float] = (1.0, 2.0),
    shift_convention: Literal["standard", "transposed"] = "standard",
    seed: int = 0,
    threads: Optional[int] = None,
) -> list[VerifyRow]:
    """Closed-form checks for both worked examples.

    ``shift_convention="transposed"`` builds the cyclic group from Rᵀ; the skewed-θ second
    moment rows then fail, which is how the suite detects a convention error.
    """
    rows = _verify_cyclic_three(*example1, transposed=shift_convention == "transposed", seed=seed, threads=threads)
    rows += _verify_swap_two(*example2)
    failed = [row.check for row in rows if row.status == "FAIL"]
    if failed:
        logger.warning("verification failed: %s", ", ".join(failed))
    else:
        logger.info("verification: %d checks, none failed", len(rows))
    return rows


def _run_verify(config: ExperimentConfig) -> list[dict]:
    rows = verify_examples(shift_convention=config.verify.shift_convention, seed=config.seed, threads=config.threads)
    return [row.as_dict() for row in rows]


def default_output_path(config: ExperimentConfig) -> Path:
    return output_dir() / f"{config.experiment}-{config.digest()}.csv"


def run(config: ExperimentConfig, out: Optional[Path] = None) -> RunOutcome:
    """Run one experiment and write its CSV; every row carries the config digest."""
    digest = config.digest()
    csv_path = out or (Path(config.output) if config.output else default_output_path(config))
    started_at = datetime.utcnow()
    clock = time.perf_counter()
    extra: list[Path] = []
    logger.info("starting %s experiment (digest %s, seed %d)", config.experiment, digest, config.seed)

    match config.experiment:
        case ExperimentKind.SIMULATE:
            rows = _run_simulate(config, csv_path, extra)
        case ExperimentKind.MOMENTS:
            rows = _run_moments(config)
        case ExperimentKind.CUTOFF:
            rows = _run_cutoff(config, csv_path, extra)
        case ExperimentKind.DIVERGENCE_SWEEP:
            rows = _run_divergence_sweep(config)
        case ExperimentKind.BOUND_SWEEP:
            rows = _run_bound_sweep(config)
        case ExperimentKind.MLE_SWEEP:
            rows = _run_mle_sweep(config)
        case ExperimentKind.VERIFY:
            rows = _run_verify(config)

    rows = [{"config_digest": digest, **row} for row in rows]
    header = {
        "config_digest": digest,
        "seed": str(config.seed),
        "experiment": str(config.experiment),
        "toolkit_version": TOOLKIT_VERSION,
    }
    write_csv(csv_path, rows, header)
    n_flagged = sum(_is_hard_failure(row) for row in rows)
    record = RunRecord(
        config_digest=digest,
        experiment=str(config.experiment),
        seed=config.seed if config.seed < BIGINT_RANGE else config.seed - 2**64,
        toolkit_version=TOOLKIT_VERSION,
        started_at=started_at,
        wall_clock_seconds=time.perf_counter() - clock,
        n_rows=len(rows),
        n_flagged=n_flagged,
        output_path=str(csv_path),
        status="flagged" if n_flagged else "ok",
    )
    logger.info(
        "finished %s: %d rows, %d flagged, %.2fs", config.experiment, len(rows), n_flagged, record.wall_clock_seconds
    )
    return RunOutcome(record=record, rows=rows, csv_path=csv_path, extra_paths=extra)
