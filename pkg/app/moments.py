"""Moment tensors M^n_{x,θ} = E[(P·G·x)^{⊗n}], moment distances and the moment order cutoff search."""

import itertools
import math
from dataclasses import dataclass, field
from logging import getLogger
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import least_squares
from scipy.special import softmax

from app.channel import ObservationBatch, Projection, projected_orbit
from app.errors import DimensionMismatchError, InfeasibleConstraintError, NoDistinguishingOrderError, ToolkitError
from app.group import GroupDistribution, as_signal, orbit_distance
from app.parallel import ordered_map

logger = getLogger(__name__)

ROW_BLOCK = 16_384
SYMMETRY_TOL = 1e-12
# relative thresholds below which squared moment differences and derivatives count as zero
MOMENT_MATCH_RTOL = 1e-20
DIRECTIONAL_RTOL = 1e-12
_SUBSCRIPTS = "abcdefghijklmnopqrstuvwxy"


@dataclass(frozen=True, eq=False)
class MomentTensor:
    order: int
    dim: int
    entries: np.ndarray

    def __post_init__(self):
        if self.order < 1:
            raise ToolkitError(f"moment order must be >= 1, got {self.order}")
        entries = np.array(self.entries, dtype=np.float64)
        if entries.shape != (self.dim,) * self.order:
            raise DimensionMismatchError(f"order-{self.order} tensor of dim {self.dim} has shape {entries.shape}")
        entries.flags.writeable = False
        object.__setattr__(self, "entries", entries)

    def inner(self, other: "MomentTensor") -> float:
        _check_same_shape(self, other)
        return float(np.sum(self.entries * other.entries))

    @property
    def norm_sq(self) -> float:
        return self.inner(self)

    def symmetrized(self) -> "MomentTensor":
        permutations = list(itertools.permutations(range(self.order)))
        total = sum(np.transpose(self.entries, p) for p in permutations)
        return MomentTensor(self.order, self.dim, total / len(permutations))

    def asymmetry(self) -> float:
        """Largest deviation of any entry from its value under an index permutation."""
        return max(
            float(np.max(np.abs(self.entries - np.transpose(self.entries, p))))
            for p in itertools.permutations(range(self.order))
        )

    def rows(self) -> list[tuple[tuple[int, ...], float]]:
        """(multi_index, value) pairs in row-major order."""
        return [(index, float(self.entries[index])) for index in np.ndindex(*self.entries.shape)]


def _check_same_shape(a: MomentTensor, b: MomentTensor) -> None:
    if a.order != b.order or a.dim != b.dim:
        raise DimensionMismatchError(
            f"tensor shapes differ: order {a.order}/dim {a.dim} vs order {b.order}/dim {b.dim}"
        )


def weighted_tensor_power(vectors: np.ndarray, weights: np.ndarray, order: int) -> np.ndarray:
    """Σ_i weights[i]·vectors[i]^{⊗order}, accumulated over row blocks."""
    if order < 1:
        raise ToolkitError(f"moment order must be >= 1, got {order}")
    if order > len(_SUBSCRIPTS):
        raise ToolkitError(f"moment order {order} is too large")
    letters = _SUBSCRIPTS[:order]
    expression = "z," + ",".join(f"z{letter}" for letter in letters) + "->" + letters
    dim = vectors.shape[1]
    total = np.zeros((dim,) * order)
    for start in range(0, vectors.shape[0], ROW_BLOCK):
        block = vectors[start : start + ROW_BLOCK]
        total += np.einsum(expression, weights[start : start + ROW_BLOCK], *([block] * order))
    return total


def _moment_entries(x: np.ndarray, weights: np.ndarray, theta: GroupDistribution, projection: Projection, order: int):
    return weighted_tensor_power(projected_orbit(x, theta, projection), weights, order)


def exact_moment(x, theta: GroupDistribution, projection: Projection, order: int) -> MomentTensor:
    """Σ_g θ_g (P·g·x)^{⊗n}."""
    x = as_signal(x)
    entries = _moment_entries(x, theta.weights, theta, projection, order)
    return MomentTensor(order, projection.output_dim, entries)


def empirical_moment(batch: ObservationBatch, order: int, sigma: float, debias: bool = True) -> MomentTensor:
    """(1/N)·Σ_j Y_j^{⊗n}, optionally minus the additive Gaussian noise contribution (orders ≤ 3)."""
    if debias and order > 3:
        raise ToolkitError(f"debiasing is implemented for orders <= 3, got {order}")
    y = batch.observations
    n, dim = y.shape
    entries = weighted_tensor_power(y, np.full(n, 1.0 / n), order)
    if debias and order >= 2:
        variance = sigma**2
        eye = np.eye(dim)
        if order == 2:
            entries = entries - variance * eye
        else:
            m1 = y.mean(axis=0)
            entries = entries - variance * (
                np.einsum("i,jk->ijk", m1, eye) + np.einsum("j,ik->ijk", m1, eye) + np.einsum("k,ij->ijk", m1, eye)
            )
    return MomentTensor(order, dim, entries).symmetrized()


def moment_distance(a: MomentTensor, b: MomentTensor) -> float:
    """K = (1/n!)·‖A − B‖²."""
    _check_same_shape(a, b)
    return float(np.sum((a.entries - b.entries) ** 2)) / math.factorial(a.order)


def moments_match(a: MomentTensor, b: MomentTensor) -> bool:
    scale = max(1.0, a.norm_sq, b.norm_sq)
    return float(np.sum((a.entries - b.entries) ** 2)) <= MOMENT_MATCH_RTOL * scale


def first_distinguishing_order(
    xt, thetat: GroupDistribution, x, theta: GroupDistribution, projection: Projection, max_order: int = 6
) -> tuple[int, float]:
    """(d, K^d) for the first order whose moment tensors differ."""
    for order in range(1, max_order + 1):
        a = exact_moment(xt, thetat, projection, order)
        b = exact_moment(x, theta, projection, order)
        if not moments_match(a, b):
            return order, moment_distance(a, b)
    raise NoDistinguishingOrderError(f"moment tensors agree up to order {max_order}")


def _interpolation_nodes(order: int) -> np.ndarray:
    # n+2 nodes 0, ±1, ±2, ... scaled by 1/(n+2); the path moment has degree ≤ n+1 in h
    count = order + 2
    ks = [0] + [sign * k for k in range(1, count) for sign in (1, -1)]
    return np.array(ks[:count], dtype=np.float64) / count


def moment_derivative(
    x,
    theta: GroupDistribution,
    xt,
    thetat: GroupDistribution,
    projection: Projection,
    order: int,
    method: Literal["interpolation", "product-rule"] = "interpolation",
) -> np.ndarray:
    """(d/dh) M^n_{x_h,θ_h} at h = 0 along x_h = (1−h)x + h·x̃, θ_h = (1−h)θ + h·θ̃."""
    x = as_signal(x)
    xt = as_signal(xt)
    if x.shape != xt.shape:
        raise DimensionMismatchError(f"signal shapes differ: {x.shape} vs {xt.shape}")
    if thetat.group.order != theta.group.order:
        raise DimensionMismatchError("direction distribution lives on a different group")
    match method:
        case "interpolation":
            nodes = _interpolation_nodes(order)
            vandermonde = np.vander(nodes, increasing=True)
            unit = np.zeros(len(nodes))
            unit[1] = 1.0
            derivative_weights = np.linalg.solve(vandermonde.T, unit)
            values = [
                _moment_entries((1 - h) * x + h * xt, theta.mix(thetat, h), theta, projection, order) for h in nodes
            ]
            return sum(w * value for w, value in zip(derivative_weights, values))
        case "product-rule":
            v = projected_orbit(x, theta, projection)
            dv = projected_orbit(xt, theta, projection) - v
            dtheta = thetat.weights - theta.weights
            result = weighted_tensor_power(v, dtheta, order)
            for position in range(order):
                factors = [v] * order
                factors[position] = dv
                letters = _SUBSCRIPTS[:order]
                expression = "z," + ",".join(f"z{letter}" for letter in letters) + "->" + letters
                result = result + np.einsum(expression, theta.weights, *factors)
            return result
        case _:
            raise ToolkitError(f"unknown derivative method {method!r}")


def directional_q(
    x, theta: GroupDistribution, xt, thetat: GroupDistribution, projection: Projection, order: int
) -> float:
    """Q^n = (1/n!)·‖(d/dh) M^n_{x_h,θ_h}|_{h=0}‖²."""
    derivative = moment_derivative(x, theta, xt, thetat, projection, order)
    return float(np.sum(derivative**2)) / math.factorial(order)


def directional_order(
    x, theta: GroupDistribution, xt, thetat: GroupDistribution, projection: Projection, max_order: int = 6
) -> tuple[int, float]:
    """(q, Q^q) for the first order with a nonzero directional derivative."""
    for order in range(1, max_order + 1):
        q_value = directional_q(x, theta, xt, thetat, projection, order)
        scale = max(1.0, exact_moment(x, theta, projection, order).norm_sq)
        if q_value > DIRECTIONAL_RTOL * scale:
            return order, q_value
    raise NoDistinguishingOrderError(f"directional derivatives vanish up to order {max_order}")


class ConstraintSet(BaseModel):
    """Admissible set A for (x̃, θ̃).

    ``zero_entries`` asks for exactly that many zero coordinates in x̃;
    ``theta_known`` fixes θ̃ = θ, otherwise θ̃ ranges over the simplex.
    """

    model_config = ConfigDict(frozen=True)

    zero_entries: Optional[int] = Field(default=None, ge=0)
    theta_known: bool = True


class SearchOptions(BaseModel):
    model_config = ConfigDict(frozen=True)

    max_order: int = Field(default=4, ge=1, le=8)
    match_tol: float = Field(default=1e-9, gt=0)
    orbit_floor: float = Field(default=1e-3, gt=0)
    restarts: int = Field(default=64, ge=1)
    seed: int = Field(default=0, ge=0)
    penalty_weight: float = Field(default=1e4, gt=0)


@dataclass(frozen=True, eq=False)
class CutoffReport:
    d_bar: int
    witness_x: np.ndarray
    witness_theta: GroupDistribution
    matched_orders: list[tuple[int, float]]
    first_distinguishing_order_value: float
    certified: bool
    objective: float = math.nan
    notes: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class _Candidate:
    objective: float
    x: np.ndarray
    theta_weights: np.ndarray
    orbit_distance: float
    restart: int


def _support_patterns(L: int, constraints: ConstraintSet) -> list[tuple[int, ...]]:
    """Free coordinate index sets allowed by the zero-entry constraint."""
    if constraints.zero_entries is None:
        return [tuple(range(L))]
    if constraints.zero_entries > L:
        raise InfeasibleConstraintError(f"cannot place {constraints.zero_entries} zeros in a signal of length {L}")
    return [
        tuple(i for i in range(L) if i not in zeros)
        for zeros in itertools.combinations(range(L), constraints.zero_entries)
    ]


def _search_order(
    d: int,
    x: np.ndarray,
    theta: GroupDistribution,
    projection: Projection,
    constraints: ConstraintSet,
    opts: SearchOptions,
    threads: Optional[int],
) -> _Candidate:
    group = theta.group
    L = x.shape[0]
    targets = [_moment_entries(x, theta.weights, theta, projection, n).ravel() for n in range(1, d + 1)]
    patterns = _support_patterns(L, constraints)
    scale = float(np.sqrt(np.mean(x**2))) or 1.0

    def unpack(params: np.ndarray, pattern: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
        xt = np.zeros(L)
        xt[list(pattern)] = params[: len(pattern)]
        weights = theta.weights if constraints.theta_known else softmax(params[len(pattern) :])
        return xt, weights

    def residuals(params: np.ndarray, pattern: tuple[int, ...]) -> np.ndarray:
        xt, weights = unpack(params, pattern)
        parts = [
            _moment_entries(xt, weights, theta, projection, n).ravel() - target
            for n, target in enumerate(targets, start=1)
        ]
        distance = orbit_distance(xt, x, group)
        parts.append(np.array([np.sqrt(opts.penalty_weight) * max(0.0, opts.orbit_floor - distance)]))
        return np.concatenate(parts)

    def restart(index: int) -> _Candidate:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([opts.seed, d, index])))
        pattern = patterns[index % len(patterns)]
        start = rng.normal(scale=scale, size=len(pattern))
        if not constraints.theta_known:
            start = np.concatenate([start, rng.normal(size=group.order)])
        fit = least_squares(residuals, start, args=(pattern,), method="trf", xtol=1e-12, ftol=1e-12, gtol=1e-12)
        xt, weights = unpack(fit.x, pattern)
        moment_objective = float(np.sum(fit.fun[:-1] ** 2))
        return _Candidate(moment_objective, xt, np.asarray(weights), orbit_distance(xt, x, group), index)

    candidates = ordered_map(restart, range(opts.restarts), threads)
    admissible = [c for c in candidates if c.orbit_distance >= opts.orbit_floor]
    pool = admissible or candidates
    return min(pool, key=lambda c: (c.objective, c.restart))


def cutoff_search(
    x,
    theta: GroupDistribution,
    projection: Projection,
    constraints: Optional[ConstraintSet] = None,
    opts: Optional[SearchOptions] = None,
    threads: Optional[int] = None,
) -> CutoffReport:
    """Certify a lower bound on the moment order cutoff d̄ by exhibiting moment-matching witnesses.

    For d = 1, ..., max_order the search minimizes Σ_{n≤d} ‖M^n_{x̃,θ̃} − M^n_{x,θ}‖² over the
    admissible set while keeping x̃ at orbit distance ≥ orbit_floor from x. A minimizer below
    match_tol is a witness with d_{x̃,θ̃} ≥ d + 1. Maximality of the reported d̄ is best effort.
    """
    constraints = constraints or ConstraintSet()
    opts = opts or SearchOptions()
    x = as_signal(x)
    projected_orbit(x, theta, projection)
    if constraints.zero_entries is not None and int(np.sum(x == 0)) != constraints.zero_entries:
        raise InfeasibleConstraintError(
            f"the true signal has {int(np.sum(x == 0))} zero entries, constraint requires {constraints.zero_entries}"
        )
    _support_patterns(x.shape[0], constraints)

    best_witness: Optional[tuple[int, _Candidate]] = None
    best_raw: Optional[_Candidate] = None
    for d in range(1, opts.max_order + 1):
        candidate = _search_order(d, x, theta, projection, constraints, opts, threads)
        logger.info("cutoff search order %d: best objective %.3e at orbit distance %.3e", d, candidate.objective,
                    candidate.orbit_distance)
        if best_raw is None:
            best_raw = candidate
        if candidate.objective < opts.match_tol and candidate.orbit_distance >= opts.orbit_floor:
            best_witness = (d, candidate)
        else:
            break

    if best_witness is None:
        assert best_raw is not None
        witness_theta = GroupDistribution(theta.group, best_raw.theta_weights / best_raw.theta_weights.sum())
        value = moment_distance(
            exact_moment(best_raw.x, witness_theta, projection, 1), exact_moment(x, theta, projection, 1)
        )
        return CutoffReport(
            d_bar=1,
            witness_x=as_signal(best_raw.x),
            witness_theta=witness_theta,
            matched_orders=[],
            first_distinguishing_order_value=value,
            certified=False,
            objective=best_raw.objective,
            notes=["no moment-matching witness found; d_bar = 1 holds trivially"],
        )

    d, witness = best_witness
    d_bar = d + 1
    witness_theta = GroupDistribution(theta.group, witness.theta_weights / witness.theta_weights.sum())
    matched = []
    for n in range(1, d_bar + 1):
        a = exact_moment(witness.x, witness_theta, projection, n)
        b = exact_moment(x, theta, projection, n)
        matched.append((n, float(np.sum((a.entries - b.entries) ** 2))))
    notes = []
    if d == opts.max_order:
        notes.append(f"witness matches every searched order; d_bar may exceed {d_bar}")
    return CutoffReport(
        d_bar=d_bar,
        witness_x=as_signal(witness.x),
        witness_theta=witness_theta,
        matched_orders=matched,
        first_distinguishing_order_value=matched[-1][1] / math.factorial(d_bar),
        certified=True,
        objective=witness.objective,
        notes=notes,
    )
