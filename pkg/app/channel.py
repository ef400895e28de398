"""Simulation of the group action channel Y = P·G·x + σ·Z.

Randomness is keyed by (seed, replicate, chunk): each chunk of CHUNK_SIZE rows
gets its own Philox stream derived through numpy's SeedSequence, so output does
not depend on how many threads generate the chunks. Group draws use
``Generator.choice`` with the θ weights and noise uses
``Generator.standard_normal`` (ziggurat), drawn in that order within a chunk.
"""

import hashlib
from dataclasses import dataclass, replace
from enum import StrEnum
from functools import cached_property
from logging import getLogger
from typing import Optional, Sequence

import numpy as np

from app.errors import DimensionMismatchError, ToolkitError
from app.group import GroupDistribution, as_signal
from app.parallel import ordered_map

logger = getLogger(__name__)

CHUNK_SIZE = 65_536


class ProjectionKind(StrEnum):
    IDENTITY = "identity"
    COORDINATES = "coordinate-selection"
    GENERAL = "general"


@dataclass(frozen=True, eq=False)
class Projection:
    matrix: np.ndarray
    kind: ProjectionKind = ProjectionKind.GENERAL

    def __post_init__(self):
        matrix = np.array(self.matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise DimensionMismatchError(f"projection must be a K×L matrix, got shape {matrix.shape}")
        if self.kind == ProjectionKind.IDENTITY and not np.array_equal(matrix, np.eye(matrix.shape[1])):
            raise ToolkitError("identity projection must be the identity matrix")
        if self.kind == ProjectionKind.COORDINATES:
            K, L = matrix.shape
            if K > L:
                raise DimensionMismatchError(f"coordinate selection keeps K={K} > L={L} coordinates")
            is_basis = np.all(np.sort(matrix, axis=1)[:, :-1] == 0) and np.all(matrix.max(axis=1) == 1)
            if not is_basis or len({int(np.argmax(row)) for row in matrix}) != K:
                raise ToolkitError("coordinate selection rows must be distinct standard basis vectors")
        matrix.flags.writeable = False
        object.__setattr__(self, "matrix", matrix)

    @property
    def output_dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def input_dim(self) -> int:
        return self.matrix.shape[1]


def identity_projection(L: int) -> Projection:
    return Projection(np.eye(L), ProjectionKind.IDENTITY)


def coordinate_projection(L: int, coordinates: Sequence[int]) -> Projection:
    """Keep the listed (0-based) coordinates, in the given order."""
    return Projection(np.eye(L)[list(coordinates)], ProjectionKind.COORDINATES)


def general_projection(matrix: np.ndarray | Sequence[Sequence[float]]) -> Projection:
    return Projection(np.asarray(matrix, dtype=np.float64), ProjectionKind.GENERAL)


def projected_orbit(x: np.ndarray, theta: GroupDistribution, projection: Projection) -> np.ndarray:
    """Rows P·g·x for every group element, shape (|G|, K)."""
    x = as_signal(x)
    if not (x.shape[0] == theta.group.dimension == projection.input_dim):
        raise DimensionMismatchError(
            f"signal length {x.shape[0]}, group dimension {theta.group.dimension}, "
            f"projection columns {projection.input_dim} must agree"
        )
    return (theta.group.stacked @ x) @ projection.matrix.T


@dataclass(frozen=True, eq=False)
class ChannelModel:
    x: np.ndarray
    theta: GroupDistribution
    projection: Projection
    sigma: float

    def __post_init__(self):
        object.__setattr__(self, "x", as_signal(self.x))
        if not self.sigma > 0:
            raise ToolkitError(f"sigma must be positive, got {self.sigma}")
        projected_orbit(self.x, self.theta, self.projection)

    @property
    def gamma(self) -> float:
        return 1.0 / self.sigma

    @property
    def output_dim(self) -> int:
        return self.projection.output_dim

    @cached_property
    def components(self) -> np.ndarray:
        components = projected_orbit(self.x, self.theta, self.projection)
        components.flags.writeable = False
        return components

    @cached_property
    def digest(self) -> str:
        sha = hashlib.sha256()
        for array in (self.x, self.theta.weights, self.theta.group.stacked, self.projection.matrix):
            sha.update(np.ascontiguousarray(array, dtype="<f8").tobytes())
        sha.update(np.float64(self.sigma).astype("<f8").tobytes())
        return sha.hexdigest()[:16]

    def with_sigma(self, sigma: float) -> "ChannelModel":
        return replace(self, sigma=sigma)


@dataclass(frozen=True, eq=False)
class ObservationBatch:
    observations: np.ndarray
    seed: int
    model_digest: str
    group_assignments: Optional[np.ndarray] = None
    replicate: int = 0
    normalized: bool = False

    def __post_init__(self):
        observations = np.array(self.observations, dtype=np.float64)
        if observations.ndim != 2 or observations.shape[0] < 1:
            raise DimensionMismatchError(f"observations must be an N×K matrix with N >= 1, got {observations.shape}")
        observations.flags.writeable = False
        object.__setattr__(self, "observations", observations)

    @property
    def n_samples(self) -> int:
        return self.observations.shape[0]

    @property
    def dim(self) -> int:
        return self.observations.shape[1]


def chunk_generator(seed: int, replicate: int, chunk: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, replicate, chunk])))


def simulate(
    model: ChannelModel, n_samples: int, seed: int, replicate: int = 0, threads: Optional[int] = None
) -> ObservationBatch:
    """Draw n_samples rows P·G_j·x + σ·Z_j."""
    if n_samples < 1:
        raise ToolkitError(f"n_samples must be positive, got {n_samples}")
    starts = list(range(0, n_samples, CHUNK_SIZE))

    def draw(start: int) -> tuple[np.ndarray, np.ndarray]:
        size = min(CHUNK_SIZE, n_samples - start)
        rng = chunk_generator(seed, replicate, start // CHUNK_SIZE)
        assignments = rng.choice(model.theta.group.order, size=size, p=model.theta.weights)
        noise = rng.standard_normal((size, model.output_dim))
        return model.components[assignments] + model.sigma * noise, assignments

    chunks = ordered_map(draw, starts, threads)
    logger.debug("simulated %d samples for model %s (seed=%d, replicate=%d)", n_samples, model.digest, seed, replicate)
    return ObservationBatch(
        observations=np.concatenate([rows for rows, _ in chunks]),
        seed=seed,
        model_digest=model.digest,
        group_assignments=np.concatenate([assignments for _, assignments in chunks]),
        replicate=replicate,
    )


def normalized_batch(batch: ObservationBatch, sigma: float) -> ObservationBatch:
    """Observations divided by sigma (the Ỹ = Y/σ coordinates)."""
    if not sigma > 0:
        raise ToolkitError(f"sigma must be positive, got {sigma}")
    return replace(batch, observations=batch.observations / sigma, normalized=True)
