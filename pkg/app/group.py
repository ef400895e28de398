"""Finite subgroups of O(L), distributions over them, orbits and best alignment."""

from dataclasses import dataclass
from functools import cached_property
from logging import getLogger
from typing import Sequence

import numpy as np

from app.errors import DimensionMismatchError, InvalidDistributionError, InvalidGroupError

logger = getLogger(__name__)

ORTHOGONALITY_TOL = 1e-12
CLOSURE_TOL = 1e-10
WEIGHT_SUM_TOL = 1e-12


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64)
    array.flags.writeable = False
    return array


def as_signal(x: Sequence[float] | np.ndarray) -> np.ndarray:
    """Copy x into a read-only float64 vector."""
    return _frozen(np.asarray(x, dtype=np.float64).reshape(-1))


@dataclass(frozen=True, eq=False)
class GroupElement:
    matrix: np.ndarray
    index: int

    def __post_init__(self):
        matrix = _frozen(self.matrix)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise InvalidGroupError(f"element {self.index} is not a square matrix: shape {matrix.shape}")
        gram = matrix.T @ matrix
        if np.max(np.abs(gram - np.eye(matrix.shape[0]))) > ORTHOGONALITY_TOL:
            raise InvalidGroupError(f"element {self.index} is not orthogonal")
        object.__setattr__(self, "matrix", matrix)

    def act(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ x


@dataclass(frozen=True, eq=False)
class FiniteGroup:
    """An explicit finite subgroup of O(L); element order is the canonical index order."""

    elements: tuple[GroupElement, ...]
    dimension: int

    def __post_init__(self):
        if not self.elements:
            raise InvalidGroupError("a group needs at least one element")
        for position, element in enumerate(self.elements):
            if element.index != position:
                raise InvalidGroupError(f"element at position {position} carries index {element.index}")
            if element.matrix.shape != (self.dimension, self.dimension):
                raise DimensionMismatchError(
                    f"element {position} has shape {element.matrix.shape}, group dimension is {self.dimension}"
                )
        # forces closure, identity and inverse checks at construction
        _ = self.multiplication_table
        _ = self.inverses

    @classmethod
    def from_matrices(cls, matrices: Sequence[np.ndarray | Sequence[Sequence[float]]]) -> "FiniteGroup":
        arrays = [np.asarray(m, dtype=np.float64) for m in matrices]
        if not arrays:
            raise InvalidGroupError("a group needs at least one element")
        dimension = arrays[0].shape[0]
        return cls(tuple(GroupElement(matrix, index) for index, matrix in enumerate(arrays)), dimension)

    @property
    def order(self) -> int:
        return len(self.elements)

    @cached_property
    def stacked(self) -> np.ndarray:
        """All element matrices as an array of shape (|G|, L, L)."""
        return _frozen(np.stack([element.matrix for element in self.elements]))

    def find(self, matrix: np.ndarray, tol: float = CLOSURE_TOL) -> int:
        """Index of the element equal to matrix within tol, or -1."""
        deviation = np.max(np.abs(self.stacked - matrix[None, :, :]), axis=(1, 2))
        matches = np.flatnonzero(deviation <= tol)
        return int(matches[0]) if matches.size else -1

    @cached_property
    def multiplication_table(self) -> np.ndarray:
        table = np.empty((self.order, self.order), dtype=np.int64)
        for i, left in enumerate(self.elements):
            for j, right in enumerate(self.elements):
                k = self.find(left.matrix @ right.matrix)
                if k < 0:
                    raise InvalidGroupError(f"product of elements {i} and {j} is not in the group")
                table[i, j] = k
        table.flags.writeable = False
        return table

    @cached_property
    def identity_index(self) -> int:
        k = self.find(np.eye(self.dimension))
        if k < 0:
            raise InvalidGroupError("group does not contain the identity")
        return k

    @cached_property
    def inverses(self) -> tuple[int, ...]:
        identity = self.identity_index
        result = []
        for i in range(self.order):
            partners = np.flatnonzero(self.multiplication_table[i] == identity)
            if partners.size == 0:
                raise InvalidGroupError(f"element {i} has no inverse in the group")
            result.append(int(partners[0]))
        return tuple(result)

    @property
    def identity(self) -> GroupElement:
        return self.elements[self.identity_index]

    def multiply(self, i: int, j: int) -> int:
        return int(self.multiplication_table[i, j])

    def inverse(self, i: int) -> int:
        return self.inverses[i]


def _cyclic_shift_matrix(L: int, transposed: bool = False) -> np.ndarray:
    # R maps (x_1, ..., x_L) to (x_L, x_1, ..., x_{L-1})
    shift = np.roll(np.eye(L), 1, axis=0)
    return shift.T if transposed else shift


def cyclic_shift_group(L: int, transposed: bool = False) -> FiniteGroup:
    """The L powers I, R, ..., R^{L-1} of the cyclic shift, ordered by shift amount.

    ``transposed`` builds the group from R^T instead; it exists only so the
    verification suite can demonstrate that it catches the convention error.
    """
    if L < 1:
        raise InvalidGroupError(f"cyclic group needs L >= 1, got {L}")
    shift = _cyclic_shift_matrix(L, transposed)
    matrices = [np.linalg.matrix_power(shift, k) for k in range(L)]
    return FiniteGroup.from_matrices(matrices)


def dihedral_group(L: int) -> FiniteGroup:
    """Cyclic shifts followed by their composition with the reversal (2L elements for L >= 3)."""
    if L < 1:
        raise InvalidGroupError(f"dihedral group needs L >= 1, got {L}")
    shift = _cyclic_shift_matrix(L)
    reversal = np.eye(L)[::-1]
    matrices: list[np.ndarray] = []
    for candidate in [np.linalg.matrix_power(shift, k) for k in range(L)] + [
        np.linalg.matrix_power(shift, k) @ reversal for k in range(L)
    ]:
        if not any(np.array_equal(candidate, existing) for existing in matrices):
            matrices.append(candidate)
    return FiniteGroup.from_matrices(matrices)


def trivial_group(L: int) -> FiniteGroup:
    if L < 1:
        raise InvalidGroupError(f"trivial group needs L >= 1, got {L}")
    return FiniteGroup.from_matrices([np.eye(L)])


@dataclass(frozen=True, eq=False)
class GroupDistribution:
    group: FiniteGroup
    weights: np.ndarray

    def __post_init__(self):
        weights = _frozen(np.asarray(self.weights, dtype=np.float64).reshape(-1))
        if weights.shape != (self.group.order,):
            raise DimensionMismatchError(f"expected {self.group.order} weights, got {weights.shape[0]}")
        if np.any(weights < 0):
            raise InvalidDistributionError("weights must be nonnegative")
        if abs(weights.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise InvalidDistributionError(f"weights sum to {weights.sum()!r}, expected 1")
        object.__setattr__(self, "weights", weights)

    @classmethod
    def point_mass(cls, group: FiniteGroup, index: int) -> "GroupDistribution":
        if not 0 <= index < group.order:
            raise InvalidDistributionError(f"point mass index {index} outside a group of order {group.order}")
        weights = np.zeros(group.order)
        weights[index] = 1.0
        return cls(group, weights)

    def right_translate(self, element: GroupElement) -> "GroupDistribution":
        """Law of G·g⁻¹ for G ~ θ, i.e. θ'(h) = θ(h·g).

        Pairing it with g·x leaves every observation law unchanged.
        """
        weights = np.array(
            [self.weights[self.group.multiply(h, element.index)] for h in range(self.group.order)],
        )
        return GroupDistribution(self.group, weights)

    def mix(self, other: "GroupDistribution", h: float) -> np.ndarray:
        """Raw weight vector (1−h)θ + hθ̃; outside [0, 1] it is not a distribution."""
        return (1.0 - h) * self.weights + h * other.weights


def uniform_distribution(group: FiniteGroup) -> GroupDistribution:
    return GroupDistribution(group, np.full(group.order, 1.0 / group.order))


def _check_dimension(x: np.ndarray, group: FiniteGroup) -> None:
    if x.shape != (group.dimension,):
        raise DimensionMismatchError(f"signal has shape {x.shape}, group acts on dimension {group.dimension}")


def orbit(x: Sequence[float] | np.ndarray, group: FiniteGroup) -> list[np.ndarray]:
    """g·x for every element in canonical order; duplicates are kept."""
    x = as_signal(x)
    _check_dimension(x, group)
    return [as_signal(element.act(x)) for element in group.elements]


def best_alignment(
    xhat: Sequence[float] | np.ndarray, x: Sequence[float] | np.ndarray, group: FiniteGroup
) -> tuple[np.ndarray, GroupElement]:
    """The orbit member of xhat closest to x, with the element realizing it.

    Ties go to the smallest element index.
    """
    xhat = as_signal(xhat)
    x = as_signal(x)
    if xhat.shape != x.shape:
        raise DimensionMismatchError(f"estimate has shape {xhat.shape}, reference has shape {x.shape}")
    _check_dimension(x, group)
    candidates = group.stacked @ xhat
    distances = np.sum((candidates - x[None, :]) ** 2, axis=1)
    k = int(np.argmin(distances))
    return as_signal(candidates[k]), group.elements[k]


def orbit_distance(xhat: np.ndarray, x: np.ndarray, group: FiniteGroup) -> float:
    aligned, _ = best_alignment(xhat, x, group)
    return float(np.linalg.norm(aligned - x))
