"""Experiment configuration: TOML files validated into pydantic models."""

import hashlib
import json
import tomllib
from enum import StrEnum
from logging import getLogger
from pathlib import Path
from typing import Any, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from app.bounds import BoundOptions, NRule
from app.channel import (
    ChannelModel,
    Projection,
    coordinate_projection,
    general_projection,
    identity_projection,
)
from app.divergence import DivergenceMethod
from app.errors import ConfigError, ToolkitError
from app.estimators import MleOptions
from app.group import (
    FiniteGroup,
    GroupDistribution,
    cyclic_shift_group,
    dihedral_group,
    trivial_group,
    uniform_distribution,
)
from app.moments import ConstraintSet, SearchOptions

logger = getLogger(__name__)

TOOLKIT_VERSION = "0.1.0"
# fields that change where or how fast a run happens, not what it computes
NON_SEMANTIC_FIELDS = {"output", "threads"}


class ExperimentKind(StrEnum):
    SIMULATE = "simulate"
    MOMENTS = "moments"
    CUTOFF = "cutoff"
    DIVERGENCE_SWEEP = "divergence-sweep"
    BOUND_SWEEP = "bound-sweep"
    MLE_SWEEP = "mle-sweep"
    VERIFY = "verify"


class _Block(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


def _nested(error: ToolkitError, path: str) -> ConfigError:
    """Re-root a build failure at ``path``, keeping any sub-path it already carries."""
    if isinstance(error, ConfigError):
        return ConfigError(error.detail, ".".join(part for part in (path, error.field_path) if part))
    return ConfigError(str(error), path)


class GroupSpec(_Block):
    kind: Literal["cyclic", "dihedral", "trivial", "matrices"] = "cyclic"
    transposed: bool = False
    matrices: Optional[list[list[list[float]]]] = None

    def build(self, L: int) -> FiniteGroup:
        match self.kind:
            case "cyclic":
                return cyclic_shift_group(L, transposed=self.transposed)
            case "dihedral":
                return dihedral_group(L)
            case "trivial":
                return trivial_group(L)
            case "matrices":
                if not self.matrices:
                    raise ConfigError("explicit group needs a nonempty matrices list", "matrices")
                return FiniteGroup.from_matrices(self.matrices)


class ThetaSpec(_Block):
    kind: Literal["uniform", "weights", "point-mass"] = "uniform"
    weights: Optional[list[float]] = None
    index: int = Field(default=0, ge=0)

    def build(self, group: FiniteGroup) -> GroupDistribution:
        match self.kind:
            case "uniform":
                return uniform_distribution(group)
            case "weights":
                if self.weights is None:
                    raise ConfigError("explicit theta needs a weights list", "weights")
                return GroupDistribution(group, np.array(self.weights))
            case "point-mass":
                if self.index >= group.order:
                    raise ConfigError(f"index {self.index} is outside a group of order {group.order}", "index")
                return GroupDistribution.point_mass(group, self.index)


class ProjectionSpec(_Block):
    kind: Literal["identity", "coordinates", "matrix"] = "identity"
    coordinates: Optional[list[int]] = None
    matrix: Optional[list[list[float]]] = None

    def build(self, L: int) -> Projection:
        match self.kind:
            case "identity":
                return identity_projection(L)
            case "coordinates":
                if not self.coordinates:
                    raise ConfigError("coordinate projection needs a coordinates list", "coordinates")
                return coordinate_projection(L, self.coordinates)
            case "matrix":
                if not self.matrix:
                    raise ConfigError("general projection needs a matrix", "matrix")
                return general_projection(self.matrix)


class ModelSpec(_Block):
    signal: list[float] = Field(min_length=1)
    sigma: list[float] = Field(min_length=1)
    group: GroupSpec = GroupSpec()
    theta: ThetaSpec = ThetaSpec()
    projection: ProjectionSpec = ProjectionSpec()

    @model_validator(mode="after")
    def check_consistency(self) -> "ModelSpec":
        if any(s <= 0 for s in self.sigma):
            raise ConfigError("every sigma must be positive", "sigma")
        try:
            group = self.build_group()
        except ToolkitError as error:
            raise _nested(error, "group") from error
        try:
            theta = self.build_theta(group)
        except ToolkitError as error:
            raise _nested(error, "theta") from error
        try:
            ChannelModel(np.array(self.signal), theta, self.build_projection(), self.sigma[0])
        except ToolkitError as error:
            raise _nested(error, "projection") from error
        return self

    @property
    def dimension(self) -> int:
        return len(self.signal)

    def build_group(self) -> FiniteGroup:
        return self.group.build(self.dimension)

    def build_theta(self, group: FiniteGroup) -> GroupDistribution:
        return self.theta.build(group)

    def build_projection(self) -> Projection:
        return self.projection.build(self.dimension)

    def channel(self, sigma: float) -> ChannelModel:
        group = self.build_group()
        return ChannelModel(np.array(self.signal), self.build_theta(group), self.build_projection(), sigma)


class WitnessSpec(_Block):
    name: str
    signal: list[float] = Field(min_length=1)
    theta: Optional[ThetaSpec] = None


class SimulateOptions(_Block):
    replicate: int = Field(default=0, ge=0)


class MomentsOptions(_Block):
    orders: list[int] = Field(default_factory=lambda: [1, 2, 3], min_length=1)
    n_samples: Optional[int] = Field(default=None, ge=1)
    debias: bool = True


class CutoffOptions(_Block):
    constraints: ConstraintSet = ConstraintSet()
    search: SearchOptions = SearchOptions()


class DivergenceOptions(_Block):
    method: DivergenceMethod = DivergenceMethod.QUADRATURE
    budget: int = Field(default=200_000, ge=2)
    max_order: int = Field(default=6, ge=1, le=8)
    include_kl: bool = True


class BoundSweepOptions(_Block):
    bound: BoundOptions = BoundOptions()
    compare_cr_limit: bool = False


class MleSweepOptions(_Block):
    replicates: int = Field(default=10, ge=1)
    fit: MleOptions = MleOptions()


class VerifyOptions(_Block):
    shift_convention: Literal["standard", "transposed"] = "standard"


class ExperimentConfig(_Block):
    """One experiment per file. ``seed`` is the master seed for every stochastic step."""

    experiment: ExperimentKind
    seed: int = Field(default=0, ge=0, lt=2**64)
    output: Optional[str] = None
    threads: Optional[int] = Field(default=None, ge=1)
    model: Optional[ModelSpec] = None
    n_rule: NRule = NRule(coefficient=1000.0, order=0)
    witnesses: list[WitnessSpec] = Field(default_factory=list)
    simulate: SimulateOptions = SimulateOptions()
    moments: MomentsOptions = MomentsOptions()
    cutoff: CutoffOptions = CutoffOptions()
    divergence: DivergenceOptions = DivergenceOptions()
    bounds: BoundSweepOptions = BoundSweepOptions()
    mle: MleSweepOptions = MleSweepOptions()
    verify: VerifyOptions = VerifyOptions()

    @model_validator(mode="after")
    def check_model(self) -> "ExperimentConfig":
        if self.experiment != ExperimentKind.VERIFY and self.model is None:
            raise ConfigError(f"experiment {self.experiment} needs a [model] block", "model")
        if self.model is not None:
            try:
                self.n_rule.sample_sizes(self.model.sigma)
            except ToolkitError as error:
                raise _nested(error, "n_rule.counts") from error
            group = self.model.build_group()
            for i, witness in enumerate(self.witnesses):
                if len(witness.signal) != self.model.dimension:
                    raise ConfigError(
                        f"witness {witness.name} has length {len(witness.signal)}, signal has {self.model.dimension}",
                        f"witnesses.{i}.signal",
                    )
                if witness.theta is not None:
                    try:
                        witness.theta.build(group)
                    except ToolkitError as error:
                        raise _nested(error, f"witnesses.{i}.theta") from error
        return self

    def digest(self) -> str:
        semantic = self.model_dump(mode="json", exclude=NON_SEMANTIC_FIELDS)
        canonical = json.dumps(semantic, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    def witness_models(
        self, group: FiniteGroup, theta: GroupDistribution
    ) -> list[tuple[str, np.ndarray, GroupDistribution]]:
        """(name, x̃, θ̃) for every configured witness; θ̃ defaults to the model's θ."""
        return [
            (witness.name, np.array(witness.signal), witness.theta.build(group) if witness.theta else theta)
            for witness in self.witnesses
        ]


def _as_config_error(error: ValidationError) -> ConfigError:
    """First failure as a ConfigError; validator failures carry their own sub-path below the loc."""
    first = error.errors()[0]
    loc = ".".join(str(part) for part in first["loc"])
    cause = first.get("ctx", {}).get("error")
    if isinstance(cause, ConfigError):
        return ConfigError(cause.detail, ".".join(part for part in (loc, cause.field_path) if part))
    return ConfigError(first["msg"], loc)


def validate_config(data: dict[str, Any]) -> ExperimentConfig:
    """Build an ExperimentConfig, reporting the first failing field as a dotted path."""
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as error:
        raise _as_config_error(error) from error


def load_config(path: Path, overrides: Optional[dict[str, Any]] = None) -> ExperimentConfig:
    """Read a TOML experiment file and apply scalar CLI overrides (seed, output, threads, experiment)."""
    try:
        with path.open("rb") as handle:
            data = tomllib.load(handle)
    except tomllib.TOMLDecodeError as error:
        raise ConfigError(f"invalid TOML: {error}", str(path)) from error
    except OSError as error:
        raise ConfigError(f"cannot read config: {error.strerror}", str(path)) from error
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    config = validate_config(data)
    logger.info("loaded %s config from %s (digest %s)", config.experiment, path, config.digest())
    return config
