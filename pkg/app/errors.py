"""Exception hierarchy shared by the toolkit modules."""


class ToolkitError(ValueError):
    """Base class for every error raised by the toolkit."""


class DimensionMismatchError(ToolkitError):
    """Signal, group, projection or batch dimensions disagree."""


class InvalidGroupError(ToolkitError):
    """Matrices do not form a finite orthogonal group."""


class InvalidDistributionError(ToolkitError):
    """Weights are negative or do not sum to one."""


class InfeasibleConstraintError(ToolkitError):
    """The admissible set of a cutoff search is empty."""


class NoDistinguishingOrderError(ToolkitError):
    """All moment tensors up to the configured order coincide."""


class QuadratureUnsupportedError(ToolkitError):
    """Tensor-product quadrature was requested for K > 2."""


class UnreliableEstimateError(ToolkitError):
    """A numerical estimate cannot be trusted: heavy-tailed Monte Carlo samples or a non-finite quadrature value."""


class NoInformationError(ToolkitError):
    """The witness is observationally equivalent to the truth, so no bound exists."""


class ConfigError(ToolkitError):
    """An experiment config failed validation."""

    def __init__(self, message: str, field_path: str = ""):
        self.field_path = field_path
        self.detail = message
        super().__init__(f"{field_path}: {message}" if field_path else message)
