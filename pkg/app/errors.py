"""Exception hierarchy shared by the services and mapped to exit codes by the CLI."""


class ThbError(Exception):
    """Base class for every error raised by the package."""

    exit_code = 1


class ArgumentError(ThbError, ValueError):
    """An operation was called with arguments that break its preconditions."""

    exit_code = 2


class DomainError(ArgumentError):
    """A parameter value lies outside the parametric domain."""


class GeometryError(ThbError):
    """The geometry map is degenerate (non-positive Jacobian) somewhere."""

    exit_code = 3


class ConfigurationError(ThbError):
    """Run configuration, multipatch topology or boundary data are inconsistent."""

    exit_code = 2


class GeometryFileError(ConfigurationError):
    """A geometry file could not be parsed or failed validation."""


class SolverError(ThbError):
    """The linear solver could not factorize or solve the system."""

    exit_code = 3


class InternalError(ThbError):
    """An internal invariant was violated."""

    exit_code = 3
