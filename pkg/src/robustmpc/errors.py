"""Exception types shared across the package."""


class RobustMpcError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(RobustMpcError):
    """Raised when a system or controller configuration cannot be parsed."""


class DimensionError(RobustMpcError):
    """Raised when matrices or bounds have inconsistent shapes."""


class SolverError(RobustMpcError):
    """Raised when a conic solve fails in a way the caller cannot recover from."""


class InfeasibleError(RobustMpcError):
    """Raised when a synthesis or control problem is certified infeasible."""


class TableError(RobustMpcError):
    """Raised when an initialization table file is malformed or inconsistent."""


class CoverageError(RobustMpcError):
    """Raised when a query state is not covered by any stored region."""
