"""Finite-horizon robust MPC synthesis and simulation via LMI scalings.

The package turns an uncertain linear system with structured norm-bounded
uncertainty and bounded disturbances into finite-horizon min-max control
problems, certifies them with linear matrix inequalities over commuting
scaling variables, and simulates the resulting receding-horizon controllers.
"""

from .errors import (
    ConfigError,
    CoverageError,
    DimensionError,
    InfeasibleError,
    RobustMpcError,
    SolverError,
    TableError,
)
from .model import (
    DiagonalBlock,
    Dimensions,
    FullBlock,
    RepeatedScalar,
    UncertainSystem,
    UncertaintyStructure,
    box_constraint_rows,
    fingerprint,
    load_system,
    make_system,
    recast_disturbance,
    to_config,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "CoverageError",
    "DimensionError",
    "DiagonalBlock",
    "Dimensions",
    "FullBlock",
    "InfeasibleError",
    "RepeatedScalar",
    "RobustMpcError",
    "SolverError",
    "TableError",
    "UncertainSystem",
    "UncertaintyStructure",
    "box_constraint_rows",
    "fingerprint",
    "load_system",
    "make_system",
    "recast_disturbance",
    "to_config",
    "__version__",
]
