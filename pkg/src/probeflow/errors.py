"""Exception types shared across the package."""


class ProbeflowError(Exception):
    """Base class for all package-specific errors."""


class InputDataError(ProbeflowError):
    """Malformed or inconsistent input data (files, tables, parameters)."""


class SolverError(ProbeflowError):
    """An iterative solver failed to reach its convergence target."""
