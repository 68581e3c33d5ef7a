"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, NumericalError -> 3,
NonConvergenceError -> 4.
"""


class PanisError(Exception):
    """Base class for all package errors."""


class ConfigError(PanisError):
    """Invalid configuration, incompatible shapes or contract violations."""


class DomainError(PanisError, ValueError):
    """Argument outside its mathematical domain (e.g. VF not in (0,1))."""


class MeshError(PanisError):
    """Degenerate or inconsistent mesh."""


class ArchitectureError(PanisError):
    """Network layer stack is inconsistent; message names the layer."""


class NumericalError(PanisError):
    """Numerical failure: singular operator, eigensolver breakdown, NaNs."""


class NonConvergenceError(NumericalError):
    """Iteration budget exhausted; carries the last residual norm."""

    def __init__(self, message, *, iterations=None, residual_norm=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual_norm = residual_norm
