"""Exception hierarchy shared across the toolkit."""


class GridObsError(Exception):
    """Base class for all toolkit errors."""


class CaseParseError(GridObsError):
    """Malformed case file; message carries row/column location when known."""


class CaseValidationError(GridObsError):
    """Structurally valid input violating a model invariant (duplicate bus, ...)."""


class ConfigurationError(GridObsError):
    """Missing or inconsistent configuration (generator parameters, CLI flags)."""


class SingularNetworkError(GridObsError):
    """Degenerate network element, e.g. a zero-impedance branch."""


class InitializationError(GridObsError):
    """Steady-state initialization failed; carries the worst-residual bus."""

    def __init__(self, message, worst_bus=None, residual=None):
        super().__init__(message)
        self.worst_bus = worst_bus
        self.residual = residual


class LinearSolveError(GridObsError):
    """Singular Jacobian inside an implicit solve."""


class ConvergenceError(GridObsError):
    """Newton iteration exhausted its budget; carries the last residual norm."""

    def __init__(self, message, residual_norm=None, iterations=None):
        super().__init__(message)
        self.residual_norm = residual_norm
        self.iterations = iterations


class SimulationError(GridObsError):
    """Propagated step failure annotated with the failing step index."""

    def __init__(self, message, step=None, cause=None):
        super().__init__(message)
        self.step = step
        self.cause = cause


class DimensionError(GridObsError):
    """Mismatched shapes or misaligned time grids."""


class NonObservableError(GridObsError):
    """Estimation attempted with an empty or degenerate sensor selection."""
