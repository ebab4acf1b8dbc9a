"""Exception types shared across the package."""


class GridSecError(Exception):
    """Base class for all package errors."""


class CaseError(GridSecError, ValueError):
    """A case file failed to parse or violates a network invariant."""

    def __init__(self, message, element_id=None):
        self.element_id = element_id
        if element_id is not None:
            message = f"{message} (element id {element_id})"
        super().__init__(message)


class IslandedNetworkError(GridSecError):
    """The reduced susceptance matrix is singular."""


class DivergenceError(GridSecError):
    def __init__(self, message, mismatch=float("nan"), iterations=0):
        self.mismatch = mismatch
        self.iterations = iterations
        super().__init__(f"{message} (mismatch {mismatch:.3e} after {iterations} iterations)")


class UnobservableError(GridSecError):
    """Gain matrix or DC Jacobian is rank deficient."""


class NoTargetError(GridSecError):
    """No line satisfies the safety-margin feasibility condition."""


class TrainingDivergedError(GridSecError):
    def __init__(self, iteration, loss):
        self.iteration = iteration
        self.loss = loss
        super().__init__(f"training diverged at iteration {iteration} (loss={loss})")


class WarmupError(GridSecError):
    """Not enough history to fill a recurrent window."""


class UndefinedMetricError(GridSecError, ValueError):
    """Every entry was excluded from a metric."""
