"""Exception hierarchy for statpod."""


class StatPodError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(StatPodError, ValueError):
    pass


class NonConvergenceError(StatPodError):
    """Raised when a Newton iteration does not reach its tolerance.

    Attributes
    ----------
    residual : float
        Residual norm at the last iterate.
    step : int or None
        Time-step index when raised from a trajectory integration.
    """

    def __init__(self, message, residual=float("nan"), step=None):
        super().__init__(message)
        self.residual = residual
        self.step = step


class ConditioningError(StatPodError):
    pass


class UnstabilizableError(StatPodError):
    pass


class DetectabilityError(StatPodError):
    pass


class RiccatiFailure(StatPodError):
    """An ARE solve failed while evaluating a state-dependent law."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class InvalidBasisError(StatPodError, ValueError):
    pass


class PivotDegeneracyError(StatPodError):
    pass


class SampleFailure(StatPodError):
    """A realization failed during snapshot collection."""

    def __init__(self, message, sample_index):
        super().__init__(message)
        self.sample_index = sample_index
