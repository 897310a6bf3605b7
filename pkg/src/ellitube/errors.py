"""Exception hierarchy shared across the package."""


class EllitubeError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(EllitubeError, ValueError):
    pass


class SynthesisError(EllitubeError):
    """Gain, terminal-set or contraction synthesis failed."""


class EstimatorError(EllitubeError):
    """Numerically singular inversion inside the set-membership estimator."""


class InadmissibleDisturbanceError(EstimatorError):
    """Measured data is inconsistent with the assumed disturbance bounds."""


class DivergenceError(EllitubeError):
    pass


class TuningError(EllitubeError):
    pass


class InfeasibleTighteningError(SynthesisError):
    """Tightened right-hand side f - f_bar has a nonpositive entry."""

    def __init__(self, message, rows=()):
        super().__init__(message)
        self.rows = tuple(rows)


class SolverError(EllitubeError):
    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals or {}


class ContractViolation(EllitubeError):
    pass
