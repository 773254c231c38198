"""Exception and warning types shared across the package."""


class NcoivError(Exception):
    """Base class for all package errors."""


class SchemaError(NcoivError, ValueError):
    """Input data does not match the declared column roles or is malformed."""


class EstimationError(NcoivError, ArithmeticError):
    """A linear system required by an estimator is singular or ill-posed.

    ``stage`` names the pipeline step that failed, when known.
    """

    def __init__(self, message: str, stage: str | None = None):
        self.stage = stage
        if stage:
            message = f"[{stage}] {message}"
        super().__init__(message)


class ConvergenceError(EstimationError):
    def __init__(self, message: str, kkt_residual: float, stage: str | None = None):
        self.kkt_residual = kkt_residual
        super().__init__(f"{message} (last KKT residual {kkt_residual:.3e})", stage)


class NumericalWarning(UserWarning):
    """Raised for recoverable numerical events (ridge fallback, PD repair, ...)."""
