"""Exception types raised across the package."""


class DdicError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DdicError, ValueError):
    pass


class DataError(DdicError, ValueError):
    pass


class TrainingDivergenceError(DdicError, RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at optimization step {step}")
        self.step = step
        self.loss = loss


class CapabilityError(DdicError, TypeError):
    pass


class NumericError(DdicError, ArithmeticError):
    def __init__(self, message: str, step: int | None = None):
        if step is not None:
            message = f"{message} (step t={step})"
        super().__init__(message)
        self.step = step


class DegenerateCorrelationError(DdicError, ArithmeticError):
    pass


class HistogramError(DdicError, ValueError):
    pass


class StatisticsError(DdicError, ArithmeticError):
    pass
