class DataError(ValueError):
    """Malformed or inconsistent input data (CLI exit code 2)."""


class NumericalError(RuntimeError):
    """Non-finite values or failed numerical procedures (CLI exit code 3)."""


class ConvergenceError(NumericalError):
    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals
