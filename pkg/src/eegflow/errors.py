"""Exception hierarchy shared by every pipeline stage."""


class EegFlowError(Exception):
    """Base class; ``stage`` names the pipeline stage that raised."""

    exit_code = 1

    def __init__(self, message: str, stage: str | None = None):
        super().__init__(message)
        self.stage = stage

    def __str__(self) -> str:
        msg = super().__str__()
        return f"[{self.stage}] {msg}" if self.stage else msg


class ValidationError(EegFlowError, ValueError):
    """Malformed input, violated precondition or bad configuration."""

    exit_code = 2


class NumericalError(EegFlowError, ArithmeticError):
    """Divergence or non-finite values during computation."""

    exit_code = 3
