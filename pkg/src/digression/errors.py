"""Exception hierarchy shared by every stage of the pipeline."""


class DigressionError(Exception):
    """Base class for all package errors."""


class ContractViolation(DigressionError, ValueError):
    """Tensor shapes or layouts do not match the backend contract."""


class ValidationError(DigressionError, ValueError):
    """User-supplied data (pixels, masks, configs) is invalid."""


class TimestepRangeError(ContractViolation):
    """A diffusion timestep lies outside ``[0, T]``."""


class BudgetViolation(ValidationError):
    """A perturbation exceeds its L-infinity (or L2) budget."""


class DivergenceError(DigressionError, RuntimeError):
    """A loss or gradient became non-finite during optimization."""


class StageError(DigressionError, RuntimeError):
    """Wraps a failure inside one stage of the end-to-end pipeline."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
