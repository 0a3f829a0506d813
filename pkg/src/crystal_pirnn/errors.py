"""Exception hierarchy shared by every module of the package."""


class CrystalPirnnError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class ValidationError(CrystalPirnnError, ValueError):
    """Invalid configuration or argument values."""

    exit_code = 1


class RangeError(ValidationError):
    """Argument outside its admissible range (temperature, time, ...)."""


class EvaluationError(CrystalPirnnError, ArithmeticError):
    """A model evaluation produced a physically meaningless value."""


class DivisionDomainError(EvaluationError):
    pass


class DivergenceError(CrystalPirnnError):
    """The ODE integrator failed; ``t_fail`` is the last reached time."""

    def __init__(self, message: str, t_fail: float, run_index: int | None = None):
        super().__init__(message)
        self.t_fail = t_fail
        self.run_index = run_index


class ShapeError(CrystalPirnnError, ValueError):
    pass


class ContractError(CrystalPirnnError):
    """A precondition of an operation was violated by the caller."""


class NumericError(CrystalPirnnError, FloatingPointError):
    """Non-finite intermediate values in a model or loss."""


class DatasetError(CrystalPirnnError):
    pass


class ParseError(DatasetError):
    """Malformed file; the message carries the offending location."""

    exit_code = 3


class VersionError(ParseError):
    pass


class EnsembleError(CrystalPirnnError):
    def __init__(self, message: str, failed_seeds: list[int]):
        super().__init__(message)
        self.failed_seeds = list(failed_seeds)
