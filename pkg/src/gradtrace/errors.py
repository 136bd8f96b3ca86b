"""Exception types shared across the package."""


class GradTraceError(Exception):
    """Base class for all package errors."""


class DimensionError(GradTraceError, ValueError):
    pass


class NumericError(GradTraceError, ArithmeticError):
    pass


class TapeStateError(GradTraceError, RuntimeError):
    pass


class LengthError(GradTraceError, ValueError):
    pass


class ProvenanceError(GradTraceError, ValueError):
    pass


class DegenerateGradientError(NumericError):
    pass


class SizeError(GradTraceError, ValueError):
    pass


class DivergedError(NumericError):
    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(f"run diverged at step {step}" + (f": {message}" if message else ""))


class CorruptionError(GradTraceError, IOError):
    pass


class VersionError(GradTraceError, IOError):
    pass
