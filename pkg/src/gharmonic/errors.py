"""Exception hierarchy shared by every module."""


class GHarmonicError(Exception):
    """Base class for all package errors."""


class EvaluationError(GHarmonicError):
    """A model function or expression produced a non-finite or undefined value."""

    def __init__(self, message, point=None):
        super().__init__(message if point is None else f"{message} at {point!r}")
        self.point = point


class ExprSyntaxError(GHarmonicError):
    def __init__(self, message, position):
        super().__init__(f"{message} (column {position + 1})")
        self.position = position


class ConfigError(GHarmonicError):
    pass


class SimulationError(GHarmonicError):
    def __init__(self, message, path=None, step=None):
        super().__init__(f"{message} (path {path}, step {step})")
        self.path = path
        self.step = step


class SolverError(GHarmonicError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class ExitTruncationError(GHarmonicError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ComparisonViolation(GHarmonicError):
    def __init__(self, message, location=None):
        super().__init__(message)
        self.location = location


class PrecisionError(GHarmonicError):
    pass


class RadiusConditionError(GHarmonicError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state
