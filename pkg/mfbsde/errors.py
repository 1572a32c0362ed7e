from typing import Optional, Any


class MfbsdeError(Exception):
    """Base class of every error raised by the library"""


class ValidationError(MfbsdeError, ValueError):
    pass


class DimensionError(MfbsdeError, ValueError):
    pass


class DomainError(ValidationError):
    pass


class HypothesisViolationError(ValidationError):
    pass


class ConfigError(ValidationError):
    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        self.key = key
        self.line = line

        location = ""
        if line is not None:
            location = f"line {line}: "
        if key is not None:
            location += f"{key}: "

        super().__init__(f"{location}{message}")


class CapabilityError(MfbsdeError, NotImplementedError):
    pass


class DivergenceError(MfbsdeError, ArithmeticError):
    def __init__(self, message: str, step: Any = None, report: Any = None):
        self.step = step
        self.report = report
        super().__init__(message if step is None else f"{message} (at step {step})")


class BudgetError(MfbsdeError, RuntimeError):
    def __init__(self, message: str, report: Any = None):
        self.report = report
        super().__init__(message)


class NoRealRootError(MfbsdeError, ArithmeticError):
    pass


class InfeasibilityError(MfbsdeError, ValueError):
    pass
