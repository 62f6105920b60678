"""Exception hierarchy shared by every module."""

from typing import Any, Dict, Optional


class MeanFieldError(RuntimeError):
    pass


class ConfigError(MeanFieldError):
    pass


class LayoutError(MeanFieldError, IndexError):
    pass


class DomainError(MeanFieldError, ValueError):
    pass


class ModelError(MeanFieldError):
    pass


class ExpressionSyntaxError(ModelError):
    def __init__(self, message: str, text: str, position: int) -> None:
        super().__init__(f"{message} at position {position}: {text!r}")
        self.text = text
        self.position = position


class UnknownFeatureError(ModelError):
    pass


class CensoringError(MeanFieldError):
    def __init__(self, message: str, level: int) -> None:
        super().__init__(f"{message} (level {level})")
        self.level = level


class FactorizationError(MeanFieldError):
    pass


class StationarySolveError(MeanFieldError):
    pass


class InstabilityError(MeanFieldError):
    pass


class NonConvergenceError(MeanFieldError):
    pass


class IntegrationError(MeanFieldError):
    def __init__(self, message: str, time: float) -> None:
        super().__init__(f"{message} at t={time:.6g}")
        self.time = time


class SimulationError(MeanFieldError):
    def __init__(self, message: str, state: Optional[Dict[str, Any]] = None) -> None:
        super().__init__(message)
        self.state = state or {}
