from typing import Any, Optional


class PlumeseekError(Exception):
    """
    Base class for every error raised by the inversion library.
    """

    def __init__(self, message: str) -> None:
        super().__init__(message)
        self.message = message

    def record(self) -> dict:
        """
        Machine-readable description of the error.

        Returns:
            dict: Error class name and message, plus subclass specific fields.
        """
        return {"error": type(self).__name__, "message": self.message}


class DegenerateFrameError(PlumeseekError):
    """Raised when the wind vector has zero length, so no downwind frame exists."""


class DegenerateLinkError(PlumeseekError):
    """Raised when a background link joins two points with zero time and distance separation."""


class DomainError(PlumeseekError):
    """Raised when a coordinate falls outside a basis domain box."""


class NumericalRankError(PlumeseekError):
    """Raised when a precision matrix cannot be factorised."""


class ConvergenceError(PlumeseekError):
    """
    Raised when an iterative solver reaches its iteration cap.

    The last iterate is kept on ``partial`` so callers can carry on from it.
    """

    def __init__(self, message: str, partial: Any = None, iterations: int = 0) -> None:
        super().__init__(message)
        self.partial = partial
        self.iterations = iterations


class IngestError(PlumeseekError):
    """Raised when an input file cannot be parsed."""

    def __init__(self, message: str, line: Optional[int] = None) -> None:
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line

    def record(self) -> dict:
        record = super().record()
        record["line"] = self.line
        return record


class ConfigError(PlumeseekError):
    """Raised for unknown keys or invalid values in a run configuration."""


class UsageError(PlumeseekError):
    """Raised when a pipeline stage is invoked without the inputs it needs."""


class ChainAbortedError(PlumeseekError):
    """
    Raised when a Markov chain stops on a numerical failure.

    The samples collected before the failure are kept on ``trace``.
    """

    def __init__(self, message: str, trace: Any = None) -> None:
        super().__init__(message)
        self.trace = trace
