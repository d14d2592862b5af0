from __future__ import annotations


class BaseLabException(Exception):
    """This is a generic weakmag-lab exception."""


class ConfigError(BaseLabException):
    """This exception is raised when an experiment configuration or its inputs are not usable."""


class RecordFormatError(ConfigError):
    """This exception is raised when a record file cannot be parsed."""

    def __init__(self, message: str, line_number: None | int = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class NumericalFailure(BaseLabException):
    """This exception is raised whenever an integrator or solver cannot continue.

    Args:
        message: Explanation of the failure.
        step: Index of the failing time step, if the failure happened inside a time loop.
    """

    def __init__(self, message: str, step: None | int = None):
        self.step = step
        self.reason = message
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)

    def at_step(self, step: int) -> NumericalFailure:
        """Return the same failure re-labelled with a time step index."""
        return type(self)(self.reason, step=step)


class DegenerateInput(NumericalFailure):
    """This exception is raised when an input leaves a quantity undefined (e.g. an angle at r=0)."""


class AcceptanceFailure(BaseLabException):
    """This exception is raised when an experiment misses one of its acceptance thresholds."""


class CommandNotSupported(BaseLabException):
    """This exception is to be raised when the lab shell encounters a non-supported command."""


class LabSigStop(BaseLabException):
    """This exception is to be raised whenever we need to immediately stop the lab shell."""
