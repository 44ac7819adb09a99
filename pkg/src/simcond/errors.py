"""Exception hierarchy shared by every module.

The CLI maps each family to a distinct exit code (see :data:`EXIT_CODES`).
"""

from __future__ import annotations


class SimCondError(Exception):
    """Base class for all package errors."""


class ParameterError(SimCondError, ValueError):
    """An argument violates a documented precondition."""


class ConfigError(SimCondError):
    """Unknown or malformed configuration keys."""


class DataError(SimCondError):
    """A data file could not be read or has the wrong layout."""


class CorpusParseError(DataError):
    def __init__(self, path, line_no: int, reason: str):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {reason}")


class EmptyCorpusError(SimCondError):
    """Filtering or selection left nothing to work with."""


class NumericDivergenceError(SimCondError):
    """Non-finite values appeared during sampling, simulation or training."""

    def __init__(self, message: str, step: int | None = None):
        self.step = step
        super().__init__(message if step is None else f"{message} (step {step})")


class TrainingError(NumericDivergenceError):
    """Loss became non-finite; ``step`` holds the iteration index."""


class TrackingFailure(SimCondError):
    """The tracked root escaped too far from its reference."""

    def __init__(self, frame: int, distance: float, diffusion_step: int | None = None):
        self.frame = frame
        self.distance = distance
        self.diffusion_step = diffusion_step
        msg = f"tracking failed at frame {frame} (root {distance:.3f} m from target)"
        if diffusion_step is not None:
            msg += f" during projection at diffusion step {diffusion_step}"
        super().__init__(msg)


class ModeError(SimCondError):
    """Input kind does not match the configured encoder mode."""


class UsageError(SimCondError):
    """API called out of order (e.g. backward without a cached forward)."""


EXIT_CODES = {
    ConfigError: 2,
    ParameterError: 2,
    DataError: 3,
    NumericDivergenceError: 4,
    TrackingFailure: 4,
    EmptyCorpusError: 5,
}


def exit_code_for(exc: BaseException) -> int:
    for cls in type(exc).__mro__:
        if cls in EXIT_CODES:
            return EXIT_CODES[cls]
    return 1
