"""
Error types raised across the toolkit.

Every library function raises one of the classes below instead of
printing or exiting. The command-line layer turns them into exit codes
with `exit_code_for`:

    0   success
    2   configuration errors (bad keys, bad values, rate mismatch)
    3   data errors (malformed audio, silent references, bad checkpoints)
    4   numeric failures (eigensolver breakdown, diverging training)
"""

from typing import Any


class SSTError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ConfigError(SSTError):
    """A configuration value, key, or combination is invalid."""

    exit_code = 2


class DataError(SSTError):
    """Input data cannot be used as given."""

    exit_code = 3


class AudioFormatError(DataError):
    """The file is not a well-formed RIFF/WAVE file."""


class UnsupportedAudioError(DataError):
    """The file is a WAV file with an encoding or rate we do not read."""


class UndefinedSNRError(DataError):
    """A signal-to-noise ratio was requested for a silent signal."""


class UndefinedMetricError(DataError):
    """A metric was requested against a reference with no energy."""


class SequenceError(DataError):
    """Streaming frames arrived out of order."""


class SyncError(DataError):
    """An FMCW period cannot be located in the received stream."""


class CheckpointVersionError(DataError):
    """A checkpoint does not match the reader or the configuration."""


class NumericError(SSTError):
    """A numeric routine failed; `diagnostics` holds what is known."""

    exit_code = 4

    def __init__(self, message: str, **diagnostics: Any):
        super().__init__(message)
        self.diagnostics = diagnostics

    def __str__(self) -> str:
        message = super().__str__()
        if not self.diagnostics:
            return message
        details = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
        return f"{message} ({details})"


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""


class ShapeError(SSTError, ValueError):
    """Operands of an operation have incompatible shapes."""

    exit_code = 3

    def __init__(self, op: str, *shapes: Any):
        self.op = op
        self.shapes = shapes
        rendered = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {rendered}")


class TapeError(SSTError, RuntimeError):
    """A computation tape was used in a way it does not support."""


def exit_code_for(err: BaseException) -> int:
    """Map an exception to the process exit code used by the CLI."""
    match err:
        case SSTError():
            return err.exit_code
        case OSError():
            return DataError.exit_code
        case _:
            return 1
