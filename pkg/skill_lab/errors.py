"""
Error types shared across the lab.

Each error carries the exit code the CLI reports for it, so the mapping from
failure to exit status lives next to the failure itself.
"""
from typing import Optional


class LabError(Exception):
    """Base class for every error the lab raises on purpose"""
    exit_code = 1


class ConfigError(LabError, ValueError):
    """Invalid configuration, override or argument combination"""
    exit_code = 2


class ArtifactIOError(LabError, OSError):
    """A file could not be read or written"""
    exit_code = 3


class IntegrityError(LabError):
    """Hash, version or manifest mismatch, or a truncated artifact"""
    exit_code = 4


class NonFiniteLossError(LabError, ArithmeticError):
    """Training produced a NaN or infinite loss"""
    exit_code = 5

    def __init__(self, message: str, step: Optional[int] = None, epoch: Optional[int] = None):
        super().__init__(message)
        self.step = step
        self.epoch = epoch


class ShapeError(LabError, ValueError):
    """Tensor shapes do not conform for a primitive"""
    exit_code = 1


class DataError(LabError, ValueError):
    """Malformed, empty or over-length example or dataset"""
    exit_code = 2


class GradientError(LabError, RuntimeError):
    """Misuse of the computation record (non-scalar loss, double backward, mixed records)"""
    exit_code = 1
