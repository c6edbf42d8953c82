"""Exception types shared across the package."""

from typing import Dict


class MakeupPriorError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MakeupPriorError, ValueError):
    """Invalid configuration, shapes, or missing inputs."""


class BackendFault(MakeupPriorError, RuntimeError):
    """A backend produced non-finite or malformed output."""


class OptimizationFault(MakeupPriorError, RuntimeError):
    """Non-finite loss during test-time optimization.

    ``component`` names the offending loss term; ``trajectory`` carries the
    per-iteration breakdowns recorded before the fault, when available.
    """

    def __init__(self, message, component=None, trajectory=None):
        super().__init__(message)
        self.component = component
        self.trajectory = list(trajectory or [])


class EmptyRegion(MakeupPriorError):
    """A semantic region has no support in one of the images."""

    def __init__(self, region, side):
        super().__init__(f"region {region!r} is empty in the {side} image")
        self.region = region
        self.side = side


class ExportError(MakeupPriorError):
    """One or more files of an export could not be written.

    ``failures`` maps each failed path to the underlying error message.
    """

    def __init__(self, message: str, failures: Dict[str, str]):
        super().__init__(message)
        self.failures = dict(failures)
