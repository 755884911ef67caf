"""Exception hierarchy for the numerical workbench."""


class WorkbenchError(Exception):
    """Base class for every error raised by ``workbench.lab``."""


class InvalidDatasetError(WorkbenchError, ValueError):
    """Generator arguments or a LabeledSet violate their invariants."""


class ArchitectureMismatchError(WorkbenchError, ValueError):
    """A checkpoint or init handle does not match the requested architecture."""


class TriggerPlacementError(WorkbenchError, ValueError):
    """A trigger does not fit inside the image it is applied to."""


class InsufficientSamplesError(WorkbenchError, ValueError):
    """Not enough samples of the required classes are available."""

    def __init__(self, message, missing=None):
        super().__init__(message)
        self.missing = list(missing or [])


class EmptyInputError(WorkbenchError, ValueError):
    """A reduction (accuracy, AUC, expectation) received no input."""


class DivergenceError(WorkbenchError, RuntimeError):
    """Loss or gradients became non-finite during optimization."""

    def __init__(self, message, step=None, trace=None):
        super().__init__(message)
        self.step = step
        self.trace = trace


class MissingProbeError(WorkbenchError, ValueError):
    """A budgeted repair was asked to select a checkpoint without a probe set."""
