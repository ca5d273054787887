"""Exception hierarchy for LatentMark.

Each class also derives from the built-in exception a caller would naturally
catch (``ValueError`` for bad inputs, ``RuntimeError`` for failed runs).
"""


class LatentMarkError(Exception):
    """Base class for all LatentMark errors."""


class ParameterError(LatentMarkError, ValueError):
    """A numeric parameter is outside its documented range."""


class ShapeError(LatentMarkError, ValueError):
    """Two arrays that must agree in shape do not."""


class ScheduleError(ParameterError):
    """A noise schedule or step coefficient would need a negative radicand."""


class ConditionError(LatentMarkError, ValueError):
    """A condition label selects no prior component."""


class ConfigError(LatentMarkError, ValueError):
    """Configuration is invalid or references timesteps off the sampling grid."""


class DegenerateInputError(LatentMarkError, ValueError):
    """Input statistics make an operator undefined (zero variance, etc.)."""


class RadicandError(DegenerateInputError):
    """var(w_s) >= var(x_T): the structure embedding has no real scale factor."""


class StorageError(LatentMarkError, ValueError):
    """A binary artifact file is malformed."""


class ReportError(LatentMarkError, ValueError):
    """A report cannot be built or written from the given results."""


class StateError(LatentMarkError, RuntimeError):
    """An operation needs state that was never recorded."""


class DivergenceError(LatentMarkError, RuntimeError):
    """A gradient or loss became non-finite.

    Attributes:
        step: Index of the step (or iteration) where divergence was detected
        history: Partial optimization history, if any was collected
    """

    def __init__(self, message: str, step: int, history: list | None = None):
        super().__init__(f"{message} (at step {step})")
        self.step = step
        self.history = history if history is not None else []


class ExperimentAbortedError(LatentMarkError, RuntimeError):
    """Too many images failed for the run to be meaningful."""
