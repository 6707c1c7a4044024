"""Exception hierarchy shared by every stage of the pipeline."""


class NightfuseError(Exception):
    """Base class; the CLI maps subclasses onto exit codes."""

    exit_code = 2


class FormatError(NightfuseError):
    """Malformed grid or checkpoint bytes."""


class ShapeError(NightfuseError):
    """Incompatible or undersized array dimensions."""


class ParameterError(NightfuseError, ValueError):
    """An argument outside its documented domain."""

    exit_code = 1


class UnitsError(NightfuseError):
    """A grid carries the wrong units tag for the operation."""


class NumericError(NightfuseError, ArithmeticError):
    """Non-finite loss or network output."""

    exit_code = 3


class EvaluationError(NightfuseError):
    """Metric or spectrum cannot be computed on the given data."""


class SpecError(NightfuseError):
    """Sampler specification incompatible with the checkpoint."""

    exit_code = 1


class ConfigError(NightfuseError):
    """Invalid experiment configuration; message names the key path."""

    exit_code = 1


class StageError(NightfuseError):
    """A pipeline stage could not find an upstream artifact."""


class VerificationError(NumericError):
    """Analytic and finite-difference gradients disagree."""
