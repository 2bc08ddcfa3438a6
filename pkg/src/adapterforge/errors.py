"""Exception types shared across the package.

The CLI maps these onto exit codes, so new failure modes should reuse
one of them instead of raising bare ValueErrors from deep inside.
"""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class TapeError(RuntimeError):
    """Tape misuse, e.g. backward twice without a reset."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class RoutingError(ValueError):
    """An activation plan references something the model does not have."""


class MissingPrerequisiteError(FileNotFoundError):
    """A pipeline stage needs an artifact that has not been produced."""


class NumericError(ArithmeticError):
    """Training hit a non-finite loss."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or does not match the model."""
