"""Exception types shared across the package.

ValidationError (and subclasses) map to CLI exit code 1, any other
RuntimeError to exit code 2.
"""


class ValidationError(ValueError):
    """Input violates a documented precondition or schema."""


class ParseError(ValidationError):
    """A dataset or config file could not be parsed; message carries file:line."""


class NonFiniteLossError(RuntimeError):
    """A loss evaluated to NaN or infinity; message carries the loss breakdown."""


class TrainingAborted(RuntimeError):
    """Training stopped abnormally; message points at the last good checkpoint."""


class CheckpointError(ValidationError):
    """A checkpoint file is missing, corrupt, or incompatible."""
