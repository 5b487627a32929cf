"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: usage problems exit 1, data problems
exit 2, anything else (numeric/runtime) exits 3.
"""


class CdacError(Exception):
    """Base class for all toolkit errors."""


class UsageError(CdacError):
    """Bad invocation: unknown flag combinations, invalid option values."""


class DataError(CdacError):
    """Malformed or inconsistent input data (corpora, annotations, configs)."""


class NumericError(CdacError):
    """Numeric failure during training or inference (non-finite values etc.)."""


class CheckpointError(DataError):
    """Base class for checkpoint container problems."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint carries an unsupported format version."""


class CheckpointCorruptError(CheckpointError):
    """Checkpoint payload is truncated or fails structural validation."""


class CheckpointShapeError(CheckpointError):
    """Tensor payload shape disagrees with the manifest directory."""
