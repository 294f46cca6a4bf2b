"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: usage problems exit 1, ``DataError``
(and I/O errors) exit 2, ``TrainingDiverged`` exit 3.
"""


class DataError(Exception):
    """Invalid input data: bad files, label values, dimension mismatches."""


class CheckpointError(DataError):
    """Unreadable, corrupted, or incompatible checkpoint file."""


class TrainingDiverged(Exception):
    """Total loss became non-finite during optimization."""
