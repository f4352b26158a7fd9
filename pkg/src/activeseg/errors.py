"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: validation problems exit with 2,
adapter failures with 3, and file/format problems with 4.
"""


class ActivesegError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(ActivesegError, ValueError):
    """Bad inputs: wrong shapes, out-of-domain values, broken pairings."""


class DimensionError(ValidationError):
    """Shape or length mismatch between tensors/vectors."""


class DomainError(ValidationError):
    """A value lies outside the mathematically valid domain."""


class EmptyInputError(ValidationError):
    """An operation that needs at least one element received none."""


class PairingError(ValidationError):
    """Records that must refer to the same samples do not line up."""


class BudgetError(ValidationError):
    """A selection budget exceeds what the sample pool can provide."""


class ExhaustionError(ValidationError):
    """No eligible samples remain to select from."""


class FileError(ActivesegError):
    """Base class for tensor/manifest file problems."""


class FormatError(FileError):
    """A file does not follow the expected on-disk format."""


class CorruptionError(FileError):
    """A file's header and payload disagree (truncation, bad sizes)."""


class AdapterError(ActivesegError):
    """A trainer or oracle adapter failed."""
