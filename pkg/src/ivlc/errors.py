"""Exception taxonomy shared across the package.

The CLI maps these onto distinct exit codes: validation errors exit 2,
IO/parse errors exit 3, contract errors exit 4.
"""


class ValidationError(ValueError):
    """Bad user-supplied value: out-of-range parameter, invalid config."""


class ShapeError(ValidationError):
    """Tensor shapes incompatible with the requested operation."""


class ContractError(RuntimeError):
    """An internal precondition was violated by the caller."""


class ParseError(Exception):
    """A binary input file (IDX, checkpoint) could not be decoded."""


class CheckpointError(ParseError):
    """Checkpoint file is corrupt, truncated, or version-incompatible."""


class TransferAbortError(ContractError):
    """Oracle relabeling corrupted too much of the training set."""
