"""Exception types shared across the package.

Contract violations (bad arguments, malformed inputs) derive from
ContractError so the CLI can map them to exit code 1; genuine I/O
failures stay OSError and map to exit code 2.
"""


class ContractError(ValueError):
    """A precondition or invariant stated by the API was violated."""


class DimensionError(ContractError):
    """Tensor shapes are incompatible for the requested operation."""


class TokenIndexError(ContractError, IndexError):
    """A token id is outside the vocabulary (or an index is out of range)."""


class LanguageTagError(ContractError):
    """A language tag is not one of the known languages."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class CheckpointError(ContractError):
    """Base for malformed-checkpoint conditions."""


class BadMagicError(CheckpointError):
    """File does not start with the checkpoint magic bytes."""


class VersionMismatchError(CheckpointError):
    """Checkpoint format version is not supported."""


class ShapeMismatchError(CheckpointError):
    """A stored parameter's shape disagrees with the model config."""


class TruncatedPayloadError(CheckpointError):
    """Checkpoint payload is shorter (or longer) than the manifest requires."""


class KindMismatchError(CheckpointError):
    """A dense checkpoint was supplied where an MoE one was expected, or vice versa."""


class AssemblyError(ContractError):
    """Donor checkpoint weights do not fit the target expert slot."""
