"""Exception taxonomy shared across the package.

Each class maps to a distinct CLI exit code (see cli.EXIT_CODES), so
failures are machine-distinguishable end to end.
"""


class RaysegError(Exception):
    """Base class for all package errors."""


class ShapeError(RaysegError):
    """Tensor/array dimensions disagree with an operation's contract."""


class DomainError(RaysegError):
    """Input value outside its valid domain (pixel bounds, index range, ...)."""


class BehindCameraError(DomainError):
    """World point projects behind the camera (z_c <= 0)."""


class ContractError(RaysegError):
    """Caller violated an API contract (non-scalar backward root,
    variant/token mismatch, non-one-hot target, ...)."""


class NumericFault(RaysegError):
    """Non-finite value produced by a forward pass or loss."""


class ConfigError(RaysegError):
    """Invalid or inconsistent configuration."""


class CapabilityError(RaysegError):
    """Checkpoint lacks the sections needed for the requested operation."""


class CheckpointError(RaysegError):
    """Malformed, missing, or incompatible checkpoint file."""


class ManifestMissingError(RaysegError):
    """Dataset manifest or a file it references does not exist."""


class ManifestSchemaError(RaysegError):
    """Dataset manifest fails to parse or violates the schema."""


class RotationError(ManifestSchemaError):
    """Camera rotation is not orthonormal with determinant +1."""


class PaletteError(ManifestSchemaError):
    """Class palette has gaps or a label uses an id outside the palette."""
