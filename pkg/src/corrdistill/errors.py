"""Exception types shared across the package."""


class CorrDistillError(Exception):
    """Base class for all errors raised by this package."""


class ArchiveError(CorrDistillError):
    """Base class for feature-archive I/O and validation failures."""


class BadMagicError(ArchiveError):
    pass


class UnsupportedDtypeError(ArchiveError):
    pass


class SizeMismatchError(ArchiveError):
    pass


class NonFiniteError(ArchiveError):
    pass


class ManifestError(CorrDistillError):
    pass


class DimensionError(CorrDistillError):
    """Shapes of inputs are inconsistent with each other or with parameters."""


class ConfigurationError(CorrDistillError):
    """A configuration value makes the requested operation impossible."""


class DegenerateInputError(CorrDistillError):
    """Input is valid but degenerate for this operation (e.g. single-class targets)."""


class ResourceLimitError(CorrDistillError):
    """Input exceeds the configured dense-computation size cap."""


class ContractViolationError(CorrDistillError):
    """A cached intermediate was used after its producing state changed."""
