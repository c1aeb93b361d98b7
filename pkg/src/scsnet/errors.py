"""Exception taxonomy shared by all scsnet modules."""


class ScsNetError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(ScsNetError):
    """Operand shapes or axes are incompatible with the requested operation."""


class DomainError(ScsNetError):
    """Input values are outside the mathematical domain of the operation."""


class ContractError(ScsNetError):
    """A documented precondition was violated by the caller."""


class FormatError(ScsNetError):
    """A binary file does not match its declared layout.

    Carries the path and the byte offset at which parsing failed.
    """

    def __init__(self, path, offset, message):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = str(path)
        self.offset = int(offset)


class ConfigError(ScsNetError):
    """An experiment or model configuration is invalid."""


class DataError(ScsNetError):
    """Dataset contents violate an invariant (e.g. labels out of range)."""


class TrainingError(ScsNetError):
    """Training failed (divergence, non-finite gradients)."""
