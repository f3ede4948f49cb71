"""Exception types raised by binorm.

Library code raises these; the CLI turns them into exit codes.
"""


class BinormError(Exception):
    """Base class for every binorm failure."""

    exit_code = 2


class ConfigurationError(BinormError):
    """A model, training or run configuration is invalid."""

    exit_code = 1


class DimensionError(BinormError):
    """Operand shapes do not agree."""


class ContractError(BinormError):
    """A documented precondition was violated by the caller."""


class DataError(BinormError):
    """Input data is out of range or empty."""


class FormatError(BinormError):
    """A BNM1 or BND1 file could not be decoded."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class ChecksumError(FormatError):
    """The trailing FNV-1a checksum does not match the file body."""


class NumericalError(BinormError):
    """A loss, gradient or parameter became NaN or infinite."""

    exit_code = 3

    def __init__(self, message: str, parameter: str | None = None):
        self.parameter = parameter
        super().__init__(message)
