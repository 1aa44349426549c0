"""Exception hierarchy shared across the package."""

from __future__ import annotations


class MtlSplitError(Exception):
    """Base class for every error raised on purpose by this package."""


class DimensionError(MtlSplitError, ValueError):
    pass


class ContractError(MtlSplitError, ValueError):
    """A precondition of an operation was violated."""


class NumericError(MtlSplitError, ArithmeticError):
    def __init__(self, message: str, task_index: int | None = None):
        super().__init__(message)
        self.task_index = task_index


class ConfigError(MtlSplitError, ValueError):
    pass


class UnsupportedFactorError(MtlSplitError, ValueError):
    pass


class FormatError(MtlSplitError, ValueError):
    """A checkpoint, dataset or descriptor file could not be parsed."""


# wire protocol ---------------------------------------------------------------


class WireError(MtlSplitError):
    code = 0


class EncodingError(WireError, ValueError):
    code = 5


class VersionError(WireError):
    code = 2


class FramingError(WireError):
    code = 3


class UnsupportedDtypeError(WireError):
    code = 4


class ProtocolError(WireError):
    """Valid frames that break the request/response contract."""

    code = 6


class BadMagicError(ProtocolError):
    """Input does not start with the frame magic."""

    code = 1


# transport -------------------------------------------------------------------


class TransportError(MtlSplitError, OSError):
    pass


class RemoteError(MtlSplitError):
    def __init__(self, code: int, message: str):
        super().__init__(f"remote error {code}: {message}")
        self.code = code
        self.message = message
