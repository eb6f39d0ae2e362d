"""Exception hierarchy. CLI exit codes hang off these classes."""


class AugBNError(Exception):
    exit_code = 4


class ShapeError(AugBNError, ValueError):
    """Tensor extents are inconsistent with an operation's contract."""


class ConfigError(AugBNError, ValueError):
    exit_code = 2


class DataFormatError(AugBNError, ValueError):
    exit_code = 3


class BadMagicError(DataFormatError):
    pass


class UnsupportedVersionError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class ChecksumError(DataFormatError):
    pass


class ShapeMismatchError(DataFormatError):
    pass


class InvariantViolation(AugBNError):
    exit_code = 4
