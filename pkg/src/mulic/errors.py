"""Exceptions shared by the binary file formats."""


class FormatError(ValueError):
    """Base class for malformed SIIQ / MULC files."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class IntegrityError(FormatError):
    pass
