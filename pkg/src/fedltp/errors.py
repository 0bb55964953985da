"""Exception hierarchy shared by every module."""


class FedLTPError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class InvalidInputError(FedLTPError, ValueError):
    exit_code = 2


class ShapeError(FedLTPError, ValueError):
    exit_code = 2


class PruningError(FedLTPError):
    """A layer cannot be pruned any further."""

    exit_code = 3


class DataFormatError(FedLTPError):
    """Malformed on-disk data; ``offset`` is the byte where parsing failed."""

    exit_code = 4

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class ConfigError(FedLTPError):
    exit_code = 5

    def __init__(self, message, line=None, key=None):
        self.line = line
        self.key = key
        prefix = []
        if line is not None:
            prefix.append(f"line {line}")
        if key is not None:
            prefix.append(f"key '{key}'")
        if prefix:
            message = f"{', '.join(prefix)}: {message}"
        super().__init__(message)
