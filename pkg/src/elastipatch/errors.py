"""Exception types shared across the package."""


class DimensionMismatchError(ValueError):
    """Image or grid dimensions do not satisfy a divisibility requirement."""


class ParseError(ValueError):
    """A binary file (PPM, PNG, IDX, checkpoint) is malformed.

    Carries the byte offset at which parsing failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(ValueError):
    """A harness configuration is missing keys or references unknown names."""
