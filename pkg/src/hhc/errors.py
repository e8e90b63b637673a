"""Exception types. ``exit_code`` maps onto the CLI's process status."""


class HHCError(Exception):
    exit_code = 1


class ConfigError(HHCError, ValueError):
    exit_code = 2


class DataError(HHCError):
    exit_code = 3


class AudioError(DataError):
    pass


class EmptyInputError(AudioError):
    pass


class InputTooShortError(DataError, ValueError):
    pass


class ShapeError(HHCError, ValueError):
    pass


class TokenRangeError(DataError, ValueError):
    pass


class BitstreamError(DataError):
    """Malformed bitstream; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ChecksumError(DataError):
    pass


class VersionMismatchError(DataError):
    def __init__(self, found, expected):
        super().__init__(f"checkpoint format version {found} != supported version {expected}")
        self.found = found
        self.expected = expected


class MetricError(HHCError, ValueError):
    pass


class TrainingDivergence(HHCError):
    exit_code = 4
