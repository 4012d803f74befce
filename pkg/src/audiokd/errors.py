"""Exception types shared across the toolkit."""


class AudioKDError(Exception):
    pass


class ConfigError(AudioKDError, ValueError):
    pass


class ShapeError(AudioKDError, ValueError):
    pass


class NumericError(AudioKDError, ValueError):
    pass


class DomainError(AudioKDError, ValueError):
    pass


class DecodeError(AudioKDError, OSError):
    pass


class EmptyInputError(AudioKDError, ValueError):
    pass


class TooShortError(AudioKDError, ValueError):
    pass


class FormatError(AudioKDError, ValueError):
    pass


class CorruptionError(FormatError):
    pass


class AlignmentError(AudioKDError, KeyError):
    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = sorted(missing)

    def __str__(self):
        return self.args[0]


class ConsistencyError(AudioKDError, ValueError):
    pass
