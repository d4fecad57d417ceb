"""Exception hierarchy shared by every gestboot module."""


class GestbootError(Exception):
    """Base class for all errors raised by gestboot."""


class InvalidInputError(GestbootError, ValueError):
    """An argument violates an operation's precondition (shape, range, ...)."""


class FormatError(GestbootError, ValueError):
    """A file on disk does not follow the expected binary/text layout."""


class ScheduleExhaustedError(GestbootError, IndexError):
    """The learning-rate schedule was queried past its last iteration."""


class ConfigError(GestbootError, KeyError):
    """A configuration file is missing a key or has a malformed value."""

    def __init__(self, key, message=None):
        self.key = key
        super().__init__(message or f"configuration error for key {key!r}")

    def __str__(self):
        return self.args[0]
