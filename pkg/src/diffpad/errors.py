"""Exception hierarchy.

Every error raised on purpose by the package derives from ``DiffPadError`` and
belongs to one of three failure classes (config, I/O, numerical) that the CLI
maps to distinct exit codes.
"""


class DiffPadError(Exception):
    exit_code = 1


class ConfigError(DiffPadError, ValueError):
    exit_code = 2


class DataIOError(DiffPadError, OSError):
    exit_code = 3


class NumericalError(DiffPadError, ArithmeticError):
    exit_code = 4


class InvalidSchedule(ConfigError):
    pass


class InvalidConfig(ConfigError):
    pass


class InvalidTimestep(ConfigError):
    pass


class ShapeMismatch(ConfigError):
    pass


class ImageTooSmall(ConfigError):
    pass


class WrongVariant(ConfigError):
    pass


class EmptyBatch(ConfigError):
    pass


class EmptyDataset(ConfigError):
    pass


class EmptyScores(ConfigError):
    pass


class EmptySubset(ConfigError):
    pass


class DimensionMismatch(ConfigError):
    pass


class TooFewSamples(ConfigError):
    pass


class MissingSubject(ConfigError):
    pass


class ParseError(DataIOError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class DuplicateId(ParseError):
    pass


class MissingField(ParseError):
    pass


class DecodeError(DataIOError):
    pass


class BadCheckpoint(DataIOError):
    pass


class NonFiniteLoss(NumericalError):
    pass
