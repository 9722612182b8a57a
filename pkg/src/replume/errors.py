"""Exception hierarchy shared across the pipeline."""


class ReplumeError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(ReplumeError, ValueError):
    pass


class RankError(ShapeError):
    pass


class NumericInputError(ReplumeError, ValueError):
    pass


class NumericError(ReplumeError, FloatingPointError):
    pass


class LabelError(ReplumeError, ValueError):
    pass


class LanguageError(ReplumeError, ValueError):
    pass


class InputError(ReplumeError, ValueError):
    pass


class IdError(ReplumeError, KeyError):
    pass


class PositionError(ReplumeError, IndexError):
    pass


class DataError(ReplumeError, ValueError):
    pass


class DegenerateDataError(DataError):
    pass


class ConfigurationError(ReplumeError):
    pass


class PlanError(ReplumeError, ValueError):
    """A training plan falls outside the allowed hyperparameter grid."""


class ParseError(ReplumeError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CheckpointError(ReplumeError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass
