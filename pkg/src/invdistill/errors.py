"""Exception hierarchy.

Every error carries the CLI exit code it maps to: 1 for configuration
problems, 2 for bad input data, 3 for numerical failures.
"""


class WorkbenchError(Exception):
    exit_code = 1


class ConfigError(WorkbenchError):
    exit_code = 1


class DataError(WorkbenchError):
    exit_code = 2


class NumericError(WorkbenchError):
    exit_code = 3


class InvalidVocabulary(ConfigError):
    pass


class InvalidMask(ConfigError):
    pass


class ScheduleOrderError(ConfigError):
    pass


class InstanceTooLarge(ConfigError):
    pass


class IncompatibleCheckpoint(ConfigError):
    pass


class InputKindError(ConfigError):
    pass


class DomainError(NumericError):
    pass


class ShapeError(NumericError):
    pass


class InvalidRatio(NumericError):
    pass


class UnreachableState(NumericError):
    pass


class InvalidSimplex(DataError):
    pass


class SpecError(DataError):
    pass


class CheckpointParseError(DataError):
    pass


class RemoteUnavailable(WorkbenchError):
    """Scoring endpoint could not be reached; callers treat this as non-fatal."""

    exit_code = 0


class ProtocolError(DataError):
    pass
