class DiffPretrainError(Exception):
    exit_code = 1


class ConfigError(DiffPretrainError, ValueError):
    exit_code = 2


class MissingArtifactError(DiffPretrainError, FileNotFoundError):
    exit_code = 3


class NumericError(DiffPretrainError, ArithmeticError):
    exit_code = 4


class VolumeFormatError(DiffPretrainError, ValueError):
    exit_code = 3


class ShapeMismatchError(DiffPretrainError, ValueError):
    exit_code = 2


class PatchGridError(DiffPretrainError, ValueError):
    exit_code = 2


class ScheduleError(DiffPretrainError, ValueError):
    exit_code = 2


class ConditioningError(DiffPretrainError, ValueError):
    exit_code = 2


class CheckpointError(DiffPretrainError, ValueError):
    exit_code = 3


class PhantomError(DiffPretrainError, ValueError):
    exit_code = 2


class ProbeError(DiffPretrainError, ValueError):
    exit_code = 2
