from typing import Optional

from avse_policy_tuner.logging.log_types import LogType


class TunerError(Exception):
    """
    Allows us to define a custom exception type for when the tuner encounters a genuine
    problem with its inputs or with the optimisation.

    :param entry: `LogType` that should be associated with the error.
    :param exit_code: Process exit code the CLI should return for this error.
    """

    entry: LogType
    exit_code: int = 1
    kind: str = "error"
    default_log_type: LogType = LogType.FATAL

    def __init__(self, *args, log_as: Optional[LogType] = None, **kwargs) -> None:
        super().__init__(*args, **kwargs)

        self.entry = LogType(log_as if log_as is not None else self.default_log_type)


class InvalidArgumentError(TunerError, ValueError):
    exit_code = 2
    kind = "invalid-argument"
    default_log_type = LogType.FATAL_INVALID_ARGUMENT


class ConfigError(TunerError, ValueError):
    exit_code = 2
    kind = "config"
    default_log_type = LogType.FATAL_INVALID_ARGUMENT


class RewardModelMismatchError(TunerError, ValueError):
    exit_code = 2
    kind = "reward-model-mismatch"
    default_log_type = LogType.FATAL_REWARD_MODEL_MISMATCH


class WavFormatError(TunerError, ValueError):
    exit_code = 3
    kind = "format"
    default_log_type = LogType.FATAL_BAD_FORMAT


class UnsupportedFormatError(TunerError, ValueError):
    exit_code = 3
    kind = "unsupported-format"
    default_log_type = LogType.FATAL_BAD_FORMAT


class TunerIOError(TunerError, OSError):
    exit_code = 3
    kind = "io"
    default_log_type = LogType.FATAL_IO


class DegenerateSignalError(TunerError, ValueError):
    exit_code = 4
    kind = "degenerate-signal"
    default_log_type = LogType.FATAL_DEGENERATE_SIGNAL


class InsufficientSignalError(TunerError, ValueError):
    exit_code = 4
    kind = "insufficient-signal"
    default_log_type = LogType.FATAL_INSUFFICIENT_SIGNAL


class NumericalFailureError(TunerError, ArithmeticError):
    exit_code = 4
    kind = "numerical-failure"
    default_log_type = LogType.FATAL_NON_FINITE_LOSS
