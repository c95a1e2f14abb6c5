from enum import IntEnum


class LogType(IntEnum):
    """Kinds of report entry. FATAL < 100 <= WARN < 200 <= INFO."""

    FATAL = 0  # Catch-all for errors
    FATAL_INVALID_ARGUMENT = 1  # Bad argument or configuration value
    FATAL_MISSING_INPUT = 2  # Manifest, scene or checkpoint not found
    FATAL_IO = 3  # Could not read / write a file
    FATAL_BAD_FORMAT = 4  # Malformed or unsupported WAV / checkpoint
    FATAL_DEGENERATE_SIGNAL = 5  # All-zero signal where energy is required
    FATAL_INSUFFICIENT_SIGNAL = 6  # Too little (non-silent) signal for a metric
    FATAL_NON_FINITE_LOSS = 7  # NaN / Inf encountered during optimisation
    FATAL_REWARD_MODEL_MISMATCH = 8  # Records from different reward models compared
    FATAL_OUT_DIR_LOCKED = 9  # Another command is writing to the same out_dir

    WARN = 100  # Catch-all for warnings
    WARN_CLIPPED_SAMPLES = 101  # Samples outside [-1, 1] clipped on WAV export
    WARN_CHECKPOINT_ABSENT = 102  # Evaluation row has no checkpoint
    WARN_RATIO_CLIPPED = 103  # Importance log-ratio hit the numerical clamp
    WARN_DEGENERATE_SCENE = 104  # Scene skipped: too little signal to score

    INFO = 200  # Catch-all for information
    INFO_SCENES_WRITTEN = 201  # Scene WAVs + manifest written
    INFO_EPOCH_COMPLETE = 202  # Training epoch summary
    INFO_CHECKPOINT_WRITTEN = 203  # Checkpoint written
    INFO_TABLE_WRITTEN = 204  # Evaluation table written
    INFO_LOG_WRITTEN = 205  # Training log / loss curve written

    @property
    def is_fatal(self) -> bool:
        """Whether the instance corresponds to a FATAL error."""
        return self < LogType.WARN

    @property
    def is_information(self) -> bool:
        """Whether the instance corresponds to INFORMATION."""
        return LogType.INFO <= self

    @property
    def is_warning(self) -> bool:
        """Whether the instance corresponds to a WARNING."""
        return LogType.WARN <= self < LogType.INFO
