from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

from avse_policy_tuner.logging.log_types import LogType


@dataclass
class LogEntry:
    """
    One item of a run report: what happened (`log_type`), the file or directory it
    concerns (`where`), and any number of detail lines (`content`).

    Detail lines are stripped and de-duplicated on construction, first occurrence first.
    """

    log_type: LogType
    where: Path
    content: List[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.log_type = LogType(self.log_type)
        self.where = Path(self.where)
        items = [self.content] if isinstance(self.content, str) else self.content
        self.content = list(dict.fromkeys(str(item).strip() for item in items))

    @property
    def bullets(self) -> str:
        return "\n".join(f"- {item}" for item in self.content)

    def __add__(self, other: LogEntry) -> LogEntry:
        """
        Merge the detail lines of two entries about the same event and location.

        :raises TypeError: `other` is not a `LogEntry`, or differs in type or location.
        """
        if not isinstance(other, LogEntry):
            raise TypeError(f"Cannot add {type(other).__name__} to a LogEntry.")
        if other.log_type != self.log_type:
            raise TypeError(f"Cannot merge {self.log_type.name} with {other.log_type.name}.")
        if other.where != self.where:
            raise TypeError(f"Cannot merge entries for {self.where} and {other.where}.")
        return LogEntry(self.log_type, self.where, self.content + other.content)

    def render(self, relative_to: Optional[Path] = None) -> str:
        """
        The entry as report text: a headline naming the location, then the detail lines as
        bullets.

        :param relative_to: Give the location relative to this directory.
        """
        where = self.where.relative_to(relative_to) if relative_to else self.where
        output_str = ""

        match self.log_type:
            # FATALS
            case LogType.FATAL:
                output_str = f"Run failed at {where}:\n" + self.bullets
            case LogType.FATAL_INVALID_ARGUMENT:
                output_str = f"Invalid argument or configuration ({where}):\n" + (
                    self.bullets
                )
            case LogType.FATAL_MISSING_INPUT:
                output_str = f"Required input {where} was not found."
            case LogType.FATAL_IO:
                output_str = f"Could not read or write {where}:\n" + self.bullets
            case LogType.FATAL_BAD_FORMAT:
                output_str = f"File {where} is malformed or unsupported:\n" + (
                    self.bullets
                )
            case LogType.FATAL_DEGENERATE_SIGNAL:
                output_str = f"Degenerate (all-zero) signal in {where}:\n" + (
                    self.bullets
                )
            case LogType.FATAL_INSUFFICIENT_SIGNAL:
                output_str = f"Not enough non-silent signal in {where}:\n" + (
                    self.bullets
                )
            case LogType.FATAL_NON_FINITE_LOSS:
                output_str = (
                    f"Non-finite loss encountered; last good checkpoint is {where}:\n"
                    + self.bullets
                )
            case LogType.FATAL_REWARD_MODEL_MISMATCH:
                output_str = f"Reward records from different models were compared ({where}):\n" + (
                    self.bullets
                )
            case LogType.FATAL_OUT_DIR_LOCKED:
                output_str = f"Output directory {where} is locked by another command."
            # WARNINGS
            case LogType.WARN:
                output_str = f"Warnings for {where}:\n" + self.bullets
            case LogType.WARN_CLIPPED_SAMPLES:
                output_str = f"Samples were clipped to [-1, 1] when writing {where}:\n" + (
                    self.bullets
                )
            case LogType.WARN_CHECKPOINT_ABSENT:
                output_str = (
                    f"The following evaluation rows have no checkpoint in {where}, "
                    "and are reported as absent:\n" + self.bullets
                )
            case LogType.WARN_RATIO_CLIPPED:
                output_str = f"Importance log-ratio was clamped during {where}:\n" + (
                    self.bullets
                )
            case LogType.WARN_DEGENERATE_SCENE:
                output_str = f"Scenes in {where} were skipped because they cannot be scored:\n" + (
                    self.bullets
                )
            # INFORMATION
            case LogType.INFO:
                output_str = f"{where}:\n" + self.bullets
            case LogType.INFO_SCENES_WRITTEN:
                output_str = f"Scenes written to {where}:\n" + self.bullets
            case LogType.INFO_EPOCH_COMPLETE:
                output_str = f"Completed epochs ({where}):\n" + self.bullets
            case LogType.INFO_CHECKPOINT_WRITTEN:
                output_str = f"Checkpoint written to {where}."
            case LogType.INFO_TABLE_WRITTEN:
                output_str = f"Evaluation table written to {where}:\n" + self.bullets
            case LogType.INFO_LOG_WRITTEN:
                output_str = f"Training trace written to {where}."
            case _:
                raise TypeError(f"Rendering not supported for {self.log_type}.")
        return output_str + "\n"
