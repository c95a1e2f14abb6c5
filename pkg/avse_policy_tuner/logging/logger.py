from __future__ import annotations

from pathlib import Path
from typing import List, Optional

from avse_policy_tuner.logging.log_entry import LogEntry
from avse_policy_tuner.logging.log_types import LogType

# (LogType predicate, heading) in the order the report lists them.
REPORT_SECTIONS = (
    ("is_fatal", "FATAL: The run could not complete"),
    ("is_warning", "WARNINGS"),
    ("is_information", "INFORMATION"),
)


def heading(text: str, pad_above: int = 1) -> str:
    """An underlined report heading, preceded by `pad_above` blank lines."""
    return "\n" * pad_above + f"{text}\n{'-' * len(text)}\n"


class Logger:
    """
    Collects `LogEntry`s while a command runs and renders them as a report when it ends.

    Entries created without a `where` point at `current_location`. Adding an entry whose
    type and location match an existing one extends that entry, so a run produces one
    "Completed epochs" entry rather than one per epoch.
    """

    entries: List[LogEntry]

    def __init__(self, *entries: LogEntry, current_location: Optional[Path] = None) -> None:
        if any(not isinstance(e, LogEntry) for e in entries):
            raise ValueError("A Logger can only be pre-populated with LogEntry objects.")
        self.entries = list(entries)
        self.current_location = Path(current_location) if current_location else None

    def _select(self, predicate: str) -> List[LogEntry]:
        return [e for e in self.entries if getattr(e.log_type, predicate)]

    @property
    def fatal(self) -> List[LogEntry]:
        return self._select("is_fatal")

    @property
    def warnings(self) -> List[LogEntry]:
        return self._select("is_warning")

    @property
    def information(self) -> List[LogEntry]:
        return self._select("is_information")

    def add_entry(self, log_type: LogType, *content: str, **kwargs) -> None:
        """
        Record `content` under `log_type`.

        `kwargs` are passed to `LogEntry`; `where` defaults to `current_location`.
        """
        kwargs.setdefault("where", self.current_location)
        entry = LogEntry(log_type=log_type, content=list(content), **kwargs)

        for i, existing in enumerate(self.entries):
            if existing.log_type == entry.log_type and existing.where == entry.where:
                self.entries[i] = existing + entry
                return
        self.entries.append(entry)

    def parse(self, relative_to: Optional[Path] = None) -> str:
        """
        The "Run Report": non-empty sections for fatal errors, warnings and information,
        in that order.

        :param relative_to: Render locations relative to this directory.
        """
        report = heading("Run Report", pad_above=0)
        for predicate, title in REPORT_SECTIONS:
            section = self._select(predicate)
            if not section:
                continue
            report += heading(title)
            report += "".join(entry.render(relative_to=relative_to) for entry in section)
        return report
