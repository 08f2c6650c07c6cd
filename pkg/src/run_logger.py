"""
JSONL training log for pretraining and adapter runs
"""
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Union


class TrainingLogger:
    """Logger that appends one JSON record per training step to a file."""

    def __init__(self, session_id: str, component: str = "trainer", path: Optional[Union[str, Path]] = None,
                 tags: Sequence[str] = ()):
        self.session_id = session_id
        self.component = component
        self.path = Path(path) if path is not None else None
        self.tags = list(tags)
        self._error_count = 0
        self._warning_count = 0
        self._records_written = 0
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def get_error_count(self) -> int:
        """Get current error count."""
        return self._error_count

    def get_warning_count(self) -> int:
        """Get current warning count."""
        return self._warning_count

    @property
    def records_written(self) -> int:
        return self._records_written

    def log_step(self, step: int, values: Dict[str, float], **extra: Any) -> Dict[str, Any]:
        """Write {session_id, component, step, <values>, tags} as one line."""
        record: Dict[str, Any] = {"session_id": self.session_id, "component": self.component, "step": step}
        for key, value in values.items():
            value = float(value)
            # JSON has no NaN; a diverged step is written as null
            record[key] = value if math.isfinite(value) else None
        record.update(extra)
        record["tags"] = self.tags
        self._write(record)
        return record

    def _write(self, record: Dict[str, Any]) -> None:
        if self.path is None:
            return
        try:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record) + "\n")
            self._records_written += 1
        except OSError as e:
            # Fallback to standard logging if the log file cannot be written
            self._error_count += 1
            logging.getLogger(__name__).error(f"Training log write failed for {self.path}: {e}")

    def warning(self, message: str) -> None:
        self._warning_count += 1
        logging.getLogger(__name__).warning(f"[{self.component}] {message}")

    def error(self, message: str) -> None:
        self._error_count += 1
        logging.getLogger(__name__).error(f"[{self.component}] {message}")


def read_log(path: Union[str, Path]) -> list:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
