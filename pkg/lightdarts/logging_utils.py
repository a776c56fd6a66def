"""
Logging setup and the per-epoch training audit trail.
"""

import json
import logging
import os
import sys
from typing import Optional

from pydantic import BaseModel

try:
    from pythonjsonlogger.json import JsonFormatter
except ImportError:  # python-json-logger < 3
    from pythonjsonlogger.jsonlogger import JsonFormatter

CONSOLE_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


def configure_logging(level: str = "INFO", log_file: Optional[str] = None) -> None:
    """
    Route package logs to stderr and, optionally, to a JSON-lines file.

    stdout is left to command results.
    """
    root = logging.getLogger("lightdarts")
    root.setLevel(level.upper())
    root.handlers.clear()
    root.propagate = False

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setFormatter(logging.Formatter(CONSOLE_FORMAT, datefmt=DATE_FORMAT))
    root.addHandler(console_handler)

    if log_file:
        log_dir = os.path.dirname(log_file)
        if log_dir:
            os.makedirs(log_dir, exist_ok=True)
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setFormatter(JsonFormatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
        root.addHandler(file_handler)


class RunLogger:
    """
    Structured per-epoch records for search and retraining.

    Each epoch becomes one JSON line in ``log_file`` plus a one-line summary
    on the package logger.
    """

    def __init__(self, log_file: str = "lightdarts_run.jsonl"):
        self.log_file = log_file
        self.log_dir = os.path.dirname(log_file) if os.path.dirname(log_file) else "."
        os.makedirs(self.log_dir, exist_ok=True)

        # unique name per instance so handlers of different runs never mix
        self.logger = logging.getLogger(f"lightdarts.run.{id(self)}")
        self.logger.setLevel(logging.INFO)
        self.logger.handlers.clear()
        self.logger.propagate = False

        file_handler = logging.FileHandler(self.log_file, encoding="utf-8")
        file_handler.setFormatter(JsonFormatter("%(message)s"))
        self.logger.addHandler(file_handler)
        self.summary = logging.getLogger("lightdarts.run")

    def log_epoch(self, phase: str, row: BaseModel, elapsed_ms: float) -> None:
        """Record one epoch of ``phase`` ("search" or "retrain")."""
        record = {"phase": phase, "elapsed_ms": round(elapsed_ms, 3)}
        record.update(row.model_dump(exclude_none=True))
        self.logger.info("epoch", extra=record)

        parts = [f"{k}={v:.4f}" for k, v in record.items() if isinstance(v, float)]
        self.summary.info(f"[{phase.upper()}] epoch {record.get('epoch')} | " + " | ".join(parts))

        for handler in self.logger.handlers:
            handler.flush()

    def close(self) -> None:
        for handler in self.logger.handlers:
            handler.close()
        self.logger.handlers.clear()

    def get_recent_logs(self, limit: int = 100) -> list[dict]:
        """
        Read the most recent epoch records.

        Returns:
            Parsed records, most recent first
        """
        logs: list[dict] = []
        if not os.path.exists(self.log_file):
            return logs
        with open(self.log_file, "r", encoding="utf-8") as f:
            lines = f.readlines()
        for line in reversed(lines[-limit:]):
            line = line.strip()
            if not line.startswith("{"):
                continue
            try:
                logs.append(json.loads(line))
            except json.JSONDecodeError:
                continue
        return logs
