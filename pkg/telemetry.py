# =============================================================================
# TELEMETRY - telemetry.py
# =============================================================================
# Line-delimited JSON records (one object per line) shared by the mapper and
# the pipeline stages. Writes are serialized with a lock so stage threads can
# share one file.
#
# Usage:
#   telemetry = TelemetryWriter(path)
#   telemetry.write({"stage": "mapping", "step": 10, "rgb": 0.01})
# =============================================================================

from __future__ import annotations

import json
import threading
import time
from pathlib import Path

import numpy as np


def json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


class TelemetryWriter:
    """Append-only JSON-lines sink; path None keeps records in memory only."""

    def __init__(self, path=None, keep=1000):
        self.path = Path(path) if path is not None else None
        self.keep = keep
        self.records = []
        self.high_water = {}
        self._lock = threading.Lock()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record):
        record = {"time": round(time.time(), 6), **record}
        line = json.dumps(record, default=json_default, sort_keys=True)
        with self._lock:
            self.records.append(record)
            if len(self.records) > self.keep:
                del self.records[: len(self.records) - self.keep]
            if self.path is not None:
                with self.path.open("a") as fh:
                    fh.write(line + "\n")

    def observe_queue(self, name, size):
        """Track the largest buffered count seen on a channel."""
        with self._lock:
            self.high_water[name] = max(self.high_water.get(name, 0), int(size))


def read_telemetry(path, limit=None):
    """Parse a telemetry file; `limit` keeps the last n records."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if limit is not None:
        lines = lines[-limit:] if limit > 0 else []
    return [json.loads(ln) for ln in lines]
