"""Append-only, newline-delimited metrics log with single-writer locking.

One self-describing JSON object per line: {"schema": 1, "kind": ...,
"run_id": ..., "seq": ..., "ts": ...} plus the record payload.  A run id
may only be written once per log file; re-running with the same id is
refused rather than overwritten.  In deterministic mode (the default)
ts is null so identical runs produce bit-identical logs.
"""

from __future__ import annotations

import json
import os
import time
from pathlib import Path
from typing import Iterable, Optional

SCHEMA_VERSION = 1


class MetricsLogError(RuntimeError):
    pass


class LogLock:
    """Exclusive-create lock file guarding one metrics log."""

    def __init__(self, path: Path):
        self.path = Path(str(path) + ".lock")
        self._fd = None

    def __enter__(self):
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise MetricsLogError(
                f"metrics log is locked by another writer ({self.path}); "
                "remove the lock file if that process is dead") from None
        os.write(self._fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        os.close(self._fd)
        self.path.unlink(missing_ok=True)
        return False


class MetricsLog:
    """Writer handle for one run id appending to a JSONL file."""

    def __init__(self, path: str | Path, run_id: str, deterministic: bool = True):
        self.path = Path(path)
        self.run_id = run_id
        self.deterministic = deterministic
        self._seq = 0
        if self.path.exists() and any(r.get("run_id") == run_id for r in read_metrics(self.path)):
            raise MetricsLogError(f"run id {run_id!r} already present in {self.path}; refusing to append")
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, kind: str, payload: dict) -> dict:
        record = {
            "schema": SCHEMA_VERSION,
            "kind": kind,
            "run_id": self.run_id,
            "seq": self._seq,
            "ts": None if self.deterministic else time.time(),
        }
        record.update(payload)
        with LogLock(self.path):
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, sort_keys=True, allow_nan=True) + "\n")
        self._seq += 1
        return record


def read_metrics(path: str | Path, kind: Optional[str] = None,
                 run_id: Optional[str] = None) -> list[dict]:
    out = []
    p = Path(path)
    if not p.exists():
        return out
    with open(p, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if kind is not None and rec.get("kind") != kind:
                continue
            if run_id is not None and rec.get("run_id") != run_id:
                continue
            out.append(rec)
    return out
