"""Append-only CSV + JSON-lines metric files."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

__all__ = ["MetricsSink", "read_csv_column", "to_jsonable"]


def to_jsonable(value):
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [to_jsonable(v) for v in value.tolist()]
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if math.isfinite(v) else None
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


class MetricsSink:
    """Write one record per call to ``<stem>.csv`` and ``<stem>.jsonl``.

    The CSV header is fixed by ``columns`` and written once when the file is
    created; later ``write`` calls only append. JSON lines carry the full
    record, extra keys included. Both files are flushed after each row unless
    ``flush_every_row`` is off.
    """

    def __init__(self, directory, stem: str, columns: Sequence[str], flush_every_row: bool = True):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.csv_path = self.dir / f"{stem}.csv"
        self.jsonl_path = self.dir / f"{stem}.jsonl"
        self.columns = list(columns)
        self.flush_every_row = flush_every_row
        fresh = not self.csv_path.exists() or self.csv_path.stat().st_size == 0
        self._csv_file = open(self.csv_path, "a", newline="")
        self._jsonl_file = open(self.jsonl_path, "a")
        self._writer = csv.DictWriter(self._csv_file, fieldnames=self.columns, extrasaction="ignore")
        if fresh:
            self._writer.writeheader()
        self.rows = 0

    def write(self, record: dict) -> None:
        self._writer.writerow({k: _fmt(record.get(k, "")) for k in self.columns})
        self._jsonl_file.write(json.dumps(to_jsonable(record), sort_keys=True) + "\n")
        self.rows += 1
        if self.flush_every_row:
            self.flush()

    def write_all(self, records: Iterable[dict]) -> None:
        for r in records:
            self.write(r)

    def flush(self):
        self._csv_file.flush()
        self._jsonl_file.flush()

    def close(self):
        self._csv_file.close()
        self._jsonl_file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_csv_column(path, column: str, cast=float) -> list:
    with open(path, newline="") as f:
        return [cast(row[column]) for row in csv.DictReader(f)]


def read_csv(path) -> list:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def sample_std(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    return float(values.std(ddof=1)) if values.size > 1 else 0.0


def maybe_mean(values) -> Optional[float]:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None
