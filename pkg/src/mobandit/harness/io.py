"""Trajectory sinks: CSV (RFC 4180) and JSON lines, numbers at 17 significant digits."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np


def columns(num_objectives: int) -> list[str]:
    M = range(num_objectives)
    return (
        ["step", "V"]
        + [f"r_{m}" for m in M]
        + [f"lambda_{m}" for m in M]
        + [f"cov_{m}" for m in M]
        + ["distortion", "min_grad_cos", "mu"]
    )


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    return format(x, ".17g")


def record_row(rec) -> list:
    return (
        [rec.step, rec.value]
        + list(rec.rewards)
        + list(rec.weights)
        + list(rec.covariances)
        + [rec.distortion, rec.min_grad_cos, rec.mu]
    )


class TrajectoryWriter:
    """Single-writer sink; use as a context manager."""

    def __init__(self, path, num_objectives: int, fmt_name: str = "csv", flush_every: int = 1):
        self.path = Path(path)
        self.cols = columns(num_objectives)
        self.format = fmt_name
        self.flush_every = max(1, int(flush_every))
        self._n = 0
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", encoding="utf-8", newline="")
        if fmt_name == "csv":
            self._csv = csv.writer(self._fh, lineterminator="\r\n")
            self._csv.writerow(self.cols)
        elif fmt_name != "jsonl":
            raise ValueError(f"unknown output format {fmt_name!r}")

    def write(self, rec) -> None:
        values = record_row(rec)
        if self.format == "csv":
            self._csv.writerow([fmt(v) for v in values])
        else:
            parts = []
            for key, v in zip(self.cols, values):
                text = fmt(v)
                parts.append(f"{json.dumps(key)}: {'null' if text == 'nan' else text}")
            self._fh.write("{" + ", ".join(parts) + "}\n")
        self._n += 1
        if self._n % self.flush_every == 0:
            self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    data = np.array([[float(v) for v in row] for row in rows[1:]], dtype=float).reshape(-1, len(header))
    return header, data


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def moving_average(x, window: int) -> np.ndarray:
    """Trailing moving average for display only (shorter windows at the start)."""
    x = np.asarray(x, dtype=float)
    if window <= 1 or x.size == 0:
        return x.copy()
    c = np.cumsum(np.insert(x, 0, 0.0))
    out = np.empty_like(x)
    for i in range(x.size):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out
