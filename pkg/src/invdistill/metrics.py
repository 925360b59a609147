"""Sample statistics and the fixed-column metrics CSV."""

from __future__ import annotations

import csv
import io
import os
import tempfile

import numpy as np


def sequence_entropy(seqs) -> np.ndarray:
    """Empirical token-frequency entropy (nats) of each sequence."""
    seqs = np.atleast_2d(np.asarray(seqs, dtype=np.int64))
    out = np.empty(seqs.shape[0])
    for i, row in enumerate(seqs):
        _, counts = np.unique(row, return_counts=True)
        p = counts / counts.sum()
        out[i] = float(-(p * np.log(p)).sum())
    return out


def mean_entropy(seqs) -> float:
    seqs = np.asarray(seqs)
    if seqs.size == 0:
        return float("nan")
    return float(sequence_entropy(seqs).mean())


def empirical_distribution(seqs, n_tokens: int) -> np.ndarray:
    seqs = np.atleast_2d(np.asarray(seqs, dtype=np.int64))
    weights = n_tokens ** np.arange(seqs.shape[1] - 1, -1, -1)
    counts = np.bincount(seqs @ weights, minlength=n_tokens ** seqs.shape[1])
    return counts / max(counts.sum(), 1)


def format_value(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


def atomic_write(path: str, data: str | bytes):
    """Write to a temporary file in the same directory, then rename over ``path``."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": "", "encoding": "utf-8"})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def render_csv(columns, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_value(row[c]) if c in row else "" for c in columns])
    return buf.getvalue()


class MetricsLog:
    """Accumulates rows with a fixed column order and rewrites the CSV atomically."""

    def __init__(self, path: str | None, columns):
        self.path = path
        self.columns = tuple(columns)
        self.rows = []

    def append(self, row: dict):
        unknown = set(row) - set(self.columns)
        if unknown:
            raise KeyError(f"unknown metric columns {sorted(unknown)}")
        self.rows.append(dict(row))

    def flush(self):
        if self.path is not None:
            atomic_write(self.path, render_csv(self.columns, self.rows))

    def load(self):
        """Re-read rows already on disk (used when resuming)."""
        if self.path is None or not os.path.exists(self.path):
            return
        with open(self.path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            self.rows = [{k: (int(v) if k == "step" else float(v)) for k, v in r.items() if v != ""}
                         for r in reader]
