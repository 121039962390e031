"""Per-iteration metrics CSV files."""

import csv
import os
from dataclasses import dataclass

import numpy as np

from dkdm.errors import StateError

HEADER = "iter,loss_simple,loss_vlb,loss,teacher_fwd,wall_ms,metric_name,metric_value"
EVAL_HEADER = "iter,metric_name,metric_value"


@dataclass
class MetricsRecord:
    iter: int
    loss_simple: float
    loss_vlb: float = None
    loss: float = None
    teacher_fwd: int = 0
    wall_ms: float = None
    metric_name: str = None
    metric_value: float = None

    def to_row(self):
        cells = [self.iter, self.loss_simple, self.loss_vlb, self.loss, self.teacher_fwd,
                 self.wall_ms, self.metric_name, self.metric_value]
        return ",".join(_cell(c) for c in cells)


def _cell(v):
    # absent values stay empty rather than 0; floats use the shortest exact repr
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def _last_iter(path):
    with open(path, "rb") as fh:
        fh.seek(0, os.SEEK_END)
        size = fh.tell()
        fh.seek(max(0, size - 4096))
        tail = fh.read().decode()
    lines = [ln for ln in tail.splitlines() if ln.strip()]
    if not lines or lines[-1].startswith("iter,"):
        return None
    return int(lines[-1].split(",", 1)[0])


class MetricsWriter:
    """Appends rows to a CSV with a fixed header, enforcing increasing iterations."""

    def __init__(self, path, header=HEADER):
        self.path = os.fspath(path)
        self.header = header
        self.last = _last_iter(self.path) if os.path.exists(self.path) else None

    def append(self, record):
        row = record.to_row() if hasattr(record, "to_row") else ",".join(_cell(c) for c in record)
        it = int(row.split(",", 1)[0])
        if self.last is not None and it <= self.last:
            raise StateError(f"{self.path}: iteration {it} is not after {self.last}")
        new = not os.path.exists(self.path)
        with open(self.path, "a") as fh:
            if new:
                fh.write(self.header + "\n")
            fh.write(row + "\n")
        self.last = it


def append_metrics(record, path):
    """Append one row to ``path``, writing the header first when the file is new."""
    MetricsWriter(path).append(record)


def truncate_after(path, iteration):
    """Drop rows past ``iteration`` (used when resuming from an older checkpoint)."""
    if not os.path.exists(path):
        return
    with open(path) as fh:
        lines = fh.read().splitlines()
    keep = [lines[0]] + [ln for ln in lines[1:] if ln and int(ln.split(",", 1)[0]) <= iteration]
    with open(path, "w") as fh:
        fh.write("\n".join(keep) + "\n")


def read_metrics(path):
    """Rows of a metrics CSV as dicts of strings."""
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
