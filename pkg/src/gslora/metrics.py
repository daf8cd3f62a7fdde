"""Per-task accuracy partitions, H-Mean and the metrics CSV log."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
import io
import logging
from typing import Optional

import numpy as np

from .data import Dataset
from .model import predict

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("task", "acc_r", "acc_f", "acc_o", "drop", "h_mean", "zero_group_ratio", "tunable_ratio")


@dataclass
class MetricsRecord:
    task: int
    acc_r: float
    acc_f: float
    acc_o: Optional[float]  # None when no earlier task has forgotten anything
    drop: float
    h_mean: float
    zero_group_ratio: float
    tunable_ratio: float

    def as_row(self) -> list:
        return [_fmt(getattr(self, c)) for c in CSV_COLUMNS]

    def to_dict(self) -> dict:
        return asdict(self)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def accuracy(model, dataset: Dataset, class_filter=None, lora=None) -> float:
    """Percentage of argmax-correct rows among samples whose label is in ``class_filter``."""
    data = dataset if class_filter is None else dataset.filter_classes(class_filter)
    if len(data) == 0:
        raise ValueError(f"no samples for classes {sorted(class_filter) if class_filter is not None else 'all'}")
    return 100.0 * float(np.mean(predict(model, data.x, lora) == data.y))


def h_mean(acc_r: float, drop: float) -> float:
    """Harmonic mean of retained accuracy and forgetting drop.

    A negative drop means forgetting made the forget set *more* accurate; it is
    clamped to zero (and logged) rather than producing a negative score.
    """
    if drop < 0:
        logger.warning("negative drop %.4f clamped to 0", drop)
        drop = 0.0
    if acc_r < 0:
        raise ValueError(f"acc_r must be >= 0, got {acc_r}")
    if acc_r + drop <= 0:
        return 0.0
    return 2.0 * acc_r * drop / (acc_r + drop)


def make_record(task: int, acc_r: float, acc_f: float, acc_f_before: float, acc_o: Optional[float],
                zero_group_ratio: float, tunable_ratio: float) -> MetricsRecord:
    drop = acc_f_before - acc_f
    return MetricsRecord(
        task=task,
        acc_r=acc_r,
        acc_f=acc_f,
        acc_o=acc_o,
        drop=drop,
        h_mean=h_mean(acc_r, drop),
        zero_group_ratio=zero_group_ratio,
        tunable_ratio=tunable_ratio,
    )


def write_csv(records, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow(r.as_row())
    text = buf.getvalue()
    if path is not None:
        from .io import atomic_write_text

        atomic_write_text(path, text)
    return text


def read_csv(source) -> list:
    """Parse a metrics log from a path or from CSV text."""
    if isinstance(source, str) and "\n" in source:
        text = source
    else:
        with open(source, newline="") as fh:
            text = fh.read()
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if tuple(header or ()) != CSV_COLUMNS:
        raise ValueError(f"unexpected metrics header {header}")
    out = []
    for row in reader:
        if not row:
            continue
        vals = dict(zip(CSV_COLUMNS, row))
        out.append(
            MetricsRecord(
                task=int(vals["task"]),
                acc_o=None if vals["acc_o"] == "" else float(vals["acc_o"]),
                **{f.name: float(vals[f.name]) for f in fields(MetricsRecord) if f.name not in ("task", "acc_o")},
            )
        )
    return out


def format_table(records) -> str:
    """Aligned text table with one row per task, blank Acc_o at task 1."""
    headers = ["Task", "Acc_r", "Acc_f", "Acc_o", "Drop", "H-Mean", "ZeroGroup", "Tunable%"]
    rows = []
    for r in records:
        rows.append([
            str(r.task),
            f"{r.acc_r:.2f}",
            f"{r.acc_f:.2f}",
            "-" if r.acc_o is None else f"{r.acc_o:.2f}",
            f"{r.drop:.2f}",
            f"{r.h_mean:.2f}",
            f"{r.zero_group_ratio:.2f}",
            f"{100 * r.tunable_ratio:.2f}",
        ])
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h) for i, h in enumerate(headers)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(c.rjust(w) for c, w in zip(row, widths)))
    return "\n".join(lines) + "\n"
