"""Evaluation metrics and trace records."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

CSV_HEADER = (
    "event",
    "sim_time_s",
    "comm_units",
    "walk_id",
    "agent",
    "objective",
    "train_metric",
    "test_metric",
)


class MetricError(ValueError):
    pass


@dataclass
class TraceRecord:
    event: int
    sim_time_s: float
    comm_units: int
    walk_id: int
    agent: int
    objective: float
    train_metric: float
    test_metric: float
    consensus_gap: float = float("nan")
    # alternative evaluation points (agent average, single tokens, parameter error)
    extras: dict = field(default_factory=dict)


def nmse(z, features, labels):
    """||A z - y||^2 / ||y||^2."""
    y = np.asarray(labels, dtype=float)
    energy = float(y @ y)
    if energy == 0.0:
        raise MetricError("NMSE is undefined when the labels are all zero")
    r = np.asarray(features @ z).ravel() - y
    return float(r @ r) / energy


def parameter_nmse(z, x_true):
    x_true = np.asarray(x_true, dtype=float)
    energy = float(x_true @ x_true)
    if energy == 0.0:
        raise MetricError("parameter NMSE is undefined for a zero reference")
    d = np.asarray(z, dtype=float) - x_true
    return float(d @ d) / energy


def accuracy(z, features, labels):
    """Fraction of rows with sign(a.z) == label; a zero score counts as wrong."""
    y = np.asarray(labels, dtype=float)
    if y.size == 0:
        return float("nan")
    score = np.asarray(features @ z).ravel()
    return float(np.mean(np.sign(score) == y))


def consensus_gap(x, z):
    """max_i max_m ||x_i - z_m|| for ``x`` of shape (N, p) and ``z`` of shape (M, p)."""
    x = np.atleast_2d(x)
    z = np.atleast_2d(z)
    diff = x[:, None, :] - z[None, :, :]
    return float(np.sqrt((diff**2).sum(axis=-1)).max())


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_trace_csv(records, fh, extra=None):
    """Write ``records`` with the standard header.

    ``extra`` is an optional ordered mapping of leading columns (name -> value)
    repeated on every row, used for merged comparison tables.
    """
    extra = extra or {}
    w = csv.writer(fh, lineterminator="\n")
    w.writerow([*extra.keys(), *CSV_HEADER])
    for r in records:
        w.writerow([*extra.values(), *(_fmt(getattr(r, k)) for k in CSV_HEADER)])


def trace_to_csv(records):
    buf = io.StringIO()
    write_trace_csv(records, buf)
    return buf.getvalue()


def write_extras_csv(records, fh):
    """Consensus gap and the alternative metrics of each record, one row per probe."""
    keys = sorted({k for r in records for k in r.extras})
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["event", "consensus_gap", *keys])
    for r in records:
        w.writerow([r.event, _fmt(r.consensus_gap), *(_fmt(r.extras.get(k, float("nan"))) for k in keys)])


def read_trace_csv(fh):
    rows = list(csv.DictReader(fh))
    ints = {"event", "comm_units", "walk_id", "agent"}
    out = []
    for row in rows:
        kw = {k: (int(row[k]) if k in ints else float(row[k])) for k in CSV_HEADER}
        out.append(TraceRecord(**kw))
    return out


def first_reaching(records, target, higher_is_better=False):
    """First record whose test metric meets ``target``, or None."""
    for r in records:
        v = r.test_metric
        if (v >= target) if higher_is_better else (v <= target):
            return r
    return None
