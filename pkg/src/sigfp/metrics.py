"""Error metrics and CSV emission."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import UsageError


def mee(theta_hat, theta_ref, per_time=False):
    """Mean Euclidean error over trajectories and times.

    Inputs are ``[J, n_times, ...]``; trailing axes are flattened into the
    vector whose Euclidean norm is taken.  With ``per_time`` the mean is
    taken over trajectories only.
    """
    a = np.asarray(theta_hat, dtype=np.float64)
    b = np.asarray(theta_ref, dtype=np.float64)
    if a.shape != b.shape:
        raise UsageError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim < 2:
        raise UsageError("expected [trajectories, times, ...]")
    diff = (a - b).reshape(a.shape[0], a.shape[1], -1)
    norms = np.sqrt(np.sum(diff * diff, axis=-1))
    return norms.mean(axis=0) if per_time else float(norms.mean())


def mae_curve(exact, approx):
    """Per-time mean absolute error; inputs ``[J, n_times, ...]``.

    For vector-valued embeddings the absolute value is the Euclidean norm.
    """
    return mee(approx, exact, per_time=True)


def w2_1d(samples_a, samples_b):
    """Exact W2 between two equal-size 1-D empirical measures."""
    a = np.sort(np.asarray(samples_a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(samples_b, dtype=np.float64).ravel())
    if a.size != b.size:
        raise UsageError(f"w2_1d needs equal sample counts, got {a.size} and {b.size}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


@dataclass(frozen=True)
class MetricRow:
    run_id: str
    seed: int
    stage: int
    metric: str
    time_index: int | None
    value: float

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise UsageError(f"non-finite metric {self.metric}={self.value}")

    def as_list(self):
        t = "all" if self.time_index is None else self.time_index
        return [self.run_id, self.seed, self.stage, self.metric, t, fmt(self.value)]


METRIC_ROW_HEADER = ["run_id", "seed", "stage", "metric", "time_index", "value"]


def fmt(v):
    """Shortest round-trip float repr; keeps CSVs byte-stable."""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
