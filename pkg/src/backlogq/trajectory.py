"""Discrete-time backlog reconstruction and queue-length statistics.

The backlog N is sampled at bin boundaries t0 + k*bin_width for k = 1..T,
where T = ceil(horizon / bin_width). A record contributes to the count at
boundary t when open_ts <= t < resolve_ts (interval stabbing), which keeps
the count non-negative by construction. The boundary at t0 itself is not
sampled: nothing opened strictly before the horizon start can be in the log,
so that sample would always be near zero and would only dilute the
distribution.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .eventlog import EventLog

PMF_TOL = 1e-9


class DegenerateWindowError(ValueError):
    """Raised when a window holds too few events to yield samples."""


@dataclass(frozen=True)
class BacklogTrajectory:
    """Backlog sampled at regular bin boundaries.

    counts[k] is the backlog at time t0 + (k+1)*bin_width; the array covers
    boundaries 1..T of the horizon.
    """

    bin_width: float
    t0: float
    counts: np.ndarray

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts, dtype=np.int64)
        object.__setattr__(self, "counts", counts)
        if self.bin_width <= 0:
            raise ValueError("bin_width must be positive")
        if counts.ndim != 1 or len(counts) == 0:
            raise ValueError("counts must be a non-empty 1-d array")
        if (counts < 0).any():
            raise ValueError("backlog counts must be non-negative")

    @property
    def num_bins(self) -> int:
        return len(self.counts)

    def backlog_at_boundary(self, k: int) -> int:
        """Backlog at boundary index k (0 = horizon start, before any sample)."""
        if k <= 0:
            return 0
        return int(self.counts[k - 1])


@dataclass(frozen=True)
class Pmf:
    """Probability mass function over queue lengths 0..n_max (dense array)."""

    p: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.p, dtype=float)
        object.__setattr__(self, "p", p)
        if p.ndim != 1 or len(p) == 0:
            raise ValueError("pmf must be a non-empty 1-d array")
        if (p < 0).any():
            raise ValueError("pmf has negative mass")
        if abs(p.sum() - 1.0) > PMF_TOL:
            raise ValueError(f"pmf sums to {p.sum()!r}, not 1")

    @property
    def n_max(self) -> int:
        return len(self.p) - 1

    @staticmethod
    def from_weights(weights: Sequence[float] | np.ndarray) -> "Pmf":
        w = np.asarray(weights, dtype=float)
        total = w.sum()
        if total <= 0:
            raise ValueError("cannot normalize non-positive weights")
        return Pmf(w / total)

    @staticmethod
    def point_mass(n: int, n_max: int | None = None) -> "Pmf":
        size = (n if n_max is None else n_max) + 1
        p = np.zeros(size)
        p[n] = 1.0
        return Pmf(p)

    def to_dict(self) -> dict[int, float]:
        """Sparse {n: p} representation (zero entries omitted)."""
        return {int(n): float(self.p[n]) for n in np.nonzero(self.p)[0]}

    @staticmethod
    def from_dict(d: dict) -> "Pmf":
        items = {int(k): float(v) for k, v in d.items()}
        p = np.zeros(max(items) + 1)
        for n, mass in items.items():
            p[n] = mass
        return Pmf(p)


def unify_support(p: Pmf, q: Pmf) -> tuple[np.ndarray, np.ndarray]:
    """Pad both mass arrays with zeros to the union support [0, max(n_max)]."""
    size = max(len(p.p), len(q.p))
    a = np.zeros(size)
    b = np.zeros(size)
    a[: len(p.p)] = p.p
    b[: len(q.p)] = q.p
    return a, b


@dataclass(frozen=True)
class SampleSet:
    """Positive durations (seconds) observed in one time window."""

    values: np.ndarray
    kind: str  # "inter_arrival" | "service_time"
    window: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        if self.kind not in ("inter_arrival", "service_time"):
            raise ValueError(f"unknown sample kind {self.kind!r}")
        if len(values) and values.min() <= 0:
            raise ValueError("sample values must be positive")
        if not self.window[0] < self.window[1]:
            raise ValueError("sample window is empty")

    def __len__(self) -> int:
        return len(self.values)


def build_trajectory(log: EventLog, bin_width: float) -> BacklogTrajectory:
    """Count open-but-unresolved records at each bin boundary of the horizon.

    The log must be cleansed: every record resolved. An empty log yields an
    all-zero trajectory over the horizon (a single zero bin if the horizon
    itself is empty).
    """
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    unresolved = sum(1 for r in log.records if r.resolve_ts is None)
    if unresolved:
        raise ValueError(f"log has {unresolved} unresolved records; cleanse first")

    t0, t_end = log.horizon
    span = t_end - t0
    num_bins = max(1, int(np.ceil(span / bin_width))) if span > 0 else 1
    if not log.records:
        return BacklogTrajectory(bin_width, float(t0), np.zeros(num_bins, dtype=np.int64))

    boundaries = t0 + bin_width * np.arange(1, num_bins + 1)
    opens = np.sort([r.open_ts for r in log.records])
    resolves = np.sort([r.resolve_ts for r in log.records])
    counts = np.searchsorted(opens, boundaries, side="right") - np.searchsorted(
        resolves, boundaries, side="right"
    )
    return BacklogTrajectory(bin_width, float(t0), counts)


def empirical_qld(traj: BacklogTrajectory) -> Pmf:
    """Fraction of bin boundaries spent at each backlog level."""
    counts = np.bincount(traj.counts)
    return Pmf(counts / traj.num_bins)


def interarrival_samples(log: EventLog, window: tuple[float, float]) -> SampleSet:
    """Gaps between successive opening times within the window.

    Zero gaps (simultaneous opens at second resolution) are floored to one
    second so positive-support families stay fittable.
    """
    lo, hi = window
    opens = np.sort([r.open_ts for r in log.records if lo <= r.open_ts < hi])
    if len(opens) < 2:
        raise DegenerateWindowError(
            f"window [{lo}, {hi}) has {len(opens)} opens; need at least 2 for inter-arrivals"
        )
    gaps = np.diff(opens).astype(float)
    gaps[gaps <= 0] = 1.0
    return SampleSet(gaps, "inter_arrival", (float(lo), float(hi)))


def service_samples(log: EventLog, window: tuple[float, float]) -> SampleSet:
    """Resolution durations of records opened within the window.

    Assignment is by opening time, so a window's service set reflects the
    work generated in that regime. Durations of zero are floored to one
    second.
    """
    lo, hi = window
    durations = np.array(
        [
            float(r.resolve_ts - r.open_ts)
            for r in log.records
            if lo <= r.open_ts < hi and r.resolve_ts is not None
        ]
    )
    if len(durations) == 0:
        raise DegenerateWindowError(f"window [{lo}, {hi}) has no resolved records")
    durations[durations <= 0] = 1.0
    return SampleSet(durations, "service_time", (float(lo), float(hi)))


def export_trajectory_csv(traj: BacklogTrajectory, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin", "count"])
        for k, n in enumerate(traj.counts):
            writer.writerow([k, int(n)])


def export_qld_csv(pmf: Pmf, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n", "p"])
        for n, mass in enumerate(pmf.p):
            writer.writerow([n, repr(float(mass))])
