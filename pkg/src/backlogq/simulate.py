"""Multi-server FCFS queue simulation with a service-rate cap.

The system has m identical parallel servers sharing an aggregate service
budget b_eff: an admitted job occupies one server for its raw service draw
scaled by m / b_eff, so total throughput capacity is b_eff jobs per raw mean
service time. The waiting room is unbounded; b_eff constrains rate, never
occupancy.

Because discipline is FCFS and servers are identical, the event loop reduces
to an earliest-free-server recursion over jobs in arrival order: pop the
smallest server free time, start at max(arrival, free time), push back the
departure. This is equivalent to processing departures before arrivals at
equal timestamps (a freed server is immediately available to a coincident
arrival) and assigns the lowest-indexed server on ties. The backlog is then
read off the job intervals at bin boundaries.
"""

from __future__ import annotations

import heapq
import os
from dataclasses import dataclass

import numpy as np

from .fitdist import DistFit, draw_values
from .seeds import derive_seed
from .trajectory import BacklogTrajectory, Pmf, SampleSet

DEFAULT_MIN_REPS = 20
DEFAULT_MAX_REPS = 500
DEFAULT_CONV_TOL = 0.005


@dataclass(frozen=True)
class QueueParams:
    """m parallel agents under effective aggregate service parameter b_eff.

    b_norm, when filled, is the interpretable throughput in jobs/day
    (b_eff divided by the mean raw service draw).
    """

    m: int
    b_eff: float
    b_norm: float | None = None

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if not self.b_eff > 0:
            raise ValueError("b_eff must be positive")


@dataclass(frozen=True)
class SimConfig:
    horizon: float
    n0: int = 0
    bin_width: float = 1.0
    min_reps: int = DEFAULT_MIN_REPS
    max_reps: int = DEFAULT_MAX_REPS
    conv_tol: float = DEFAULT_CONV_TOL
    debug_dir: str | None = None

    def __post_init__(self) -> None:
        if self.horizon < self.bin_width:
            raise ValueError("horizon must be at least one bin wide")
        if self.bin_width <= 0 or self.n0 < 0:
            raise ValueError("bin_width must be positive and n0 non-negative")
        if self.min_reps < 1 or self.max_reps < self.min_reps:
            raise ValueError("need max_reps >= min_reps >= 1")
        if self.conv_tol <= 0:
            raise ValueError("conv_tol must be positive")


@dataclass(frozen=True)
class SampleSource:
    """Draws inter-arrival or service durations, by bootstrap or from a fit."""

    kind: str  # "bootstrap" | "parametric"
    seed: int
    samples: SampleSet | None = None
    fit: DistFit | None = None

    def __post_init__(self) -> None:
        if self.kind == "bootstrap":
            if self.samples is None or len(self.samples) == 0:
                raise ValueError("bootstrap source needs a non-empty sample set")
        elif self.kind == "parametric":
            if self.fit is None:
                raise ValueError("parametric source needs a fitted distribution")
        else:
            raise ValueError(f"unknown source kind {self.kind!r}")

    @staticmethod
    def bootstrap(samples: SampleSet, seed: int) -> "SampleSource":
        return SampleSource("bootstrap", seed, samples=samples)

    @staticmethod
    def parametric(fit: DistFit, seed: int) -> "SampleSource":
        return SampleSource("parametric", seed, fit=fit)

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if n == 0:
            return np.zeros(0)
        if self.kind == "bootstrap":
            return rng.choice(self.samples.values, size=n, replace=True)
        return draw_values(self.fit, rng, n)

    def mean_hint(self) -> float:
        """Rough mean duration, used only to size draw batches."""
        if self.kind == "bootstrap":
            return float(self.samples.values.mean())
        mean = self.fit.mean()
        return mean if np.isfinite(mean) and mean > 0 else 1.0


def _draw_arrivals(src: SampleSource, rng: np.random.Generator, horizon: float) -> np.ndarray:
    """Cumulative arrival times strictly inside [0, horizon)."""
    guess = max(64, int(horizon / max(src.mean_hint(), 1e-12) * 1.25) + 64)
    gaps = src.draw(rng, guess)
    arrivals = np.cumsum(gaps)
    while arrivals[-1] < horizon:
        gaps = src.draw(rng, guess)
        arrivals = np.concatenate([arrivals, arrivals[-1] + np.cumsum(gaps)])
    return arrivals[arrivals < horizon]


def _serve_single(arrivals: np.ndarray, durations: np.ndarray) -> np.ndarray:
    """Vectorized single-server FCFS departure times.

    depart_i = cum_i + max_{j<=i}(arr_j - cum_{j-1}) with cum = cumsum(durations).
    """
    cum = np.cumsum(durations)
    shifted = np.concatenate([[0.0], cum[:-1]])
    return cum + np.maximum.accumulate(arrivals - shifted)


def _serve_multi(arrivals: np.ndarray, durations: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Earliest-free-server FCFS assignment; returns (starts, departs)."""
    free = [(0.0, s) for s in range(m)]
    starts = np.empty(len(arrivals))
    departs = np.empty(len(arrivals))
    push, pop = heapq.heappush, heapq.heappop
    for i, (arr, dur) in enumerate(zip(arrivals.tolist(), durations.tolist())):
        free_t, server = pop(free)
        start = arr if arr > free_t else free_t
        end = start + dur
        starts[i] = start
        departs[i] = end
        push(free, (end, server))
    return starts, departs


def run_jobs(
    ia: SampleSource,
    st: SampleSource,
    params: QueueParams,
    cfg: SimConfig,
    rep_seed: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Simulate one replication; returns (arrivals, starts, departs) per job.

    The n0 initial jobs are enqueued at t=0 with fresh service draws, ahead
    of the first sampled arrival. Raw service draws are scaled by m / b_eff.
    """
    rng_ia = np.random.default_rng(derive_seed(ia.seed, "ia", rep_seed))
    rng_st = np.random.default_rng(derive_seed(st.seed, "st", rep_seed))

    sampled = _draw_arrivals(ia, rng_ia, cfg.horizon)
    arrivals = np.concatenate([np.zeros(cfg.n0), sampled])
    raw_st = st.draw(rng_st, len(arrivals))
    durations = raw_st * (params.m / params.b_eff)

    if len(arrivals) == 0:
        empty = np.zeros(0)
        return empty, empty.copy(), empty.copy()
    if params.m == 1:
        departs = _serve_single(arrivals, durations)
        # start = max(arrival, previous departure); subtracting durations from
        # the cumsum form instead would break exact back-to-back adjacency
        starts = np.maximum(arrivals, np.concatenate([[-np.inf], departs[:-1]]))
    else:
        starts, departs = _serve_multi(arrivals, durations, params.m)
    return arrivals, starts, departs


def _backlog_at(arrivals: np.ndarray, departs: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Jobs in system at each time t: arrived at or before t, departing after t."""
    arr_sorted = np.sort(arrivals)
    dep_sorted = np.sort(departs)
    return np.searchsorted(arr_sorted, times, side="right") - np.searchsorted(
        dep_sorted, times, side="right"
    )


def _boundaries(cfg: SimConfig) -> np.ndarray:
    num_bins = int(np.ceil(cfg.horizon / cfg.bin_width))
    return cfg.bin_width * np.arange(1, num_bins + 1)


def simulate_once(
    ia: SampleSource,
    st: SampleSource,
    params: QueueParams,
    cfg: SimConfig,
    rep_seed: int,
) -> BacklogTrajectory:
    """One replication, sampled at bin boundaries like an observed trajectory."""
    arrivals, _, departs = run_jobs(ia, st, params, cfg, rep_seed)
    counts = _backlog_at(arrivals, departs, _boundaries(cfg))
    return BacklogTrajectory(cfg.bin_width, 0.0, counts)


def estimate_qld(
    ia: SampleSource,
    st: SampleSource,
    params: QueueParams,
    cfg: SimConfig,
) -> Pmf:
    """Replicate until the pooled queue-length pmf converges.

    Replication r uses seeds derived from (source seed, r). After min_reps,
    the run stops once the L1 distance between the pooled pmf now and the
    pooled pmf at replication ceil(r/2) drops below conv_tol.
    """
    boundaries = _boundaries(cfg)
    pooled: np.ndarray = np.zeros(1, dtype=np.int64)
    snapshots: list[np.ndarray] = []
    for rep in range(1, cfg.max_reps + 1):
        arrivals, _, departs = run_jobs(ia, st, params, cfg, rep)
        counts = _backlog_at(arrivals, departs, boundaries)
        fresh = np.bincount(counts)
        if len(fresh) > len(pooled):
            pooled = np.concatenate([pooled, np.zeros(len(fresh) - len(pooled), dtype=np.int64)])
        pooled[: len(fresh)] += fresh
        snapshots.append(pooled.copy())
        if cfg.debug_dir is not None:
            _dump_debug_trajectory(cfg, rep, counts)
        if rep >= cfg.min_reps:
            anchor = snapshots[int(np.ceil(rep / 2)) - 1]
            if _l1_between(pooled, anchor) < cfg.conv_tol:
                break
    return Pmf(pooled / pooled.sum())


def _l1_between(now: np.ndarray, then: np.ndarray) -> float:
    a = now / now.sum()
    b = np.zeros(len(a))
    b[: len(then)] = then / then.sum()
    return float(np.abs(a - b).sum())


def _dump_debug_trajectory(cfg: SimConfig, rep: int, counts: np.ndarray) -> None:
    os.makedirs(cfg.debug_dir, exist_ok=True)
    path = os.path.join(cfg.debug_dir, f"rep{rep:04d}.csv")
    np.savetxt(path, np.column_stack([np.arange(len(counts)), counts]), fmt="%d", header="bin,count", comments="", delimiter=",")


def bootstrap_qld(
    ia: SampleSet,
    st: SampleSet,
    params: QueueParams,
    cfg: SimConfig,
    seed: int = 0,
) -> Pmf:
    """Queue-length pmf with both durations resampled from empirical data."""
    return estimate_qld(
        SampleSource.bootstrap(ia, derive_seed(seed, "boot-ia")),
        SampleSource.bootstrap(st, derive_seed(seed, "boot-st")),
        params,
        cfg,
    )
