"""Quasi-stationary partitioning of the horizon.

Candidate cut points live on the trajectory's bin grid (weekly by default,
optionally strided coarser). A window is scored against a mixture component
by the KL divergence between the window's observed queue-length distribution
and the component's pmf, weighted by the window length so that every
misassigned bin carries a constant log-likelihood penalty instead of being
diluted by window size. The partition into S windows minimizing the summed
score is found by exact dynamic programming over the cut grid.

Each component is assigned to at most one window by default (one-to-one).
Reuse sounds harmless but is degenerate: nothing then anchors a component
to the stretch of data that produced it, and cut placement collapses to
whichever component happens to be the easiest target.

The provisional (m, b_eff) of each chosen window is estimated afterwards by
a coarse grid search minimizing the KL divergence between the window's
bootstrap-simulated queue-length pmf and its assigned component. Simulation
plays no part in ranking partitions: resampling inter-arrival and service
durations i.i.d. erases exactly the temporal structure that distinguishes a
window with a few contaminating bins from a clean one, so a simulated score
cannot localize cuts, while the observed score pins them to the bin.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .eventlog import EventLog
from .mixtures import GmmModel, component_pmf, component_span, kl_divergence
from .seeds import derive_seed
from .simulate import QueueParams, SimConfig, bootstrap_qld
from .trajectory import (
    BacklogTrajectory,
    DegenerateWindowError,
    Pmf,
    SampleSet,
    interarrival_samples,
    service_samples,
)

LOG = logging.getLogger(__name__)

DEFAULT_M_VALUES = (1, 2, 4, 8, 16, 32, 64, 96, 128, 192, 256, 384, 512)
DEFAULT_B_MULTIPLIERS = tuple(float(v) for v in np.geomspace(0.1, 10.0, 12))
SEGMENTATION_MIN_REPS = 10
SEGMENTATION_CONV_TOL = 0.01


class SegmentationError(ValueError):
    pass


@dataclass(frozen=True)
class CoarseGrid:
    """Search grid for provisional (m, b_eff) plus the cut-grid geometry.

    b_values are relative multipliers of one shared anchor, the horizon's
    natural service scale (opened jobs x mean raw service draw / duration),
    unless b_absolute is set, in which case they are used as-is. The anchor
    must be shared by every window: an anchor computed per window would
    cancel the window's own arrival intensity out of the simulated load.
    """

    m_values: tuple[int, ...] = DEFAULT_M_VALUES
    b_values: tuple[float, ...] = DEFAULT_B_MULTIPLIERS
    b_absolute: bool = False
    min_segment_len: int = 8
    cut_stride: int = 1

    def __post_init__(self) -> None:
        if not self.m_values or not self.b_values:
            raise SegmentationError("grid value lists must be non-empty")
        if list(self.m_values) != sorted(set(self.m_values)) or min(self.m_values) < 1:
            raise SegmentationError("m_values must be ascending positive integers")
        if list(self.b_values) != sorted(set(self.b_values)) or min(self.b_values) <= 0:
            raise SegmentationError("b_values must be ascending and positive")
        if self.min_segment_len < 1 or self.cut_stride < 1:
            raise SegmentationError("min_segment_len and cut_stride must be >= 1")

    def resolve(self, anchor: float) -> "CoarseGrid":
        """Absolute copy of this grid, b_values scaled by the shared anchor."""
        if self.b_absolute:
            return self
        if anchor <= 0:
            raise SegmentationError("grid anchor must be positive")
        return CoarseGrid(
            m_values=self.m_values,
            b_values=tuple(mult * anchor for mult in self.b_values),
            b_absolute=True,
            min_segment_len=self.min_segment_len,
            cut_stride=self.cut_stride,
        )


def service_scale(log: EventLog, horizon: tuple[float, float]) -> float:
    """Natural aggregate service scale of a horizon: opened jobs times mean
    resolution duration over the horizon length. Anchors relative b grids."""
    lo, hi = horizon
    durations = [
        r.resolve_ts - r.open_ts
        for r in log.records
        if lo <= r.open_ts < hi and r.resolve_ts is not None
    ]
    if not durations:
        raise SegmentationError("horizon has no resolved records to anchor the b grid")
    mean_st = max(float(np.mean(durations)), 1.0)
    return len(durations) * mean_st / (hi - lo)


@dataclass(frozen=True)
class Segment:
    """One window [start, end) on the cut grid with its provisional fit.

    component is the 1-based index of the assigned mixture component, or 0
    for an infeasible window sentinel (score = +inf).
    """

    start: int
    end: int
    component: int
    m_prov: int
    b_prov: float
    score: float

    @property
    def length(self) -> int:
        return self.end - self.start

    def to_json(self) -> dict:
        return {
            "i": self.start,
            "j": self.end,
            "component": self.component,
            "m_prov": self.m_prov,
            "b_prov": float(self.b_prov),
            "score": float(self.score),
        }


def infeasible_segment(start: int, end: int) -> Segment:
    return Segment(start, end, 0, 0, 0.0, math.inf)


@dataclass(frozen=True)
class WindowScore:
    """Per-component alignment of one window's observed queue-length pmf."""

    start: int
    end: int
    alignment: tuple[float, ...]
    feasible: bool = True

    def best_component(self) -> int:
        """1-based argmin component; ties go to the lower index."""
        best_k, best = 0, math.inf
        for k, score in enumerate(self.alignment, start=1):
            if score < best:
                best_k, best = k, score
        return best_k

    def score_for(self, k: int) -> float:
        if not self.feasible:
            return math.inf
        return self.alignment[k - 1]


@dataclass(frozen=True)
class Segmentation:
    segments: tuple[Segment, ...]
    cut_points: tuple[int, ...]
    aggregate_score: float

    def __post_init__(self) -> None:
        cuts = self.cut_points
        if len(cuts) != len(self.segments) + 1 or list(cuts) != sorted(set(cuts)):
            raise SegmentationError("cut points must be strictly increasing and match segments")
        for seg, lo, hi in zip(self.segments, cuts, cuts[1:]):
            if (seg.start, seg.end) != (lo, hi):
                raise SegmentationError("segments must tile the cut points exactly")

    def to_json(self) -> dict:
        return {
            "cuts": list(self.cut_points),
            "segments": [s.to_json() for s in self.segments],
            "aggregate_score": float(self.aggregate_score),
        }


WARMUP_FRACTION = 0.1
WARMUP_CAP_BINS = 28


def observed_window_pmf(traj: BacklogTrajectory, start: int, end: int) -> Pmf:
    """Empirical queue-length pmf of bins [start, end)."""
    if not 0 <= start < end <= traj.num_bins:
        raise SegmentationError(f"window [{start}, {end}) outside 0..{traj.num_bins}")
    counts = np.bincount(traj.counts[start:end])
    return Pmf(counts / counts.sum())


def reference_bins(start: int, end: int, warmup_bins: int | None = None) -> tuple[int, int]:
    """Window bins used as the (m, b) search reference, minus a warm-up margin.

    A regime handoff leaks the predecessor's in-flight work into a window's
    first bins; those jobs drain on the predecessor's schedule, which no
    simulation under this window's parameters can reproduce, and rewarding
    coverage of that mass biases the search toward over-staffing. Alignment
    scoring for cut placement keeps the full window - the margin is dropped
    only from simulation references.
    """
    if warmup_bins is None:
        warmup_bins = min(int((end - start) * WARMUP_FRACTION), WARMUP_CAP_BINS)
    warmup_bins = max(0, min(warmup_bins, end - start - 1))
    return start + warmup_bins, end


def alignment_score(traj: BacklogTrajectory, window: tuple[int, int], target: Pmf) -> float:
    """Length-weighted KL of the window's observed pmf against a target pmf.

    Weighting by bin count makes the score a sum of per-bin log-likelihood
    penalties, so moving one bin across a cut changes the partition total by
    a constant amount regardless of window sizes.
    """
    i, j = window
    return (j - i) * kl_divergence(observed_window_pmf(traj, i, j), target)


def window_alignment(
    traj: BacklogTrajectory,
    window: tuple[int, int],
    gmm: GmmModel,
    feasible: bool = True,
) -> WindowScore:
    i, j = window
    if not feasible:
        return WindowScore(i, j, (), feasible=False)
    obs = observed_window_pmf(traj, i, j)
    scores = tuple(
        (j - i) * kl_divergence(obs, component_pmf(gmm, k, component_span(gmm, k)))
        for k in range(1, gmm.c + 1)
    )
    return WindowScore(i, j, scores)


def provisional_params(
    window: tuple[int, int],
    target: Pmf,
    ia: SampleSet,
    st: SampleSet,
    grid: CoarseGrid,
    cfg: SimConfig,
    seed: int,
) -> tuple[int, float, float]:
    """Coarse grid argmin of KL(target || simulated pmf) for one window.

    The target is the reference distribution the simulation should
    reproduce, normally the window's own observed queue-length pmf: a
    smoothed parametric stand-in (such as a mixture component) systematically
    favors over-staffed simulations, whose pmfs are more symmetric than a
    capacity-limited queue's. The grid must already be absolute. Returns
    (m', b', KL); ties break to the smaller m, then the smaller b.
    """
    i, j = window
    best: tuple[float, int, float] | None = None
    for m in grid.m_values:
        for b in grid.b_values:
            pmf = bootstrap_qld(
                ia, st, QueueParams(m, b), cfg, seed=derive_seed(seed, "win", i, j, m, repr(b))
            )
            score = kl_divergence(target, pmf)
            if best is None or score < best[0]:
                best = (score, m, b)
    assert best is not None
    return best[1], best[2], best[0]


def score_window(
    window: tuple[int, int],
    traj: BacklogTrajectory,
    gmm: GmmModel,
    ia: SampleSet | None,
    st: SampleSet | None,
    grid: CoarseGrid,
    cfg: SimConfig,
    seed: int,
) -> Segment:
    """Score one window standalone: align the observed pmf to the closest
    component, then estimate provisional (m', b') against it by simulation.

    Degenerate windows (no extractable samples) get the +inf sentinel. When
    the grid is relative it is anchored on this window's own scale; within
    best_partition the anchor is the full horizon instead.
    """
    i, j = window
    if ia is None or st is None or len(ia) == 0 or len(st) == 0:
        return infeasible_segment(i, j)
    if not grid.b_absolute:
        grid = grid.resolve(len(st) * float(st.values.mean()) / cfg.horizon)
    ws = window_alignment(traj, window, gmm)
    k = ws.best_component()
    reference = observed_window_pmf(traj, *reference_bins(i, j))
    m_prov, b_prov, _ = provisional_params(window, reference, ia, st, grid, cfg, seed)
    return Segment(i, j, k, m_prov, b_prov, ws.score_for(k))


def cut_positions(num_bins: int, stride: int) -> tuple[int, ...]:
    """Candidate cut points: multiples of the stride, always including T."""
    positions = list(range(0, num_bins + 1, stride))
    if positions[-1] != num_bins:
        positions.append(num_bins)
    return tuple(positions)


def _reachability(positions: Sequence[int], S: int, min_len: int) -> tuple[list, list]:
    """Forward/backward feasibility of tiling prefixes/suffixes with k segments."""
    n = len(positions)
    fwd = [[False] * n for _ in range(S + 1)]
    fwd[0][0] = True
    for k in range(1, S + 1):
        for jj in range(n):
            fwd[k][jj] = any(
                fwd[k - 1][ii]
                for ii in range(jj)
                if positions[jj] - positions[ii] >= min_len
            )
    bwd = [[False] * n for _ in range(S + 1)]
    bwd[0][n - 1] = True
    for k in range(1, S + 1):
        for ii in range(n):
            bwd[k][ii] = any(
                bwd[k - 1][jj]
                for jj in range(ii + 1, n)
                if positions[jj] - positions[ii] >= min_len
            )
    return fwd, bwd


def needed_windows(positions: Sequence[int], S: int, min_len: int) -> list[tuple[int, int]]:
    """Every window an exact S-segment tiling DP can possibly use."""
    fwd, bwd = _reachability(positions, S, min_len)
    out = []
    n = len(positions)
    for ii in range(n):
        for jj in range(ii + 1, n):
            if positions[jj] - positions[ii] < min_len:
                continue
            if any(fwd[k - 1][ii] and bwd[S - k][jj] for k in range(1, S + 1)):
                out.append((positions[ii], positions[jj]))
    return out


def optimal_tiling(
    positions: Sequence[int],
    cost_of: Callable[[int, int], float],
    S: int,
    min_len: int,
) -> tuple[tuple[int, ...], float]:
    """Exact DP over cut positions; returns (cut points, total cost).

    Ties prefer the earliest predecessor, making the result deterministic.
    Raises SegmentationError when no feasible tiling exists.
    """
    n = len(positions)
    cost_table = [[math.inf] * n for _ in range(S + 1)]
    back = [[-1] * n for _ in range(S + 1)]
    cost_table[0][0] = 0.0
    for k in range(1, S + 1):
        for jj in range(1, n):
            best, arg = math.inf, -1
            for ii in range(jj):
                if positions[jj] - positions[ii] < min_len:
                    continue
                prev = cost_table[k - 1][ii]
                if not math.isfinite(prev):
                    continue
                cost = cost_of(positions[ii], positions[jj])
                if not math.isfinite(cost):
                    continue
                total = prev + cost
                if total < best:
                    best, arg = total, ii
            cost_table[k][jj] = best
            back[k][jj] = arg

    if not math.isfinite(cost_table[S][n - 1]):
        raise SegmentationError(f"no feasible {S}-segment tiling of {positions[-1]} bins")
    cuts = [positions[n - 1]]
    jj = n - 1
    for k in range(S, 0, -1):
        jj = back[k][jj]
        cuts.append(positions[jj])
    return tuple(reversed(cuts)), cost_table[S][n - 1]


def optimal_tiling_assigned(
    positions: Sequence[int],
    cost_of: Callable[[int, int, int], float],
    S: int,
    c: int,
    min_len: int,
) -> tuple[tuple[int, ...], tuple[int, ...], float]:
    """Exact DP with one-to-one component assignment.

    cost_of(i, j, k) scores window [i, j) against component k (1-based); each
    component may be used at most once across the S windows. Returns
    (cut points, assigned components per window, total cost). Ties prefer
    the earliest predecessor, then the lowest component index.
    """
    if c < S:
        raise SegmentationError(f"{c} components cannot cover {S} segments one-to-one")
    if c > 16:
        raise SegmentationError("one-to-one assignment is limited to 16 components")
    n = len(positions)
    full = 1 << c
    cost_table = [[math.inf] * full for _ in range(n)]
    back: list[list[tuple[int, int, int] | None]] = [[None] * full for _ in range(n)]
    cost_table[0][0] = 0.0
    # ascending masks visit subsets before supersets
    for mask in range(full):
        segments_used = bin(mask).count("1")
        if segments_used == 0 or segments_used > S:
            continue
        for jj in range(1, n):
            best, arg = math.inf, None
            for ii in range(jj):
                if positions[jj] - positions[ii] < min_len:
                    continue
                for k in range(1, c + 1):
                    bit = 1 << (k - 1)
                    if not mask & bit:
                        continue
                    prev = cost_table[ii][mask ^ bit]
                    if not math.isfinite(prev):
                        continue
                    cost = cost_of(positions[ii], positions[jj], k)
                    if not math.isfinite(cost):
                        continue
                    total = prev + cost
                    if total < best:
                        best, arg = total, (ii, mask ^ bit, k)
            if best < cost_table[jj][mask]:
                cost_table[jj][mask] = best
                back[jj][mask] = arg

    final = [
        (cost_table[n - 1][mask], mask)
        for mask in range(full)
        if bin(mask).count("1") == S and math.isfinite(cost_table[n - 1][mask])
    ]
    if not final:
        raise SegmentationError(
            f"no feasible {S}-segment one-to-one tiling of {positions[-1]} bins"
        )
    total, mask = min(final)
    cuts = [positions[n - 1]]
    comps: list[int] = []
    jj = n - 1
    while mask:
        ii, prev_mask, k = back[jj][mask]  # type: ignore[misc]
        comps.append(k)
        cuts.append(positions[ii])
        jj, mask = ii, prev_mask
    return tuple(reversed(cuts)), tuple(reversed(comps)), total


def window_samples(
    log: EventLog, traj: BacklogTrajectory, start: int, end: int
) -> tuple[SampleSet | None, SampleSet | None]:
    """IA/ST samples of bin window [start, end), or Nones when degenerate."""
    lo = traj.t0 + start * traj.bin_width
    hi = traj.t0 + end * traj.bin_width
    try:
        return interarrival_samples(log, (lo, hi)), service_samples(log, (lo, hi))
    except DegenerateWindowError:
        return None, None


N0_MODES = ("median", "observed", "zero")


def window_n0(traj: BacklogTrajectory, start: int, end: int, mode: str) -> int:
    """Initial backlog for a window simulation.

    "median" (the default) warm-starts at the window's typical level.
    "observed" uses the backlog at the window's first boundary, which at a
    regime change is mostly the predecessor's in-flight work; those jobs
    drain on their own schedule, faster than this window's capacity allows,
    and matching that decay inflates the staffing estimate badly.
    """
    if mode == "median":
        return int(np.median(traj.counts[start:end]))
    if mode == "observed":
        return traj.backlog_at_boundary(start)
    if mode == "zero":
        return 0
    raise SegmentationError(f"unknown n0_mode {mode!r}")


def _window_cfg(cfg: SimConfig, traj: BacklogTrajectory, start: int, end: int, n0_mode: str) -> SimConfig:
    return replace(
        cfg,
        horizon=(end - start) * traj.bin_width,
        bin_width=traj.bin_width,
        n0=window_n0(traj, start, end, n0_mode),
    )


def _provisional_task(payload: tuple) -> tuple[tuple[int, int], tuple[int, float, float]]:
    (window, target, ia, st, grid, cfg, seed) = payload
    return window, provisional_params(window, target, ia, st, grid, cfg, seed)


def best_partition(
    traj: BacklogTrajectory,
    gmm: GmmModel,
    log: EventLog,
    grid: CoarseGrid,
    S: int,
    cfg: SimConfig,
    seed: int = 0,
    n0_mode: str = "median",
    threads: int = 1,
    strict_assignment: bool | None = None,
) -> Segmentation:
    """Lowest-aggregate-score partition of the horizon into S windows.

    cfg acts as the simulation budget template for the provisional (m, b)
    searches; horizon, bin width and initial backlog are overridden per
    window. strict_assignment defaults to one-to-one whenever the mixture
    has at least S components; pass False to allow component reuse.
    """
    if S < 1:
        raise SegmentationError("segment count must be >= 1")
    T = traj.num_bins
    if T < S * grid.min_segment_len:
        raise SegmentationError(
            f"{T} bins cannot hold {S} segments of at least {grid.min_segment_len}"
        )
    if n0_mode not in N0_MODES:
        raise SegmentationError(f"unknown n0_mode {n0_mode!r}")
    if strict_assignment is None:
        strict_assignment = gmm.c >= S

    positions = cut_positions(T, grid.cut_stride)
    windows = needed_windows(positions, S, grid.min_segment_len)
    LOG.info("segmentation: aligning %d candidate windows", len(windows))

    samples: dict[tuple[int, int], tuple[SampleSet | None, SampleSet | None]] = {}
    cache: dict[tuple[int, int], WindowScore] = {}
    for (i, j) in windows:
        ia, st = window_samples(log, traj, i, j)
        samples[(i, j)] = (ia, st)
        cache[(i, j)] = window_alignment(traj, (i, j), gmm, feasible=ia is not None)

    if strict_assignment:

        def cost_k(i: int, j: int, k: int) -> float:
            score = cache.get((i, j))
            return math.inf if score is None else score.score_for(k)

        cuts, comps, total = optimal_tiling_assigned(
            positions, cost_k, S, gmm.c, grid.min_segment_len
        )
    else:

        def cost_of(i: int, j: int) -> float:
            score = cache.get((i, j))
            if score is None or not score.feasible:
                return math.inf
            return min(score.alignment)

        cuts, total = optimal_tiling(positions, cost_of, S, grid.min_segment_len)
        comps = tuple(cache[(i, j)].best_component() for i, j in zip(cuts, cuts[1:]))

    horizon = (traj.t0, traj.t0 + T * traj.bin_width)
    resolved = grid if grid.b_absolute else grid.resolve(service_scale(log, horizon))
    tasks = []
    for (i, j), k in zip(zip(cuts, cuts[1:]), comps):
        ia, st = samples[(i, j)]
        reference = observed_window_pmf(traj, *reference_bins(i, j))
        tasks.append(((i, j), reference, ia, st, resolved, _window_cfg(cfg, traj, i, j, n0_mode), seed))

    provisional: dict[tuple[int, int], tuple[int, float, float]] = {}
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for window, result in pool.map(_provisional_task, tasks):
                provisional[window] = result
    else:
        for payload in tasks:
            window, result = _provisional_task(payload)
            provisional[window] = result

    segments = []
    for (i, j), k in zip(zip(cuts, cuts[1:]), comps):
        m_prov, b_prov, _ = provisional[(i, j)]
        segments.append(Segment(i, j, k, m_prov, b_prov, cache[(i, j)].score_for(k)))
    return Segmentation(tuple(segments), cuts, total)
