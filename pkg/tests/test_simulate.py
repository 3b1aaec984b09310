from __future__ import annotations

import numpy as np
import pytest

from backlogq.simulate import (
    QueueParams,
    SampleSource,
    SimConfig,
    bootstrap_qld,
    estimate_qld,
    run_jobs,
    simulate_once,
)
from backlogq.fitdist import DistFit
from backlogq.trajectory import Pmf, SampleSet


def _const(value: float, kind: str) -> SampleSet:
    return SampleSet(np.array([value]), kind)


def _exponential_fit(mean: float) -> DistFit:
    # gamma with shape 1 is the exponential family member
    return DistFit("gamma", (1.0, mean), 0.0, 0)


def geometric_pmf(rho: float, n_max: int) -> Pmf:
    n = np.arange(n_max + 1)
    p = (1 - rho) * rho**n
    p[-1] += 1 - p.sum()  # fold the tail into the last point
    return Pmf(p)


def total_variation(p: Pmf, q: Pmf) -> float:
    size = max(len(p.p), len(q.p))
    a = np.zeros(size)
    b = np.zeros(size)
    a[: len(p.p)] = p.p
    b[: len(q.p)] = q.p
    return 0.5 * float(np.abs(a - b).sum())


def in_service_at(starts: np.ndarray, departs: np.ndarray, t: float) -> int:
    ss = np.sort(starts)
    ds = np.sort(departs)
    return int(np.searchsorted(ss, t, side="right") - np.searchsorted(ds, t, side="right"))


def audit_work_conservation(arrivals, starts, departs, m) -> None:
    """A server never idles while the waiting room is non-empty: any job that
    waited must have seen all m servers busy mid-wait. Also checks that jobs
    in service never exceed m."""
    for arr, start in zip(arrivals, starts):
        if start > arr + 1e-12:
            mid = 0.5 * (arr + start)
            assert in_service_at(starts, departs, mid) == m
    for t in starts:
        assert in_service_at(starts, departs, t) <= m


def test_dd1_underloaded_time_average_below_one():
    cfg = SimConfig(horizon=200.0, bin_width=1.0)
    traj = simulate_once(
        SampleSource.bootstrap(_const(1.0, "inter_arrival"), 1),
        SampleSource.bootstrap(_const(0.5, "service_time"), 2),
        QueueParams(1, 1.0),
        cfg,
        rep_seed=0,
    )
    assert traj.counts.max() <= 1
    assert traj.counts.mean() <= 1.0


def test_dd1_overloaded_fluid_growth():
    # IA=1, ST=2, m=1, b_eff=1: one arrival per unit, one departure per two units
    cfg = SimConfig(horizon=100.0, bin_width=1.0)
    traj = simulate_once(
        SampleSource.bootstrap(_const(1.0, "inter_arrival"), 1),
        SampleSource.bootstrap(_const(2.0, "service_time"), 2),
        QueueParams(1, 1.0),
        cfg,
        rep_seed=0,
    )
    assert traj.counts[-1] == 50  # 99 arrivals in [0,100), 49 departures by t=100


def test_joint_scaling_invariance_bit_identical():
    ia = SampleSet(np.array([0.7, 1.3, 2.2]), "inter_arrival")
    st = SampleSet(np.array([1.1, 3.0, 0.4]), "service_time")
    st2 = SampleSet(st.values * 2.0, "service_time")
    cfg = SimConfig(horizon=300.0, bin_width=1.0)
    for m in (1, 3):
        base = simulate_once(
            SampleSource.bootstrap(ia, 5), SampleSource.bootstrap(st, 6),
            QueueParams(m, 1.5), cfg, rep_seed=9,
        )
        scaled = simulate_once(
            SampleSource.bootstrap(ia, 5), SampleSource.bootstrap(st2, 6),
            QueueParams(m, 3.0), cfg, rep_seed=9,
        )
        assert base.counts.tolist() == scaled.counts.tolist()


def test_initial_backlog_jobs_present_at_first_boundary():
    # no arrivals (huge IA), n0 jobs drain through m servers
    cfg = SimConfig(horizon=10.0, n0=5, bin_width=0.5)
    traj = simulate_once(
        SampleSource.bootstrap(_const(1e9, "inter_arrival"), 1),
        SampleSource.bootstrap(_const(4.0, "service_time"), 2),
        QueueParams(2, 1.0),  # duration 4*2/1 = 8 per job, two at a time
        cfg,
        rep_seed=0,
    )
    assert traj.counts[0] == 5
    assert traj.counts[-1] <= 3


def test_zero_arrival_source_empty_pmf():
    cfg = SimConfig(horizon=50.0, bin_width=1.0, min_reps=3, max_reps=5, conv_tol=0.5)
    pmf = estimate_qld(
        SampleSource.bootstrap(_const(1e12, "inter_arrival"), 3),
        SampleSource.bootstrap(_const(1.0, "service_time"), 4),
        QueueParams(1, 1.0),
        cfg,
    )
    assert pmf.to_dict() == {0: 1.0}


def test_estimate_qld_deterministic():
    ia = SampleSet(np.array([0.5, 1.5, 0.9]), "inter_arrival")
    st = SampleSet(np.array([0.8, 1.2]), "service_time")
    cfg = SimConfig(horizon=200.0, bin_width=1.0, min_reps=5, max_reps=10, conv_tol=0.01)
    a = bootstrap_qld(ia, st, QueueParams(2, 2.0), cfg, seed=7)
    b = bootstrap_qld(ia, st, QueueParams(2, 2.0), cfg, seed=7)
    assert a.p.tolist() == b.p.tolist()


def test_mm1_matches_geometric_stationary_pmf():
    # rho = 0.5: exponential IA mean 2, exponential ST mean 1, m=1, b_eff=1
    cfg = SimConfig(horizon=30_000.0, bin_width=1.0, min_reps=20, max_reps=60, conv_tol=0.003)
    pmf = estimate_qld(
        SampleSource.parametric(_exponential_fit(2.0), 11),
        SampleSource.parametric(_exponential_fit(1.0), 12),
        QueueParams(1, 1.0),
        cfg,
    )
    assert total_variation(pmf, geometric_pmf(0.5, max(40, pmf.n_max))) < 0.02


def test_bootstrap_agrees_with_parametric_mm1():
    rng = np.random.default_rng(123)
    ia = SampleSet(rng.exponential(2.0, 1500), "inter_arrival")
    st = SampleSet(rng.exponential(1.0, 1500), "service_time")
    cfg = SimConfig(horizon=20_000.0, bin_width=1.0, min_reps=15, max_reps=40, conv_tol=0.005)
    boot = bootstrap_qld(ia, st, QueueParams(1, 1.0), cfg, seed=5)
    para = estimate_qld(
        SampleSource.parametric(_exponential_fit(2.0), 21),
        SampleSource.parametric(_exponential_fit(1.0), 22),
        QueueParams(1, 1.0),
        cfg,
    )
    assert total_variation(boot, para) < 0.05


def test_large_capacity_concentrates_near_zero():
    # non-lattice gaps keep arrivals off the integer bin boundaries
    ia = SampleSet(np.array([1.07, 2.13]), "inter_arrival")
    st = SampleSet(np.array([5.0, 10.0]), "service_time")
    cfg = SimConfig(horizon=500.0, bin_width=1.0, min_reps=5, max_reps=10, conv_tol=0.05)
    pmf = bootstrap_qld(ia, st, QueueParams(1, 1e4), cfg, seed=1)
    assert pmf.p[0] > 0.95


def test_singleton_bootstrap_reduces_to_deterministic_case():
    cfg = SimConfig(horizon=100.0, bin_width=1.0, min_reps=2, max_reps=3, conv_tol=0.5)
    pmf = bootstrap_qld(
        _const(1.0, "inter_arrival"), _const(0.5, "service_time"), QueueParams(1, 1.0), cfg, seed=0
    )
    assert pmf.n_max <= 1


def test_work_conservation_on_random_small_sims():
    base = np.random.default_rng(2024)
    cfg = SimConfig(horizon=60.0, bin_width=1.0)
    for trial in range(100):
        m = int(base.integers(1, 6))
        n0 = int(base.integers(0, 4))
        ia = SampleSet(base.exponential(1.0, 20) + 1e-9, "inter_arrival")
        st = SampleSet(base.exponential(2.0, 20) + 1e-9, "service_time")
        arrivals, starts, departs = run_jobs(
            SampleSource.bootstrap(ia, trial),
            SampleSource.bootstrap(st, 1000 + trial),
            QueueParams(m, float(base.uniform(0.5, 4.0))),
            SimConfig(horizon=cfg.horizon, n0=n0, bin_width=1.0),
            rep_seed=trial,
        )
        assert (starts >= arrivals - 1e-12).all()
        assert (departs > starts).all()
        audit_work_conservation(arrivals, starts, departs, m)


def test_single_server_recursion_matches_multi_server_path():
    # the vectorized m=1 path and the heap path must agree exactly
    rng = np.random.default_rng(77)
    arrivals = np.sort(rng.uniform(0, 50, 200))
    durations = rng.exponential(1.0, 200)
    from backlogq.simulate import _serve_multi, _serve_single

    dep_vec = _serve_single(arrivals, durations)
    _, dep_heap = _serve_multi(arrivals, durations, 1)
    assert np.allclose(dep_vec, dep_heap, rtol=0, atol=1e-9)


def test_sim_config_validation():
    with pytest.raises(ValueError):
        SimConfig(horizon=0.5, bin_width=1.0)
    with pytest.raises(ValueError):
        SimConfig(horizon=10.0, min_reps=5, max_reps=2)
    with pytest.raises(ValueError):
        QueueParams(0, 1.0)
    with pytest.raises(ValueError):
        QueueParams(1, 0.0)
