from __future__ import annotations

import math

import numpy as np
import pytest

from backlogq.estimate import (
    EstimationError,
    SegmentEstimate,
    aggregate_qld,
    build_report,
    normalize_capacity,
    refine_params,
)
from backlogq.fitdist import DistFit
from backlogq.mixtures import GmmModel, kl_divergence
from backlogq.seeds import derive_seed
from backlogq.segment import Segment
from backlogq.simulate import QueueParams, SimConfig, bootstrap_qld
from backlogq.trajectory import Pmf, SampleSet

DAY = 86400.0


def test_normalize_capacity_direct_division():
    st = SampleSet(np.full(10, 2.0 * DAY), "service_time")
    assert normalize_capacity(10.0, st) == pytest.approx(5.0)


def test_normalize_capacity_homogeneity():
    rng = np.random.default_rng(0)
    st = SampleSet(rng.exponential(3 * DAY, 50) + 1.0, "service_time")
    base = normalize_capacity(2.0, st)
    assert normalize_capacity(6.0, st) == pytest.approx(3.0 * base)


def test_normalize_capacity_st_scaling():
    st = SampleSet(np.array([1.0 * DAY, 3.0 * DAY]), "service_time")
    doubled = SampleSet(st.values * 2.0, "service_time")
    assert normalize_capacity(4.0, doubled) == pytest.approx(normalize_capacity(4.0, st) / 2.0)


def test_aggregate_identity():
    pmf = Pmf(np.array([0.25, 0.75]))
    assert aggregate_qld([(1.0, pmf)]).p.tolist() == [0.25, 0.75]


def test_aggregate_disjoint_point_masses():
    out = aggregate_qld([(0.3, Pmf.point_mass(0)), (0.7, Pmf.point_mass(5))])
    assert out.to_dict() == {0: pytest.approx(0.3), 5: pytest.approx(0.7)}


def test_aggregate_matches_elementwise_computation():
    rng = np.random.default_rng(1)
    parts = []
    weights = np.array([0.2, 0.5, 0.3])
    for w in weights:
        raw = rng.random(rng.integers(2, 8))
        parts.append((float(w), Pmf(raw / raw.sum())))
    out = aggregate_qld(parts)
    size = max(len(p.p) for _, p in parts)
    expected = np.zeros(size)
    for w, p in parts:
        expected[: len(p.p)] += w * p.p
    assert np.allclose(out.p, expected, atol=1e-12)


def test_aggregate_rejects_bad_weights():
    pmf = Pmf(np.array([1.0]))
    with pytest.raises(EstimationError):
        aggregate_qld([])
    with pytest.raises(EstimationError):
        aggregate_qld([(0.5, pmf), (0.2, pmf)])
    with pytest.raises(EstimationError):
        aggregate_qld([(-0.2, pmf), (1.2, pmf)])


def _samples(seed: int, lam_per_day: float, sojourn_days: float, n: int):
    rng = np.random.default_rng(seed)
    ia = SampleSet(rng.exponential(DAY / lam_per_day, n), "inter_arrival")
    st = SampleSet(rng.exponential(sojourn_days * DAY, n), "service_time")
    return ia, st


def test_refine_params_single_point_grid_returns_provisional():
    ia, st = _samples(2, 1.0, 0.5, 100)
    seg = Segment(0, 10, 1, 3, 5.0, 0.1)
    target = Pmf(np.array([0.5, 0.5]))
    cfg = SimConfig(horizon=10 * DAY, bin_width=DAY, min_reps=2, max_reps=3, conv_tol=0.5)
    out = refine_params(seg, target, ia, st, cfg, seed=0, m_span=0.0, b_span=0.0, b_steps=1)
    assert (out.m, out.b_eff) == (3, 5.0)
    assert out.b_norm is None


def test_refine_params_recovers_planted_grid_point():
    ia, st = _samples(3, 2.0, 1.0, 600)
    m_true, b_prov = 4, 8.0
    seg = Segment(0, 60, 1, m_true, b_prov, 0.5)
    cfg = SimConfig(horizon=60 * DAY, bin_width=DAY, min_reps=10, max_reps=20, conv_tol=0.01)
    b_grid = np.linspace(0.8 * b_prov, 1.2 * b_prov, 21)
    b_star = float(b_grid[10])
    target = bootstrap_qld(
        ia, st, QueueParams(m_true, b_star), cfg,
        seed=derive_seed(0, "refine", 0, 60, m_true, 10),
    )
    out = refine_params(seg, target, ia, st, cfg, seed=0)
    assert out.m == m_true
    assert abs(out.b_eff - b_star) <= (b_grid[1] - b_grid[0]) + 1e-9


def test_refine_argmin_invariant_under_joint_b_and_st_rescaling():
    ia, st = _samples(8, 2.0, 1.0, 400)
    st2 = SampleSet(st.values * 2.0, "service_time", st.window)
    seg = Segment(0, 40, 1, 3, 6.0, 0.2)
    seg2 = Segment(0, 40, 1, 3, 12.0, 0.2)
    target = Pmf(np.array([0.1, 0.2, 0.4, 0.2, 0.1]))
    cfg = SimConfig(horizon=40 * DAY, bin_width=DAY, min_reps=6, max_reps=10, conv_tol=0.05)
    base = refine_params(seg, target, ia, st, cfg, seed=4, b_steps=9)
    scaled = refine_params(seg2, target, ia, st2, cfg, seed=4, b_steps=9)
    assert scaled.m == base.m
    assert scaled.b_eff == pytest.approx(2.0 * base.b_eff, rel=1e-12)


def test_refine_params_requires_provisional():
    ia, st = _samples(4, 1.0, 1.0, 50)
    from backlogq.segment import infeasible_segment

    with pytest.raises(EstimationError):
        refine_params(
            infeasible_segment(0, 10),
            Pmf(np.array([1.0])),
            ia,
            st,
            SimConfig(horizon=10 * DAY, bin_width=DAY),
        )


def _fake_estimate(seg: Segment, boot: Pmf, para: Pmf) -> SegmentEstimate:
    fit = DistFit("lognormal", (0.0, 1.0), 0.1, 100)
    return SegmentEstimate(
        segment=seg,
        refined=QueueParams(2, 3.0, 1.5),
        ia_fit=fit,
        st_fit=fit,
        sim_qld_bootstrap=boot,
        sim_qld_parametric=para,
        kl_refined=0.05,
    )


def test_build_report_single_segment_collapse():
    empirical = Pmf(np.array([0.5, 0.3, 0.2]))
    boot = Pmf(np.array([0.45, 0.35, 0.2]))
    para = Pmf(np.array([0.55, 0.25, 0.2]))
    est = _fake_estimate(Segment(0, 10, 1, 2, 3.0, 0.05), boot, para)
    gmm = GmmModel(np.ones(1), np.array([1.0]), np.array([0.3]))
    report = build_report(empirical, [est], gmm)
    assert report.weights == (1.0,)
    assert np.allclose(report.aggregated_bootstrap.p, boot.p)
    assert report.kl_bootstrap == pytest.approx(kl_divergence(empirical, boot))
    assert report.kl_parametric == pytest.approx(kl_divergence(empirical, para))


def test_build_report_time_fraction_weights_and_recomputable_kls():
    empirical = Pmf(np.array([0.4, 0.4, 0.2]))
    a = _fake_estimate(Segment(0, 30, 1, 2, 3.0, 0.1), Pmf(np.array([0.7, 0.3])), Pmf(np.array([0.6, 0.4])))
    b = _fake_estimate(Segment(30, 40, 2, 2, 3.0, 0.1), Pmf(np.array([0.2, 0.5, 0.3])), Pmf(np.array([0.1, 0.6, 0.3])))
    gmm = GmmModel(np.array([0.6, 0.4]), np.array([0.5, 1.5]), np.array([0.3, 0.3]))
    report = build_report(empirical, [a, b], gmm)
    assert report.weights == (0.75, 0.25)
    assert report.component_weights == (pytest.approx(0.6), pytest.approx(0.4))
    expected = aggregate_qld(
        [(0.75, a.sim_qld_bootstrap), (0.25, b.sim_qld_bootstrap)]
    )
    assert np.allclose(report.aggregated_bootstrap.p, expected.p)
    assert report.kl_bootstrap == pytest.approx(
        kl_divergence(report.empirical_qld, report.aggregated_bootstrap)
    )
    assert report.kl_gmm >= 0
    payload = report.to_json()
    assert set(payload["kl"]) == {"parametric", "bootstrap", "gmm"}


def test_report_kls_nonnegative():
    empirical = Pmf(np.array([0.9, 0.1]))
    est = _fake_estimate(Segment(0, 5, 1, 1, 1.0, 0.0), empirical, empirical)
    gmm = GmmModel(np.ones(1), np.array([0.1]), np.array([0.25]))
    report = build_report(empirical, [est], gmm)
    for val in (report.kl_parametric, report.kl_bootstrap, report.kl_gmm):
        assert val >= 0
