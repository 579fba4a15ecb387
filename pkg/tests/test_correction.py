import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gpae_lab.correction import (CorruptTrajectory, IsrSeries, GapReport, compute_isr, gap_metric, gap_rows,
                                 rows_to_csv, trace_coefficients, truncate, GAP_COLUMNS)
from gpae_lab.env import TabularPolicy, make_builtin, rollout
from gpae_lab.experiments import perturbed_policy

ratio = st.floats(0.0, 20.0, allow_nan=False)
lam_st = st.floats(0.01, 1.0)
eta_st = st.floats(0.05, 5.0)


def test_on_policy_ratios_are_one(rng):
    b = make_builtin("chain_gather")
    pi = TabularPolicy.random(b.model, rng)
    isr = compute_isr(rollout(b.model, pi, rng), pi)
    assert np.allclose(isr.individual, 1) and np.allclose(isr.joint, 1) and np.allclose(isr.complement, 1)


def test_ratio_examples():
    isr = IsrSeries.from_ratios(np.array([[2.0, 1.0]]))
    assert isr.individual[0, 0] == 2.0 and isr.complement[0, 0] == 1.0 and isr.joint[0] == 2.0
    three = IsrSeries.from_ratios(np.full((1, 3), 0.5))
    assert three.joint[0] == 0.125


def test_ratios_from_stored_logps(rng):
    b = make_builtin("matrix_team")
    m = b.model
    pi = TabularPolicy([np.array([[0.4, 0.6]]), np.array([[0.5, 0.5]])])
    mu = TabularPolicy([np.array([[0.7, 0.3]]), np.array([[0.5, 0.5]])], True)
    tr = rollout(m, mu, 0)
    isr = compute_isr(tr, pi)
    for t in range(len(tr)):
        a0 = tr.actions[t, 0]
        assert isr.individual[t, 0] == pytest.approx(pi.tables[0][0, a0] / mu.tables[0][0, a0], rel=1e-12)
    # mutating the behavior policy afterwards must not change the stored ratios
    mu.tables[0][:] = 0.5
    assert np.array_equal(compute_isr(tr, pi).individual, isr.individual)


def test_corrupt_behavior_logp_raises(rng):
    b = make_builtin("matrix_team")
    tr = rollout(b.model, b.policies["uniform"], 0)
    tr.behavior_logp[1, 0] = -np.inf
    with pytest.raises(CorruptTrajectory):
        compute_isr(tr, b.policies["uniform"])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.01, 10.0), min_size=2, max_size=4))
def test_product_identity(rs):
    isr = IsrSeries.from_ratios(np.array([rs]))
    for i in range(len(rs)):
        assert abs(isr.joint[0] - isr.individual[0, i] * isr.complement[0, i]) <= 1e-12 * max(1.0, isr.joint[0])


def test_dt_examples():
    assert trace_coefficients(0.8, 0.5, 0.4, "DT", 1.0, 1.05) == pytest.approx(0.4)
    assert trace_coefficients(2.0, 2.0, 4.0, "DT", 1.0, 1.05) == 1.0
    assert trace_coefficients(0.7, 1.0, 0.7, "DT", 0.9, 1.05) == trace_coefficients(0.7, 1.0, 0.7, "IT", 0.9)


def test_scheme_formulas():
    ri, rc = np.array([0.5, 3.0]), np.array([2.0, 0.2])
    j = ri * rc
    assert np.allclose(trace_coefficients(ri, rc, j, "ST", 0.9), 0.9 * np.minimum(1, j))
    assert np.allclose(trace_coefficients(ri, rc, j, "IT", 0.9), 0.9 * np.minimum(1, ri))
    assert np.array_equal(trace_coefficients(ri, rc, j, "untruncated", 0.9), j)
    assert np.all(trace_coefficients(ri, rc, j, "lambda_only", 0.9) == 0.9)
    with pytest.raises(ValueError):
        trace_coefficients(ri, rc, j, "XX")


@settings(max_examples=300, deadline=None)
@given(ratio, ratio, lam_st, eta_st)
def test_truncated_traces_bounded(ri, rc, lam, eta):
    for s in ("ST", "IT", "DT"):
        c = trace_coefficients(ri, rc, ri * rc, s, lam, eta)
        assert 0.0 <= c <= lam


@settings(max_examples=300, deadline=None)
@given(ratio, ratio, lam_st, eta_st, st.floats(0.0, 5.0))
def test_dt_monotone(ri, rc, lam, eta, bump):
    base = trace_coefficients(ri, rc, ri * rc, "DT", lam, eta)
    assert trace_coefficients(ri + bump, rc, (ri + bump) * rc, "DT", lam, eta) >= base
    assert trace_coefficients(ri, rc + bump, ri * (rc + bump), "DT", lam, eta) >= base
    assert trace_coefficients(ri, rc, ri * rc, "DT", lam, eta + bump) >= base


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.05, 4.0), min_size=6, max_size=6), lam_st)
def test_dt_limits(rs, lam):
    isr = IsrSeries.from_ratios(np.array(rs).reshape(3, 2))
    big = float(isr.complement.max())
    assert np.array_equal(truncate(isr, "DT", lam, big).values, truncate(isr, "ST", lam).values) or np.allclose(
        truncate(isr, "DT", lam, big).values, truncate(isr, "ST", lam).values, rtol=0, atol=1e-15)
    ones = IsrSeries(isr.individual, np.ones_like(isr.complement), isr.individual[:, 0] * 0 + 1)
    assert np.array_equal(truncate(ones, "DT", lam, 1.0 + 0.5).values, truncate(ones, "IT", lam).values)


def test_on_policy_collapse():
    isr = IsrSeries.from_ratios(np.ones((5, 3)))
    for s in ("ST", "IT", "DT"):
        assert np.all(truncate(isr, s, 0.7).values == 0.7)


def test_cumulative_products_consistent(rng):
    isr = IsrSeries.from_ratios(rng.uniform(0.2, 2, size=(6, 2)))
    w = truncate(isr, "DT", 0.9)
    K = w.cumulative_table()
    for t in range(6):
        for l in range(t, 6):
            assert np.allclose(K[t, l], w.cumulative(t, l), atol=1e-12)


def test_gap_examples():
    isr = IsrSeries.from_ratios(np.ones((4, 2)))
    rep = gap_metric([isr], [truncate(isr, "DT", 0.9)])
    assert rep.gap == 0 and rep.mean_d_indiv == 0 and rep.mean_d_joint == 0
    one = IsrSeries(np.array([[2.0, 0.5]]), np.array([[0.5, 2.0]]), np.array([1.0]))
    w = truncate(one, "IT", 0.8)
    rep = gap_metric([one], [w], agent=0)
    assert rep.mean_d_indiv == pytest.approx(1.0) and rep.mean_d_joint == pytest.approx(0.0)
    assert rep.gap == pytest.approx(1.0)


def test_gap_recomputable_and_csv(rng):
    isrs = [IsrSeries.from_ratios(rng.uniform(0.2, 3, size=(5, 2))) for _ in range(7)]
    rep = gap_metric(isrs, [truncate(s, "ST", 0.95) for s in isrs])
    assert np.allclose(rep.gaps, np.abs(rep.d_joint - rep.d_indiv), atol=1e-12)
    text = rows_to_csv(gap_rows(rep, 3), GAP_COLUMNS, "config=x version=y")
    lines = text.splitlines()
    assert lines[0].startswith("#") and lines[1].split(",") == list(GAP_COLUMNS)


def test_gap_empty_set_raises():
    with pytest.raises(ValueError):
        gap_metric([], [])


def test_dt_smallest_gap_majority():
    wins = 0
    for seed in range(8):
        rng = np.random.default_rng(seed)
        m = make_builtin("matrix_team", {"n_actions": 4, "horizon": 10}).model
        pi = TabularPolicy.random(m, rng)
        mu = perturbed_policy(pi, rng, 0.5)
        isrs = [compute_isr(rollout(m, mu, rng), pi) for _ in range(100)]
        g = {s: gap_metric(isrs, [truncate(x, s, 0.95) for x in isrs]).gap for s in ("ST", "IT", "DT")}
        wins += g["DT"] < min(g["ST"], g["IT"])
    assert wins > 4
