"""Entropy bookkeeping: omega root, regimes, truncation, nets and bump families."""

import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose
from scipy.optimize import brentq, minimize_scalar

from rtelab.entropy import (
    AMPLITUDE_CAP,
    build_bump_family,
    calibration_mu,
    entropy_report,
    instability_probe,
    kolmogorov_log_count,
    member_checks,
    net_log_cardinality,
    omega_solve,
    profile_seminorm,
    regime_classify,
    sup_weighted_decay,
    truncation_order,
)
from rtelab.transport import AbsorptionField, TransportDiscretization


def omega_oracle(t, eps, tau):
    """Independent root in ``u = log(omega)``."""
    p = -1.0 / tau
    f = lambda u: -u + eps * math.exp(-u) + (eps * math.exp(-u)) ** p - t
    return math.exp(brentq(f, -t - 1.0, 0.0, xtol=1e-15, rtol=1e-15, maxiter=500))


# ---- omega -----------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(eps=st.floats(1e-6, 0.3), tau=st.floats(-3.0, -0.3), extra=st.floats(0.01, 60.0))
def test_omega_matches_bracketing_oracle(eps, tau, extra):
    t = eps + eps ** (-1.0 / tau) + extra
    sol = omega_solve(t, eps, tau)
    assert 0 < sol.omega < 1
    assert abs(sol.residual) <= 1e-9 * t
    assert_allclose(sol.omega, omega_oracle(t, eps, tau), rtol=1e-9)


def test_omega_zero_eps_is_exponential():
    for t in (0.5, 3.0, 40.0):
        assert omega_solve(t, 0.0).omega == math.exp(-t)


def test_omega_decreasing_in_t():
    w = [omega_solve(t, 0.01).omega for t in np.linspace(0.2, 30, 40)]
    assert np.all(np.diff(w) < 0)


def test_omega_out_of_regime():
    with pytest.raises(ValueError, match="out of regime"):
        omega_solve(0.1, 0.2)
    for bad in [(0.0, 0.1, -1.0), (1.0, -0.1, -1.0), (1.0, 0.1, 0.5)]:
        with pytest.raises(ValueError):
            omega_solve(*bad)


# ---- regimes ---------------------------------------------------------------


def test_regime_threshold_and_bounds():
    r = regime_classify(0.1, 0.01, d=2, q=1)
    x = 0.1 ** (-2 / 5)
    assert_allclose(r.threshold, x / 3 * math.exp(-x / 3), rtol=1e-14)
    assert r.diffusive
    assert_allclose(r.bound, 8 * math.sqrt(2) * math.exp(-x / 3), rtol=1e-14)
    r2 = regime_classify(0.1, 0.5, d=2, q=1)
    assert r2.label == "transport-Hölder"
    assert_allclose(r2.bound, 24 * math.sqrt(2) * 0.5 / x, rtol=1e-14)


@settings(max_examples=40, deadline=None)
@given(theta=st.floats(1e-4, 0.9), eps=st.floats(1e-4, 0.9), c=st.floats(0.3, 3.0))
def test_regime_invariant_under_matched_rescaling(theta, eps, c):
    # theta -> theta^c with q -> c q leaves the regime variable unchanged
    a = regime_classify(theta, eps, 2, 1.0)
    b = regime_classify(theta**c, eps, 2, c)
    assert a.label == b.label or abs(eps - a.threshold) < 1e-12
    assert_allclose(a.threshold, b.threshold, rtol=1e-9)


def test_regime_rejects_bad_input():
    for bad in [(0.0, 0.1), (1.0, 0.1), (0.1, 0.0), (0.1, 1.0)]:
        with pytest.raises(ValueError):
            regime_classify(*bad)


# ---- truncation order ------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(delta=st.floats(1e-5, 0.3), eps=st.floats(0.0, 0.2), r0=st.floats(0.05, 0.95),
       tau=st.floats(-3.0, -1.0), c0r=st.floats(0.2, 5.0))
def test_truncation_matches_linear_scan(delta, eps, r0, tau, c0r):
    # the bounded domain keeps the order below 2e6, so a dense scan is exhaustive
    thr = delta / (4 * c0r)
    l = np.arange(2_000_000, dtype=float)
    vals = (1 + l) ** tau * (r0**l + eps)
    below = np.flatnonzero(vals <= thr)
    res = truncation_order(delta, eps, r0, tau, c0r)
    assert res.l == below[0]
    assert res.value_at_l <= res.threshold < res.value_before
    assert res.l <= res.upper_bound * (1 + 1e-12)


def test_truncation_envelope_grows_with_eps_over_delta():
    # with eps > 0 the order grows like (eps/delta)^(-1/tau), not log(1/delta)
    a = truncation_order(1e-4, 1e-2, 0.5).l
    b = truncation_order(1e-5, 1e-2, 0.5).l
    assert_allclose(b / a, 10.0, rtol=0.05)


def test_sup_weighted_decay():
    r0 = 0.9
    l = np.arange(200)
    assert_allclose(sup_weighted_decay(r0, 199), np.max((1 + l) * r0**l), rtol=0)
    assert sup_weighted_decay(0.3) == 1.0


# ---- net and count formulas ------------------------------------------------


def test_net_bound_dominates_scalar_grid_count():
    # order 0 keeps only one real entry in [-M, M]; a delta grid needs ceil(M/delta) points
    delta, eps, c0r = 1e-3, 0.1, 1.0
    net = net_log_cardinality(delta, eps, 0.5, -1.0, 2, c0r, l_override=0)
    m = c0r * (1 + eps)
    assert net.explicit >= math.log(math.ceil(m / delta))
    assert_allclose(net.envelope, net.explicit, rtol=1e-14)


def test_net_polylog_exponent_without_scattering_loss():
    ds = np.geomspace(1e-200, 1e-100, 12)
    v = [net_log_cardinality(d, 0.0, 0.5).explicit for d in ds]
    slope = np.polyfit(np.log(np.log(1 / ds)), np.log(v), 1)[0]
    assert_allclose(slope, 3.0, atol=0.1)


def test_net_envelope_dominates_explicit():
    for delta in (1e-2, 1e-4, 1e-7):
        for eps in (0.0, 1e-3, 0.05):
            n = net_log_cardinality(delta, eps, 0.5)
            assert n.envelope >= n.explicit * (1 - 1e-12)


def test_kolmogorov_count():
    assert_allclose(kolmogorov_log_count(0.01, 2.0, 1.0, 2, 0.5), 2**-3 * 100.0**2, rtol=1e-14)
    with pytest.raises(ValueError):
        kolmogorov_log_count(1.0, 2.0, 1.0, 2, 0.5)


def test_entropy_report_verdict():
    rep = entropy_report(1e-3, 0.0, 0.5, 1e-6, 150.0, 1.0)
    assert rep.verdict == (rep.kolmogorov_log > rep.net_log_card)
    assert rep.l == truncation_order(1e-3, 0.0, 0.5).l


# ---- profile seminorm ------------------------------------------------------


def _chi(t):
    return mpmath.exp(1 - 1 / (1 - t * t)) if abs(t) < 1 else mpmath.mpf(0)


def _sup(fn):
    best = max(abs(fn(t)) for t in np.linspace(0.01, 0.99, 99))
    t0 = max(np.linspace(0.01, 0.99, 99), key=lambda t: abs(fn(t)))
    r = minimize_scalar(lambda t: -abs(fn(t)), bounds=(max(t0 - 0.02, 1e-3), min(t0 + 0.02, 0.999)), method="bounded",
                        options={"xatol": 1e-10})
    return max(best, -r.fun)


def test_profile_seminorm_first_order():
    d1 = lambda t: float(mpmath.diff(_chi, t))
    assert_allclose(profile_seminorm(1), _sup(d1), rtol=1e-5)


def test_profile_seminorm_second_order():
    # radial Hessian: axis entries chi'' and chi'/r, mixed (chi'' - chi'/r)/2
    d1 = lambda t: float(mpmath.diff(_chi, t))
    d2 = lambda t: float(mpmath.diff(_chi, t, 2))
    cands = [_sup(d2), _sup(lambda t: d1(t) / t), _sup(lambda t: 0.5 * (d2(t) - d1(t) / t))]
    assert_allclose(profile_seminorm(2), max(cands), rtol=1e-4)


def test_calibration_mu():
    assert_allclose(calibration_mu(0.5, 2), 0.125**2 / profile_seminorm(2), rtol=1e-14)


# ---- bump family -----------------------------------------------------------


def test_family_geometry_and_determinism():
    fam = build_bump_family(0.1, 150.0, 2, 0.5, 4, seed=3)
    assert_allclose(fam.h, (0.1 * profile_seminorm(2) / 150.0) ** 0.5, rtol=1e-14)
    assert np.all(np.hypot(*fam.centers.T) + fam.h <= 0.5 + 1e-12)
    assert len({p.tobytes() for p in fam.patterns}) == 4
    again = build_bump_family(0.1, 150.0, 2, 0.5, 4, seed=3)
    assert np.array_equal(fam.patterns, again.patterns)
    assert_allclose(fam.log_count(), fam.n_cells * math.log(2))


def test_family_members_distance_and_checks():
    fam = build_bump_family(0.1, 150.0, 2, 0.5, 2, seed=0)
    differ = np.any(fam.patterns[0] != fam.patterns[1])
    assert fam.cell_center_distance(0, 1) == pytest.approx(0.1 if differ else 0.0, rel=1e-14)
    assert fam.sampled_distance(0, 1) == pytest.approx(fam.cell_center_distance(0, 1), rel=1e-12)
    chk = member_checks(fam, 0)
    assert chk["nonnegative"] and chk["support_ok"] and chk["budget_ok"]


def test_family_infeasible_cases():
    with pytest.raises(ValueError, match="C\\^q budget"):
        build_bump_family(0.4, 1.0, 2, 0.5, 2)
    with pytest.raises(ValueError, match="resolution"):
        build_bump_family(1e-4, 1e3, 2, 0.5, 2)
    with pytest.raises(ValueError, match="patterns"):
        build_bump_family(0.1, 150.0, 2, 0.5, 10**6)
    base = AbsorptionField.radial_bump(AMPLITUDE_CAP, 0.45)
    with pytest.raises(ValueError, match="amplitude cap"):
        build_bump_family(0.1, 150.0, 2, 0.5, 2, base=base)


def test_probe_records_failures_and_sorts():
    disc = TransportDiscretization(n_r=12, n_theta=16, n_dir=16)
    rows, fam = instability_probe(None, 0.1, [0.2, 0.8, 0.3], max_order=2, beta=150.0, disc=disc)
    assert [r.epsilon for r in rows] == [0.8, 0.3, 0.2]
    assert rows[0].error is not None and np.isnan(rows[0].op_norm)
    for r in rows[1:]:
        assert r.error is None
        assert r.op_norm >= 0 and r.xs_seminorm >= 0
        assert_allclose(r.op_norm, r.singular_values[0], rtol=1e-12)
        assert r.sup_distance == fam.cell_center_distance(0, 1)
