import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustjd.errors import DomainError, NonAttainedError
from robustjd.model import JumpDiffusionModel
from robustjd.penalty import (ControlPoint, DualPoint, PenaltyFn,
                              argmax_control, check_growth_Ar,
                              check_rstar_bound, f_eval, f_star_eval,
                              fenchel_pairing, r_eval, r_star_eval)

MODEL = JumpDiffusionModel.constant_xi(1, [[1.0]], [1.0])
MODEL2 = JumpDiffusionModel.constant_xi(1, [[1.0]], [2.0])
MODEL0 = JumpDiffusionModel.constant_xi(1, np.zeros((0, 1)), [])


# -- f and f* ----------------------------------------------------------------

def test_f_values():
    assert f_eval(0.0) == 0.0
    assert f_eval(np.e - 1.0) == pytest.approx(1.0, abs=1e-14)
    assert f_eval(-1.0) == 1.0
    assert f_eval(-2.0) == np.inf


def test_f_star_values():
    assert f_star_eval(0.0) == 0.0
    assert f_star_eval(1.0) == pytest.approx(np.e - 2.0, abs=1e-14)


def test_f_star_via_grid_newton_sup():
    # independent oracle: coarse grid then local Newton on p -> 0.5 p - f(p)
    x = 0.5
    ps = np.linspace(-1.0 + 1e-9, 10.0, 2001)
    vals = x * ps - f_eval(ps)
    p = ps[np.argmax(vals)]
    for _ in range(60):   # Newton on the stationarity log(1+p) = x
        grad = x - np.log1p(p)
        hess = -1.0 / (1.0 + p)
        step = -grad / hess
        p = max(p + step, -1.0 + 1e-12)
        if abs(step) < 1e-15:
            break
    assert x * p - f_eval(p) == pytest.approx(f_star_eval(x), abs=1e-6)


@given(st.floats(-0.999, 50.0))
def test_f_nonnegative(x):
    assert f_eval(x) >= 0.0


@given(st.floats(-0.99, 20.0), st.floats(-0.99, 20.0))
def test_f_midpoint_convex(a, b):
    assert f_eval(0.5 * (a + b)) <= 0.5 * (f_eval(a) + f_eval(b)) + 1e-12


@given(st.floats(-20.0, 20.0), st.floats(-20.0, 20.0))
def test_f_star_midpoint_convex(a, b):
    lhs = f_star_eval(0.5 * (a + b))
    rhs = 0.5 * (f_star_eval(a) + f_star_eval(b))
    assert lhs <= rhs + 1e-12 * max(1.0, abs(rhs))


@given(st.floats(-10.0, 10.0))
def test_f_star_nonnegative(x):
    assert f_star_eval(x) >= 0.0


# -- rate and conjugate -------------------------------------------------------

def test_rate_entropic_examples():
    pen = PenaltyFn.entropic()
    assert r_eval(pen, 0.0, ControlPoint([0.0], [0.0]), MODEL) == 0.0
    assert r_eval(pen, 0.0, ControlPoint([1.0], []), MODEL0) == 0.5
    val = r_eval(pen, 0.0, ControlPoint([0.0], [np.e - 1.0]), MODEL2)
    assert val == pytest.approx(2.0, abs=1e-12)


def test_rate_rejects_bad_psi():
    with pytest.raises(DomainError):
        ControlPoint([0.0], [-1.0])


def test_conjugate_entropic_examples():
    pen = PenaltyFn.entropic()
    assert r_star_eval(pen, 0.0, DualPoint([0.0], [0.0]), MODEL) == 0.0
    assert r_star_eval(pen, 0.0, DualPoint([1.0], [0.0]), MODEL) == 0.5
    assert r_star_eval(pen, 0.0, DualPoint([0.0], [1.0]), MODEL) == \
        pytest.approx(np.e - 2.0, abs=1e-14)


def test_conjugate_closed_vs_numeric_cloud():
    # the numeric grid+Newton machinery, run on a custom copy of the entropic
    # rate, must reproduce the closed form on a dual cloud
    pen_closed = PenaltyFn.entropic()

    def rate(t, eta, psi, xi, lam):
        from robustjd.penalty import entropic_rate_values
        return float(entropic_rate_values(eta, psi, xi, lam, 1.0))

    pen_num = PenaltyFn.custom(rate, K1=1.0, K2=0.0)
    rng = np.random.default_rng(3)
    for _ in range(100):
        dp = DualPoint(rng.uniform(-2, 2, 1), rng.uniform(-1.5, 1.5, 1))
        closed = r_star_eval(pen_closed, 0.0, dp, MODEL)
        numeric = r_star_eval(pen_num, 0.0, dp, MODEL)
        assert numeric == pytest.approx(closed, abs=1e-6)


def test_scaled_entropic_conjugate():
    pen = PenaltyFn.scaled_entropic(2.0)
    assert pen.K1 == 2.0 and pen.K2 == 0.0
    assert r_star_eval(pen, 0.0, DualPoint([1.0], [0.0]), MODEL) == \
        pytest.approx(0.25)
    # jump part: kappa xi lam f*(zt / (kappa xi))
    val = r_star_eval(pen, 0.0, DualPoint([0.0], [1.0]), MODEL)
    assert val == pytest.approx(2.0 * f_star_eval(0.5), abs=1e-14)


def test_argmax_entropic():
    pen = PenaltyFn.entropic()
    cp = argmax_control(pen, 0.0, DualPoint([0.0], [0.2]), MODEL)
    assert cp.psi[0] == pytest.approx(np.expm1(0.2), abs=1e-12)
    cp0 = argmax_control(pen, 0.0, DualPoint([0.0], [0.0]), MODEL)
    assert np.all(cp0.eta == 0.0) and np.all(cp0.psi == 0.0)
    cp_b = argmax_control(pen, 0.0, DualPoint([0.3], []), MODEL0)
    assert cp_b.eta[0] == pytest.approx(0.3)
    dp = DualPoint([0.3], [])
    gap = r_eval(pen, 0.0, cp_b, MODEL0) + r_star_eval(pen, 0.0, dp, MODEL0) \
        - fenchel_pairing(cp_b, dp, MODEL0.lambda_weights)
    assert abs(gap) < 1e-12


def test_argmax_verified_by_grid_search():
    pen = PenaltyFn.entropic()
    dp = DualPoint([0.7], [0.4])
    cp = argmax_control(pen, 0.0, dp, MODEL)
    etas = np.linspace(-3, 3, 301)
    psis = np.linspace(-0.99, 4.0, 301)
    best = -np.inf
    for e in etas:
        for p in psis:
            val = dp.z[0] * e + dp.z_tilde[0] * p * MODEL.lambda_weights[0] \
                - r_eval(pen, 0.0, ControlPoint([e], [p]), MODEL)
            best = max(best, val)
    attained = fenchel_pairing(cp, dp, MODEL.lambda_weights) \
        - r_eval(pen, 0.0, cp, MODEL)
    assert attained >= best - 1e-4


@given(st.floats(-3, 3), st.floats(-2, 2), st.floats(-3, 3),
       st.floats(-0.9, 5.0))
@settings(max_examples=200)
def test_fenchel_young_inequality(z, zt, eta, psi):
    pen = PenaltyFn.entropic()
    cp = ControlPoint([eta], [psi])
    dp = DualPoint([z], [zt])
    pair = fenchel_pairing(cp, dp, MODEL.lambda_weights)
    total = r_eval(pen, 0.0, cp, MODEL) + r_star_eval(pen, 0.0, dp, MODEL)
    assert pair <= total + 1e-10 * max(1.0, abs(total))


def test_conjugate_convexity_midpoints():
    pen = PenaltyFn.entropic()
    rng = np.random.default_rng(11)
    for _ in range(1000):
        z1, z2 = rng.uniform(-3, 3, 2)
        t1, t2 = rng.uniform(-2, 2, 2)
        lhs = r_star_eval(pen, 0.0, DualPoint([(z1 + z2) / 2],
                                              [(t1 + t2) / 2]), MODEL)
        rhs = 0.5 * (r_star_eval(pen, 0.0, DualPoint([z1], [t1]), MODEL)
                     + r_star_eval(pen, 0.0, DualPoint([z2], [t2]), MODEL))
        assert lhs <= rhs + 1e-12 * max(1.0, abs(rhs))


def test_non_attained_supremum():
    # linear-growth rate: conjugate blows up along eta for |z| > slope
    def rate(t, eta, psi, xi, lam):
        return float(np.abs(eta).sum())

    pen = PenaltyFn.custom(rate, K1=1.0, K2=1.0)
    with pytest.raises(NonAttainedError) as exc:
        r_star_eval(pen, 0.0, DualPoint([2.0], []), MODEL0)
    assert "eta" in str(exc.value)


# -- growth and bound reports -------------------------------------------------

def _sample_points(rng, n):
    return [(0.0, ControlPoint(rng.uniform(-2, 2, 1), rng.uniform(-0.9, 3, 1)))
            for _ in range(n)]


def test_growth_check_entropic_equality():
    rng = np.random.default_rng(0)
    rep = check_growth_Ar(PenaltyFn.entropic(), MODEL, _sample_points(rng, 50))
    assert rep.passed
    assert abs(rep.worst_margin()) < 1e-9


def test_growth_check_scaled():
    rng = np.random.default_rng(1)
    rep = check_growth_Ar(PenaltyFn.scaled_entropic(2.0), MODEL,
                          _sample_points(rng, 50))
    assert rep.passed


def test_growth_check_reports_violations_without_throwing():
    # entropic rate tested against K1 = 2 must fail at any nonzero control
    pen = PenaltyFn("entropic", 1.0, 2.0, 0.0)
    rep = check_growth_Ar(pen, MODEL,
                          [(0.0, ControlPoint([1.0], [0.5]))])
    assert not rep.passed
    assert len(rep.failures()) == 1


def test_rstar_bound_cloud():
    rng = np.random.default_rng(2)
    sample = [(0.0, DualPoint(rng.uniform(-3, 3, 1), rng.uniform(-2, 2, 1)))
              for _ in range(1000)]
    rep = check_rstar_bound(PenaltyFn.entropic(), MODEL, sample)
    assert rep.passed
    tight = [r for r in rep if abs(r.rhs - r.lhs) < 1e-10]
    assert tight          # the entropic bound is an equality case
    rep2 = check_rstar_bound(PenaltyFn.scaled_entropic(2.0), MODEL, sample)
    assert rep2.passed


def test_rstar_bound_at_origin():
    pen = PenaltyFn("entropic", 1.0, 1.0, 0.5)
    rep = check_rstar_bound(pen, MODEL, [(0.0, DualPoint([0.0], [0.0]))])
    rec = rep.records[0]
    assert rec.lhs == 0.0 and rec.rhs == pytest.approx(0.5)
