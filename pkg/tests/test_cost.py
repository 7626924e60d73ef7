import numpy as np
import pytest

from robustjd.cost import (CostSpec, bound_check_lower, bound_check_upper,
                           convexity_check, gamma_cost,
                           indicator_estimate_check, integrability_proxy,
                           u_capped_exp, u_constant, u_delta, u_linear_counts,
                           u_linear_state, u_linear_w, u_zero)
from robustjd.errors import ConfigurationError, ModelValidationError
from robustjd.measure import Control
from robustjd.model import TimeGrid, simulate_paths
from robustjd.penalty import PenaltyFn


def _spec(**kw):
    base = dict(alpha=0.0, alpha_bar=1.0, beta=1.0, delta=0.0,
                u_rate=u_zero(), u_terminal=u_linear_w([1.0]))
    base.update(kw)
    return CostSpec(**base)


def test_cost_spec_invariants():
    with pytest.raises(ConfigurationError):
        _spec(beta=0.0)
    with pytest.raises(ConfigurationError):
        _spec(alpha=-1.0)
    with pytest.raises(ConfigurationError):
        _spec(alpha=0.0, alpha_bar=0.0)


def test_u_delta_terminal_only(grid20, paths_jump):
    spec = _spec(alpha_bar=2.0)
    vals = u_delta(spec, paths_jump, grid20, 0)
    w_T = paths_jump.brownian_levels()[:, -1, 0]
    assert np.allclose(vals, 2.0 * w_T)
    at_T = u_delta(spec, paths_jump, grid20, grid20.n_steps)
    assert np.allclose(at_T, 2.0 * w_T)


def test_u_delta_running_deterministic(grid20, paths_jump):
    spec = _spec(alpha=1.0, alpha_bar=0.0, u_rate=u_constant(1.0))
    vals = u_delta(spec, paths_jump, grid20, 0)
    assert np.allclose(vals, grid20.horizon)


def test_u_delta_discounted_integral(model_nojump):
    # left-endpoint sum of exp(-0.1 s) on N=10 approximates (1-e^-0.1)/0.1
    grid = TimeGrid.regular(1.0, 10)
    paths = simulate_paths(model_nojump, grid, 50, 3)
    spec = _spec(alpha=1.0, alpha_bar=0.0, delta=0.1, u_rate=u_constant(1.0))
    vals = u_delta(spec, paths, grid, 0)
    closed = (1.0 - np.exp(-0.1)) / 0.1
    assert abs(vals[0] - closed) <= 0.006
    assert np.allclose(vals, vals[0])


def test_gamma_cost_zero_control_has_no_penalty(model_jump, grid20, paths_jump):
    spec = _spec()
    est = gamma_cost(spec, Control.zero(1, 1), PenaltyFn.entropic(),
                     paths_jump, model_jump, grid20)
    assert est.penalty_part.mean == 0.0
    w_T = paths_jump.brownian_levels()[:, -1, 0]
    assert est.utility_part.mean == pytest.approx(w_T.mean())


def test_gamma_cost_constant_drift_anchor(model_nojump, grid20, paths_nojump):
    # Gamma(c) = c T + beta c^2 T / 2 for Ubar = W_T under the drifted measure
    spec = _spec()
    pen = PenaltyFn.entropic()
    for c in (-0.7, 0.4):
        est = gamma_cost(spec, Control.constant([c], []), pen,
                         paths_nojump, model_nojump, grid20)
        target = c + 0.5 * c * c
        assert abs(est.mean - target) < 5 * est.stderr
    # the calculus minimum c* = -1/beta gives -T/(2 beta)
    est = gamma_cost(spec, Control.constant([-1.0], []), pen, paths_nojump,
                     model_nojump, grid20)
    assert abs(est.mean + 0.5) < 5 * est.stderr


def test_component_additivity_exact(model_jump, grid20, paths_jump):
    spec = _spec(alpha=1.0, u_rate=u_linear_w([0.2]), delta=0.05)
    est = gamma_cost(spec, Control.constant([0.3], [0.2]),
                     PenaltyFn.entropic(), paths_jump, model_jump, grid20)
    assert est.mean == pytest.approx(
        est.utility_part.mean + spec.beta * est.penalty_part.mean, abs=1e-12)


def test_integrability_proxy(grid20, paths_jump):
    spec = _spec(alpha=1.0, u_rate=u_linear_w([0.5]),
                 u_terminal=u_linear_w([0.5]))
    rep = integrability_proxy(spec, paths_jump, grid20)
    assert rep.passed


def test_bounds_hold_for_shipped_controls(model_jump, grid20, paths_jump):
    spec = _spec(alpha=1.0, delta=0.1, u_rate=u_linear_w([0.5]),
                 u_terminal=u_linear_w([0.5]))
    pen = PenaltyFn.entropic()
    controls = [Control.zero(1, 1), Control.constant([0.5], [0.0]),
                Control.constant([0.0], [1.0]), Control.constant([0.3], [0.4])]
    for ctrl in controls:
        assert bound_check_upper(spec, ctrl, pen, paths_jump, model_jump,
                                 grid20).passed, ctrl.tag
        rep = bound_check_lower(spec, ctrl, pen, paths_jump, model_jump,
                                grid20)
        assert rep.passed, ctrl.tag
        assert any("2lambda*" in r.check for r in rep)


def test_lower_bound_scaled_pen(model_jump, grid20, paths_jump):
    spec = _spec(alpha=1.0, delta=0.1, u_rate=u_linear_w([0.5]),
                 u_terminal=u_linear_w([0.5]))
    rep = bound_check_lower(spec, Control.constant([0.3], [0.4]),
                            PenaltyFn.scaled_entropic(2.0), paths_jump,
                            model_jump, grid20)
    assert rep.passed


def test_indicator_estimate(model_jump, grid20, paths_jump):
    spec = _spec(alpha=1.0, delta=0.1, u_rate=u_linear_w([0.5]),
                 u_terminal=u_linear_w([0.5]))
    rep = indicator_estimate_check(
        spec, Control.constant([0.5], [0.0]), PenaltyFn.entropic(),
        paths_jump, model_jump, grid20, thresholds=(0.0, 0.5, 1.0, np.inf),
        lambdas=(1.0, 2.0, 4.0))
    assert rep.passed
    empty = [r for r in rep if "m=inf" in r.check]
    assert empty and all(r.lhs == 0.0 for r in empty)


def test_convexity_mixture(model_jump, grid20, paths_jump):
    spec = _spec(u_terminal=u_linear_state([1.0], [0.5]))
    pen = PenaltyFn.entropic()
    c1 = Control.constant([0.4], [0.5])
    c2 = Control.constant([-0.4], [-0.2])
    rep = convexity_check(spec, c1, c2, pen, paths_jump, model_jump, grid20,
                          weights=(0.0, 0.25, 0.5, 0.75, 1.0))
    assert rep.passed
    mid = [r for r in rep if "w=0.5" in r.check][0]
    assert mid.lhs < -1e-4          # strictly convex rate: strict inequality
    ends = [r for r in rep if "w=0]" in r.check or "w=1]" in r.check]
    assert all(abs(r.lhs) < 1e-12 for r in ends)


def test_convexity_identical_controls(model_jump, grid20, paths_jump):
    spec = _spec()
    c = Control.constant([0.5], [0.0])
    rep = convexity_check(spec, c, c, PenaltyFn.entropic(), paths_jump,
                          model_jump, grid20, weights=(0.5,))
    assert rep.passed
    assert abs(rep.records[0].lhs) < 1e-12


def test_capped_exp_utility(grid20, paths_jump):
    spec = _spec(alpha=1.0, u_rate=u_capped_exp([1.0], cap=5.0),
                 u_terminal=u_constant(0.0), alpha_bar=0.0)
    vals = u_delta(spec, paths_jump, grid20, 0)
    assert np.all(np.isfinite(vals))
    assert vals.max() <= 5.0 * grid20.horizon + 1e-12


def test_flagged_path_policy(model_nojump, grid20):
    paths = simulate_paths(model_nojump, grid20, 100, 9)

    class BadTerminal:
        def __call__(self, t, w, counts):
            out = np.asarray(w[..., 0]).copy()
            out[:5] = np.nan    # 5% of paths flagged, above the 0.01% limit
            return out

        state_independent = False

    spec = _spec(u_terminal=BadTerminal())
    with pytest.raises(ModelValidationError):
        gamma_cost(spec, Control.constant([0.0], []), PenaltyFn.entropic(),
                   paths, model_nojump, grid20)


def test_linear_counts_utility(grid20, paths_jump):
    spec = _spec(u_terminal=u_linear_counts([1.0]))
    vals = u_delta(spec, paths_jump, grid20, 0)
    assert np.allclose(vals, paths_jump.count_levels()[:, -1, 0])
