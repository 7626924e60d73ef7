import numpy as np
import pytest

from robustjd.errors import DomainError, ModelValidationError
from robustjd.measure import (Control, density_process,
                              entropic_identity_check, entropy_bound_check,
                              gamma0, gamma_profile,
                              girsanov_consistency_report,
                              martingality_report, q_martingale_diagnostic,
                              relative_entropy)
from robustjd.model import TimeGrid, simulate_paths
from robustjd.penalty import PenaltyFn, f_eval


def test_zero_control_density_is_one(model_jump, grid20, paths_jump):
    dens = density_process(Control.zero(1, 1), paths_jump, model_jump, grid20)
    assert np.all(dens.D == 1.0)
    h = relative_entropy(Control.zero(1, 1), dens, paths_jump)
    assert h.mean == 0.0 and h.stderr == 0.0


def test_gaussian_exponential_martingale(model_nojump, grid20, paths_nojump):
    c = 0.8
    ctrl = Control.constant([c], [], tag="gauss")
    dens = density_process(ctrl, paths_nojump, model_nojump, grid20)
    w_T = paths_nojump.brownian_levels()[:, -1, 0]
    expected = np.exp(c * w_T - 0.5 * c * c * grid20.horizon)
    assert np.allclose(dens.terminal, expected)
    se = dens.terminal.std(ddof=1) / np.sqrt(paths_nojump.n_paths)
    assert abs(dens.terminal.mean() - 1.0) < 5 * se


def test_poisson_tilting_density(model_jump, grid20, paths_jump):
    c = 0.7
    ctrl = Control.constant([0.0], [c], tag="tilt")
    dens = density_process(ctrl, paths_jump, model_jump, grid20)
    n_T = paths_jump.count_levels()[:, -1, 0]
    rho = 2.0
    expected = np.exp(-c * rho * grid20.horizon) * (1.0 + c) ** n_T
    assert np.allclose(dens.terminal, expected)
    se = dens.terminal.std(ddof=1) / np.sqrt(paths_jump.n_paths)
    assert abs(dens.terminal.mean() - 1.0) < 5 * se


def test_density_martingale_every_time(model_jump, grid20, paths_jump):
    ctrl = Control.constant([0.3], [0.4])
    dens = density_process(ctrl, paths_jump, model_jump, grid20)
    rep = martingality_report(dens, tag=ctrl.tag)
    assert rep.passed
    assert len(rep.records) == grid20.n_steps


def test_relative_entropy_gaussian(model_nojump, grid20, paths_nojump):
    c = 0.5
    ctrl = Control.constant([c], [])
    dens = density_process(ctrl, paths_nojump, model_nojump, grid20)
    h = relative_entropy(ctrl, dens, paths_nojump)
    assert abs(h.mean - c * c * grid20.horizon / 2.0) < 5 * h.stderr


def test_relative_entropy_poisson(model_jump, grid20, paths_jump):
    c = 0.6
    ctrl = Control.constant([0.0], [c])
    dens = density_process(ctrl, paths_jump, model_jump, grid20)
    h = relative_entropy(ctrl, dens, paths_jump)
    target = 2.0 * grid20.horizon * float(f_eval(c))
    assert abs(h.mean - target) < 5 * h.stderr


def test_relative_entropy_checks_path_count(model_jump, grid20, paths_jump):
    ctrl = Control.constant([0.1], [0.0])
    dens = density_process(ctrl, paths_jump, model_jump, grid20)
    other = simulate_paths(model_jump, grid20, 10, 1)
    with pytest.raises(ModelValidationError):
        relative_entropy(ctrl, dens, other)


def test_gamma0_deterministic_integrand(model_jump, grid20, paths_jump):
    pen = PenaltyFn.entropic()
    zero = Control.zero(1, 1)
    dens0 = density_process(zero, paths_jump, model_jump, grid20)
    g0 = gamma0(zero, dens0, pen, paths_jump, model_jump, grid20)
    assert g0.mean == 0.0 and g0.stderr == 0.0

    c = 0.5
    ctrl = Control.constant([c], [0.0])
    dens = density_process(ctrl, paths_jump, model_jump, grid20)
    g = gamma0(ctrl, dens, pen, paths_jump, model_jump, grid20)
    assert abs(g.mean - c * c * grid20.horizon / 2.0) < 5 * max(g.stderr, 1e-12)

    ctrl_j = Control.constant([0.0], [0.7])
    dens_j = density_process(ctrl_j, paths_jump, model_jump, grid20)
    g_j = gamma0(ctrl_j, dens_j, pen, paths_jump, model_jump, grid20)
    target = 2.0 * grid20.horizon * float(f_eval(0.7))
    assert abs(g_j.mean - target) < 5 * g_j.stderr


def test_gamma0_infinite_rate_flagged(model_jump, grid20, paths_jump):
    def rate(t, eta, psi, xi, lam):
        return np.inf

    pen = PenaltyFn.custom(rate, K1=1.0, K2=0.0)
    ctrl = Control.constant([0.1], [0.1])
    dens = density_process(ctrl, paths_jump, model_jump, grid20)
    g = gamma0(ctrl, dens, pen, paths_jump, model_jump, grid20)
    assert g.infinite and g.mean == np.inf


def test_entropic_identity_mixed(model_jump, grid20, paths_jump):
    pen = PenaltyFn.entropic()
    for ctrl in (Control.zero(1, 1), Control.constant([0.5], [0.0]),
                 Control.constant([0.3], [0.4])):
        rep = entropic_identity_check(ctrl, pen, paths_jump, model_jump, grid20)
        assert rep.passed, ctrl.tag


def test_identity_requires_entropic(model_jump, grid20, paths_jump):
    with pytest.raises(DomainError):
        entropic_identity_check(Control.zero(1, 1),
                                PenaltyFn.scaled_entropic(2.0),
                                paths_jump, model_jump, grid20)


def test_entropy_bound(model_jump, grid20, paths_jump):
    ctrl = Control.constant([0.3], [0.4])
    for pen in (PenaltyFn.entropic(), PenaltyFn.scaled_entropic(2.0)):
        rep = entropy_bound_check(ctrl, pen, paths_jump, model_jump, grid20)
        assert rep.passed
    zero_rep = entropy_bound_check(Control.zero(1, 1),
                                   PenaltyFn("entropic", 1.0, 1.0, 0.2),
                                   paths_jump, model_jump, grid20)
    rec = zero_rep.records[0]
    assert rec.lhs == 0.0 and rec.rhs == pytest.approx(0.2)


def test_girsanov_consistency(model_jump, grid20, paths_jump):
    ctrl = Control.constant([0.4], [0.5])
    dens = density_process(ctrl, paths_jump, model_jump, grid20)
    rep = girsanov_consistency_report(ctrl, dens, paths_jump, model_jump,
                                      grid20)
    assert rep.passed
    assert len(rep.records) == 2 * grid20.n_steps


def test_q_martingale_diagnostic(model_jump, grid20, paths_jump):
    ctrl = Control.constant([0.4], [0.5])
    dens = density_process(ctrl, paths_jump, model_jump, grid20)
    rep = q_martingale_diagnostic(ctrl, dens, paths_jump, model_jump, grid20)
    assert rep.passed


def test_feedback_control_arrays(model_jump, grid20, paths_jump):
    K, N = paths_jump.n_paths, grid20.n_steps
    rng = np.random.default_rng(0)
    eta = np.tile(rng.uniform(-0.5, 0.5, (1, N, 1)), (K, 1, 1))
    psi = np.tile(rng.uniform(-0.3, 0.8, (1, N, 1)), (K, 1, 1))
    ctrl = Control.from_arrays(eta, psi)
    dens = density_process(ctrl, paths_jump, model_jump, grid20)
    se = dens.terminal.std(ddof=1) / np.sqrt(K)
    assert abs(dens.terminal.mean() - 1.0) < 5 * se
    rep = entropic_identity_check(ctrl, PenaltyFn.entropic(), paths_jump,
                                  model_jump, grid20, dens=dens)
    assert rep.passed


def test_feedback_rejects_bad_psi():
    with pytest.raises(DomainError):
        Control.from_arrays(np.zeros((3, 2, 1)), np.full((3, 2, 1), -1.0))


def test_gamma_profile_decreasing_tail(model_jump, grid20, paths_jump):
    ctrl = Control.constant([0.5], [0.2])
    pen = PenaltyFn.entropic()
    dens = density_process(ctrl, paths_jump, model_jump, grid20)
    prof = gamma_profile(ctrl, dens, pen, paths_jump, model_jump, grid20)
    assert prof.shape == (grid20.n_steps + 1,)
    assert prof[-1] == 0.0
    assert np.all(np.diff(prof) <= 1e-12)


def test_density_overflow_reported(model_nojump, grid20):
    paths = simulate_paths(model_nojump, grid20, 200, 3)
    ctrl = Control.constant([60.0], [])   # absurd drift to force overflow
    dens = density_process(ctrl, paths, model_nojump, grid20)
    assert dens.overflow_paths >= 0
    assert np.all(np.isfinite(dens.log_D))


def test_nonuniform_grid_martingale(model_jump):
    grid = TimeGrid.from_times(np.concatenate([[0.0],
                                               np.cumsum([0.1, 0.3, 0.2, 0.4])]))
    paths = simulate_paths(model_jump, grid, 20_000, 17)
    ctrl = Control.constant([0.5], [0.3])
    dens = density_process(ctrl, paths, model_jump, grid)
    rep = martingality_report(dens, tag="nonuniform")
    assert rep.passed
