"""Candidate measures: density processes, relative entropy and the penalty.

A candidate measure Q is specified by a control (eta, psi). Its density
against the reference measure is accumulated pathwise in log space as the
exact discrete stochastic exponential

    log D_{n+1} = log D_n + eta_n . dW_n - |eta_n|^2 dt/2
                  + sum_i [ log(1+psi_{n,i}) counts_{n,i} - psi_{n,i} xi lam_i dt ],

which is strictly positive and a martingale step by step. All functionals of
Q are estimated by importance sampling under the reference measure with the
weight D_T, so one path bundle serves every candidate measure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DomainError, ModelValidationError
from .model import JumpDiffusionModel, PathBundle, TimeGrid
from .penalty import PenaltyFn, entropic_rate_values
from .report import Report, identity_check, inequality_check


@dataclass
class Estimate:
    mean: float
    stderr: float
    n_paths: int
    infinite: bool = False

    def __iter__(self):
        return iter((self.mean, self.stderr))


class Control:
    """Control fields for a candidate measure.

    Deterministic controls are functions of time (and mark); feedback
    controls, as produced by the BSDE solver, are full per-(path, step)
    arrays aligned with a specific path bundle.
    """

    def __init__(self, eta, psi, tag="", feedback=False):
        self.tag = tag
        self.feedback = feedback
        self._eta = eta
        self._psi = psi

    # -- constructors -------------------------------------------------------
    @classmethod
    def zero(cls, d: int, m: int, tag="zero") -> "Control":
        return cls.constant(np.zeros(d), np.zeros(m), tag=tag)

    @classmethod
    def constant(cls, eta, psi, tag="") -> "Control":
        eta = np.atleast_1d(np.asarray(eta, float))
        psi = np.atleast_1d(np.asarray(psi, float)) if np.size(psi) else np.zeros(0)
        if psi.size and np.any(psi <= -1.0):
            raise DomainError("psi must stay above -1")
        tag = tag or f"const(eta={eta.tolist()}, psi={psi.tolist()})"
        return cls((lambda t, v=eta: v), (lambda t, i, v=psi: v[i]), tag=tag)

    @classmethod
    def from_functions(cls, eta_fn: Callable, psi_fn: Callable, tag="fn") -> "Control":
        """eta_fn(t) -> (d,); psi_fn(t, mark_index) -> value in (-1, inf)."""
        return cls(eta_fn, psi_fn, tag=tag)

    @classmethod
    def from_arrays(cls, eta, psi, tag="feedback") -> "Control":
        """Per-(path, step) arrays: eta (K, N, d), psi (K, N, m)."""
        eta = np.asarray(eta, float)
        psi = np.asarray(psi, float)
        if eta.ndim != 3 or psi.ndim != 3 or eta.shape[:2] != psi.shape[:2]:
            raise DomainError("feedback arrays must be (K, N, d) and (K, N, m)")
        if psi.size and np.any(psi <= -1.0):
            raise DomainError("psi must stay above -1")
        return cls(eta, psi, tag=tag, feedback=True)

    # -- evaluation ---------------------------------------------------------
    def eta_on_grid(self, grid: TimeGrid, model: JumpDiffusionModel) -> np.ndarray:
        """(N, d) for deterministic controls, (K, N, d) for feedback."""
        if self.feedback:
            return self._eta
        out = np.empty((grid.n_steps, model.d))
        for n, t in enumerate(grid.times[:-1]):
            out[n] = np.asarray(self._eta(t), float).reshape(model.d)
        if not np.all(np.isfinite(out)):
            raise ModelValidationError(f"control '{self.tag}': eta not finite")
        return out

    def psi_on_grid(self, grid: TimeGrid, model: JumpDiffusionModel) -> np.ndarray:
        """(N, m) for deterministic controls, (K, N, m) for feedback."""
        if self.feedback:
            return self._psi
        out = np.empty((grid.n_steps, model.m))
        for n, t in enumerate(grid.times[:-1]):
            for i in range(model.m):
                out[n, i] = float(self._psi(t, i))
        if out.size and (not np.all(np.isfinite(out)) or np.any(out <= -1.0)):
            raise ModelValidationError(
                f"control '{self.tag}': psi must be finite and > -1 on the grid")
        return out

    def __repr__(self):
        return f"Control({self.tag!r}{', feedback' if self.feedback else ''})"


@dataclass
class DensityPath:
    """Density values and their logs at every grid time, per path."""

    D: np.ndarray        # (K, N+1)
    log_D: np.ndarray    # (K, N+1)
    overflow_paths: int

    @property
    def n_paths(self):
        return self.D.shape[0]

    @property
    def terminal(self) -> np.ndarray:
        return self.D[:, -1]


def density_process(ctrl: Control, paths: PathBundle,
                    model: JumpDiffusionModel, grid: TimeGrid) -> DensityPath:
    """Exact discrete stochastic exponential of the control along the paths."""
    eta = ctrl.eta_on_grid(grid, model)
    psi = ctrl.psi_on_grid(grid, model)
    dt = grid.dt
    xi = model.xi_on_grid(grid)[:-1]            # left endpoint, (N, m)
    lam = model.lambda_weights

    if ctrl.feedback:
        brown = np.einsum("knd,knd->kn", eta, paths.dW)
        brown -= 0.5 * np.sum(eta * eta, axis=2) * dt
    else:
        brown = np.einsum("nd,knd->kn", eta, paths.dW)
        brown = brown - (0.5 * np.sum(eta * eta, axis=1) * dt)

    if model.m:
        comp = xi * lam * dt[:, None]           # (N, m)
        jump = np.sum(np.log1p(psi) * paths.jump_counts - psi * comp, axis=-1)
        increments = brown + jump
    else:
        increments = brown

    K = paths.n_paths
    log_D = np.zeros((K, grid.n_steps + 1))
    np.cumsum(increments, axis=1, out=log_D[:, 1:])
    with np.errstate(over="ignore"):
        D = np.exp(log_D)
    overflow = int(np.sum(~np.isfinite(D[:, -1])))
    return DensityPath(D=D, log_D=log_D, overflow_paths=overflow)


def _mean_stderr(values: np.ndarray) -> Estimate:
    K = values.size
    mean = float(np.mean(values))
    stderr = float(np.std(values, ddof=1) / np.sqrt(K)) if K > 1 else 0.0
    return Estimate(mean, stderr, K)


def relative_entropy(ctrl: Control, dens: DensityPath, paths: PathBundle) -> Estimate:
    """H(Q|P) at time 0 estimated as E[D_T log D_T]."""
    if dens.n_paths != paths.n_paths:
        raise ModelValidationError("density path count does not match bundle")
    d_T = dens.terminal
    log_T = dens.log_D[:, -1]
    vals = np.where(d_T > 0.0, d_T * log_T, 0.0)   # x log x -> 0 at 0
    return _mean_stderr(vals)


def penalty_rate_path(ctrl: Control, pen: PenaltyFn, paths: PathBundle,
                      model: JumpDiffusionModel, grid: TimeGrid) -> np.ndarray:
    """r(t_n, eta_n, psi_n) along the grid; (N,) deterministic or (K, N)."""
    eta = ctrl.eta_on_grid(grid, model)
    psi = ctrl.psi_on_grid(grid, model)
    xi = model.xi_on_grid(grid)[:-1]
    lam = model.lambda_weights
    if pen.is_closed_form:
        return entropic_rate_values(eta, psi, xi, lam, pen.kappa)
    if ctrl.feedback:
        raise DomainError("custom penalty rates support deterministic controls only")
    out = np.empty(grid.n_steps)
    for n, t in enumerate(grid.times[:-1]):
        out[n] = float(pen.custom_rate(t, eta[n], psi[n], xi[n], lam))
    return out


def gamma0(ctrl: Control, dens: DensityPath, pen: PenaltyFn, paths: PathBundle,
           model: JumpDiffusionModel, grid: TimeGrid) -> Estimate:
    """Penalty functional gamma_0(Q) = E_Q[ integral of r along the path ]."""
    rates = penalty_rate_path(ctrl, pen, paths, model, grid)
    if not np.all(np.isfinite(rates)):
        return Estimate(float("inf"), float("nan"), paths.n_paths, infinite=True)
    integral = np.sum(rates * grid.dt, axis=-1)
    return _mean_stderr(dens.terminal * integral)


def gamma_profile(ctrl: Control, dens: DensityPath, pen: PenaltyFn,
                  paths: PathBundle, model: JumpDiffusionModel,
                  grid: TimeGrid) -> np.ndarray:
    """Diagnostic tail estimates of the conditional penalty at grid times.

    Returns gamma_{t_n}(Q) estimates for every n; exposed for inspection only,
    no distributional guarantees are asserted for n > 0.
    """
    rates = penalty_rate_path(ctrl, pen, paths, model, grid)
    contrib = rates * grid.dt
    if contrib.ndim == 1:
        tail = np.concatenate([np.cumsum(contrib[::-1])[::-1], [0.0]])
        return tail
    weighted = dens.terminal[:, None] * contrib
    tails = np.concatenate(
        [np.cumsum(weighted[:, ::-1], axis=1)[:, ::-1],
         np.zeros((paths.n_paths, 1))], axis=1)
    return tails.mean(axis=0)


def entropic_identity_check(ctrl: Control, pen: PenaltyFn, paths: PathBundle,
                            model: JumpDiffusionModel, grid: TimeGrid,
                            dens: DensityPath | None = None) -> Report:
    """For the entropic rate, gamma_0(Q) must equal H(Q|P) within noise."""
    if pen.kind != "entropic":
        raise DomainError("identity holds for the entropic rate only")
    dens = dens or density_process(ctrl, paths, model, grid)
    g = gamma0(ctrl, dens, pen, paths, model, grid)
    h = relative_entropy(ctrl, dens, paths)
    rep = Report(f"entropic_identity[{ctrl.tag}]")
    rep.add(identity_check(
        f"gamma0_vs_entropy[{ctrl.tag}]", g.mean, h.mean, g.stderr + h.stderr,
        detail=f"gamma0={g.mean:.6g}±{g.stderr:.2g}, H={h.mean:.6g}±{h.stderr:.2g}"))
    return rep


def entropy_bound_check(ctrl: Control, pen: PenaltyFn, paths: PathBundle,
                        model: JumpDiffusionModel, grid: TimeGrid,
                        dens: DensityPath | None = None) -> Report:
    """H(Q|P) <= gamma_0(Q)/K1 + T K2/K1 within combined noise."""
    dens = dens or density_process(ctrl, paths, model, grid)
    g = gamma0(ctrl, dens, pen, paths, model, grid)
    h = relative_entropy(ctrl, dens, paths)
    rhs = g.mean / pen.K1 + grid.horizon * pen.K2 / pen.K1
    stderr = h.stderr + g.stderr / pen.K1
    rep = Report(f"entropy_bound[{ctrl.tag}]")
    rep.add(inequality_check(
        f"entropy_bound[{ctrl.tag}]", h.mean, rhs, stderr,
        detail=f"slack={rhs - h.mean:.6g}"))
    return rep


def martingality_report(dens: DensityPath, tag="", n_sigma=5.0) -> Report:
    """Sample mean of D at every grid time must be 1 within n_sigma stderr."""
    rep = Report(f"density_martingale[{tag}]")
    K = dens.n_paths
    for n in range(1, dens.D.shape[1]):
        col = dens.D[:, n]
        se = float(np.std(col, ddof=1) / np.sqrt(K))
        rep.add(identity_check(f"E[D_t{n}]{('[' + tag + ']') if tag else ''}",
                               float(col.mean()), 1.0, se, n_sigma=n_sigma))
    return rep


def girsanov_consistency_report(ctrl: Control, dens: DensityPath,
                                paths: PathBundle, model: JumpDiffusionModel,
                                grid: TimeGrid, n_sigma=5.0) -> Report:
    """Reweighted increment means must match the Q-dynamics.

    Under the weight D_T the Brownian increments have mean eta dt and the
    jump-cell counts have mean (1+psi) xi lam dt.
    """
    rep = Report(f"girsanov[{ctrl.tag}]")
    w = dens.terminal
    K = paths.n_paths
    eta = ctrl.eta_on_grid(grid, model)
    psi = ctrl.psi_on_grid(grid, model)
    xi = model.xi_on_grid(grid)[:-1]
    lam = model.lambda_weights
    dt = grid.dt
    for n in range(grid.n_steps):
        for j in range(model.d):
            vals = w * paths.dW[:, n, j]
            target = (eta[..., n, j] * dt[n])
            target = float(np.mean(target)) if np.ndim(target) else float(target)
            rep.add(identity_check(
                f"Q_drift[t{n},w{j}]", float(vals.mean()), target,
                float(np.std(vals, ddof=1) / np.sqrt(K)), n_sigma=n_sigma))
        for i in range(model.m):
            vals = w * paths.jump_counts[:, n, i]
            tgt = (1.0 + psi[..., n, i]) * xi[n, i] * lam[i] * dt[n]
            tgt = float(np.mean(tgt)) if np.ndim(tgt) else float(tgt)
            rep.add(identity_check(
                f"Q_intensity[t{n},x{i}]", float(vals.mean()), tgt,
                float(np.std(vals, ddof=1) / np.sqrt(K)), n_sigma=n_sigma))
    return rep


def q_martingale_diagnostic(ctrl: Control, dens: DensityPath, paths: PathBundle,
                            model: JumpDiffusionModel, grid: TimeGrid,
                            n_sigma=5.0) -> Report:
    """The compensated Q-integrals of eta and log(1+psi) have mean zero.

    Checks the D_T-weighted sample mean of int eta . dW^Q and of the
    compensated log(1+psi) jump integral, both of which are martingales under
    a finite-penalty measure.
    """
    eta = ctrl.eta_on_grid(grid, model)
    psi = ctrl.psi_on_grid(grid, model)
    xi = model.xi_on_grid(grid)[:-1]
    lam = model.lambda_weights
    dt = grid.dt
    w = dens.terminal
    K = paths.n_paths

    if ctrl.feedback:
        mw = np.einsum("knd,knd->kn", eta, paths.dW) \
            - np.sum(eta * eta, axis=2) * dt
    else:
        mw = np.einsum("nd,knd->kn", eta, paths.dW) \
            - np.sum(eta * eta, axis=1) * dt
    m_brownian = w * mw.sum(axis=1)

    rep = Report(f"q_martingales[{ctrl.tag}]")
    rep.add(identity_check(
        "int_eta_dWQ", float(m_brownian.mean()), 0.0,
        float(np.std(m_brownian, ddof=1) / np.sqrt(K)), n_sigma=n_sigma))
    if model.m:
        comp_q = (1.0 + psi) * xi * lam * dt[:, None]
        mj = np.sum(np.log1p(psi) * (paths.jump_counts - comp_q), axis=-1)
        m_jump = w * mj.sum(axis=1)
        rep.add(identity_check(
            "int_log1p_psi_dmuQ", float(m_jump.mean()), 0.0,
            float(np.std(m_jump, ddof=1) / np.sqrt(K)), n_sigma=n_sigma))
    return rep
