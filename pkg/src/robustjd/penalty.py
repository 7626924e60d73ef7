"""Penalty rates, Fenchel conjugates and growth checks.

The canonical rate is the entropic one,

    r(t, eta, psi) = |eta|^2 / 2 + sum_i f(psi_i) xi_t(x_i) lambda_i,

with f(x) = (1+x)log(1+x) - x. Its conjugate in the pairing
``z . eta + sum_i zt_i psi_i lambda_i`` has the closed form
``|z|^2 / 2 + sum_i xi lambda_i f*(zt_i / xi)`` with f*(x) = e^x - x - 1.
``scaled_entropic(kappa)`` multiplies the rate by kappa and is the shipped
stress case for growth constants K1 = kappa, K2 = 0. Custom rates get a
numeric conjugate: coarse grid search refined by damped Newton.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConjugateError, DomainError, NonAttainedError
from .report import Report, CheckRecord

PSI_FLOOR = -1.0 + 1e-6
FY_TOL_CLOSED = 1e-8
FY_TOL_NUMERIC = 1e-5


def f_eval(x):
    """(1+x)log(1+x) - x on (-1, inf); 1 at x = -1; +inf below."""
    x = np.asarray(x, dtype=float)
    t = 1.0 + x
    safe = np.where(t > 0, x, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        # log1p keeps the small-x cancellation exact: f(x) ~ x^2/2 >= 0
        val = np.where(t > 0, (1.0 + safe) * np.log1p(safe) - safe, np.inf)
    val = np.where(t == 0.0, 1.0, val)
    return val if val.ndim else float(val)


def f_star_eval(x):
    """Fenchel conjugate e^x - x - 1; nonnegative everywhere."""
    x = np.asarray(x, dtype=float)
    val = np.expm1(x) - x
    return val if val.ndim else float(val)


@dataclass(frozen=True)
class ControlPoint:
    """Girsanov pair (eta, psi) with psi > -1 componentwise."""

    eta: np.ndarray
    psi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "eta", np.atleast_1d(np.asarray(self.eta, float)))
        object.__setattr__(self, "psi", np.atleast_1d(np.asarray(self.psi, float)))
        if self.psi.size and np.any(self.psi <= -1.0):
            raise DomainError("psi components must stay above -1")


@dataclass(frozen=True)
class DualPoint:
    """Dual coordinates (z, z_tilde); z_tilde already carries the xi factor."""

    z: np.ndarray
    z_tilde: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "z", np.atleast_1d(np.asarray(self.z, float)))
        object.__setattr__(self, "z_tilde",
                           np.atleast_1d(np.asarray(self.z_tilde, float)))
        if not (np.all(np.isfinite(self.z)) and np.all(np.isfinite(self.z_tilde))):
            raise DomainError("dual point must be finite")


@dataclass(frozen=True)
class PenaltyFn:
    """Penalty rate with growth constants; immutable and thread-safe.

    ``custom_rate(t, eta, psi, xi, lam)`` must be convex in (eta, psi) and
    vanish at the origin; it is only consulted for kind == "custom".
    """

    kind: str
    kappa: float
    K1: float
    K2: float
    custom_rate: Callable | None = None

    @classmethod
    def entropic(cls) -> "PenaltyFn":
        return cls("entropic", 1.0, 1.0, 0.0)

    @classmethod
    def scaled_entropic(cls, kappa: float) -> "PenaltyFn":
        if kappa <= 0:
            raise DomainError("kappa must be positive")
        return cls("scaled_entropic", float(kappa), float(kappa), 0.0)

    @classmethod
    def custom(cls, rate, K1: float, K2: float) -> "PenaltyFn":
        if K1 <= 0 or K2 < 0:
            raise DomainError("need K1 > 0 and K2 >= 0")
        return cls("custom", 1.0, float(K1), float(K2), rate)

    @property
    def is_closed_form(self) -> bool:
        return self.kind in ("entropic", "scaled_entropic")


def entropic_rate_values(eta, psi, xi, lam, kappa=1.0):
    """Vectorized kappa * (|eta|^2/2 + sum f(psi) xi lam) over leading axes.

    eta: (..., d), psi: (..., m); xi broadcastable to psi, lam shape (m,).
    """
    eta = np.asarray(eta, float)
    quad = 0.5 * np.sum(eta * eta, axis=-1)
    psi = np.asarray(psi, float)
    if psi.shape[-1] if psi.ndim else 0:
        jump = np.sum(f_eval(psi) * xi * lam, axis=-1)
    else:
        jump = 0.0
    return kappa * (quad + jump)


def _xi_at(model, t) -> np.ndarray:
    return np.asarray(model.xi_fn(t), dtype=float).reshape(-1)


def r_eval(pen: PenaltyFn, t: float, cp: ControlPoint, model) -> float:
    """Rate r(t, eta, psi) under the model's compensator density at t."""
    xi = _xi_at(model, t)
    lam = model.lambda_weights
    if pen.is_closed_form:
        return float(entropic_rate_values(cp.eta, cp.psi, xi, lam, pen.kappa))
    return float(pen.custom_rate(t, cp.eta, cp.psi, xi, lam))


def r_star_eval(pen: PenaltyFn, t: float, dp: DualPoint, model) -> float:
    """Fenchel conjugate of the rate at the dual point."""
    xi = _xi_at(model, t)
    lam = model.lambda_weights
    if pen.is_closed_form:
        return float(entropic_conjugate_values(dp.z, dp.z_tilde, xi, lam, pen.kappa))
    value, _, converged, last = _numeric_conjugate(pen, t, dp, model)
    if not converged:
        raise ConjugateError(
            f"numeric conjugate did not converge at t={t}", last_iterate=last)
    return value


def entropic_conjugate_values(z, zt, xi, lam, kappa=1.0):
    """|z|^2/(2 kappa) + kappa sum xi lam f*(zt / (kappa xi)), vectorized."""
    z = np.asarray(z, float)
    quad = np.sum(z * z, axis=-1) / (2.0 * kappa)
    zt = np.asarray(zt, float)
    if zt.shape[-1] if zt.ndim else 0:
        jump = kappa * np.sum(xi * lam * f_star_eval(zt / (kappa * xi)), axis=-1)
    else:
        jump = 0.0
    return quad + jump


def fenchel_pairing(cp: ControlPoint, dp: DualPoint, lam) -> float:
    """z . eta + sum_i zt_i psi_i lambda_i."""
    pair = float(np.dot(dp.z, cp.eta))
    if cp.psi.size:
        pair += float(np.sum(dp.z_tilde * cp.psi * lam))
    return pair


def argmax_control(pen: PenaltyFn, t: float, dp: DualPoint, model) -> ControlPoint:
    """Control attaining the conjugate supremum (subgradient inverse).

    Verified a posteriori through the Fenchel-Young equality
    r(cp) + r*(dp) = <dp, cp>.
    """
    xi = _xi_at(model, t)
    lam = model.lambda_weights
    if pen.is_closed_form:
        eta = dp.z / pen.kappa
        psi = np.expm1(dp.z_tilde / (pen.kappa * xi)) if xi.size else np.zeros(0)
        cp = ControlPoint(eta, psi)
        tol = FY_TOL_CLOSED
        rstar = float(entropic_conjugate_values(dp.z, dp.z_tilde, xi, lam, pen.kappa))
    else:
        rstar, cp, converged, last = _numeric_conjugate(pen, t, dp, model)
        if not converged:
            raise ConjugateError(
                f"numeric conjugate did not converge at t={t}", last_iterate=last)
        tol = FY_TOL_NUMERIC
    gap = r_eval(pen, t, cp, model) + rstar - fenchel_pairing(cp, dp, lam)
    scale = max(1.0, abs(rstar))
    if not np.isfinite(gap) or abs(gap) > tol * scale:
        raise ConjugateError(
            f"Fenchel-Young equality violated by {gap:.3e} at t={t}",
            last_iterate=cp)
    return cp


# ---------------------------------------------------------------------------
# numeric conjugate: coarse grid, then damped Newton

ETA_BOX = 10.0
PSI_BOX = 50.0


def _grid_coords():
    pos = np.concatenate([[0.0], np.logspace(-2, np.log10(ETA_BOX), 8)])
    eta_pts = np.unique(np.concatenate([-pos, pos]))
    psi_pts = np.unique(np.concatenate([
        -1.0 + np.logspace(-6, np.log10(1.0 + PSI_BOX), 12), [0.0]]))
    return eta_pts, psi_pts


def _numeric_conjugate(pen, t, dp, model, max_points=200_000):
    xi = _xi_at(model, t)
    lam = model.lambda_weights
    d, m = dp.z.size, dp.z_tilde.size

    def objective(x):
        eta, psi = x[:d], x[d:]
        if np.any(psi <= -1.0):
            return -np.inf
        rate = pen.custom_rate(t, eta, psi, xi, lam) if pen.kind == "custom" \
            else entropic_rate_values(eta, psi, xi, lam, pen.kappa)
        pair = np.dot(dp.z, eta) + (np.sum(dp.z_tilde * psi * lam) if m else 0.0)
        return pair - rate

    eta_pts, psi_pts = _grid_coords()
    axes = [eta_pts] * d + [psi_pts] * m
    n_total = int(np.prod([len(a) for a in axes]))
    if n_total > max_points:
        shrink = int(np.ceil((n_total / max_points) ** (1.0 / (d + m))))
        axes = [a[::shrink] if len(a) > 3 else a for a in axes]

    best_x, best_v = None, -np.inf
    for combo in itertools.product(*axes):
        x = np.asarray(combo)
        v = objective(x)
        if v > best_v:
            best_v, best_x = v, x

    lower = np.concatenate([np.full(d, -ETA_BOX), np.full(m, PSI_FLOOR)])
    upper = np.concatenate([np.full(d, ETA_BOX), np.full(m, PSI_BOX)])
    x, v, converged = _damped_newton_max(objective, best_x, lower, upper)

    at_edge = (x <= lower + 1e-9) | (x >= upper - 1e-9)
    if np.any(at_edge):
        g = _fd_grad(objective, x)
        outward = np.where(x >= upper - 1e-9, g > 1e-7, g < -1e-7) & at_edge
        if np.any(outward):
            names = [f"eta[{i}]" for i in range(d)] + [f"psi[{i}]" for i in range(m)]
            direction = [names[i] for i in np.nonzero(outward)[0]]
            raise NonAttainedError(
                f"conjugate supremum still improving at the box edge "
                f"({', '.join(direction)})", direction=direction)
    cp = ControlPoint(x[:d], x[d:])
    return float(v), cp, converged, x


def _fd_grad(fn, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return g


def _fd_hess(fn, x, h=1e-4):
    n = x.size
    H = np.zeros((n, n))
    f0 = fn(x)
    for i in range(n):
        ei = np.zeros(n); ei[i] = h
        for j in range(i, n):
            ej = np.zeros(n); ej[j] = h
            if i == j:
                H[i, i] = (fn(x + ei) - 2 * f0 + fn(x - ei)) / h ** 2
            else:
                H[i, j] = H[j, i] = (
                    fn(x + ei + ej) - fn(x + ei - ej)
                    - fn(x - ei + ej) + fn(x - ei - ej)) / (4 * h ** 2)
    return H


def _damped_newton_max(fn, x0, lower, upper, max_iter=60, tol=1e-12):
    x = x0.astype(float).copy()
    v = fn(x)
    for _ in range(max_iter):
        g = _fd_grad(fn, x)
        if np.linalg.norm(g) < 1e-10 * max(1.0, abs(v)):
            return x, v, True
        H = _fd_hess(fn, x)
        try:
            step = np.linalg.solve(H, -g)
            if np.dot(step, g) <= 0:   # not an ascent direction
                step = g
        except np.linalg.LinAlgError:
            step = g
        improved = False
        damp = 1.0
        for _ in range(40):
            cand = np.clip(x + damp * step, lower, upper)
            vc = fn(cand)
            if vc > v:
                x, v, improved = cand, vc, True
                break
            damp *= 0.5
        if not improved:
            return x, v, True  # local stationarity at grid resolution
        if damp * np.linalg.norm(step) < tol:
            return x, v, True
    return x, v, False


# ---------------------------------------------------------------------------
# growth and conjugate-bound sample checks

def check_growth_Ar(pen: PenaltyFn, model, sample) -> Report:
    """r >= -K2 + K1(|eta|^2/2 + sum f(psi) xi lam) at every sampled point."""
    if not sample:
        raise DomainError("empty sample")
    report = Report("growth_Ar")
    for idx, (t, cp) in enumerate(sample):
        xi = _xi_at(model, t)
        rhs = -pen.K2 + pen.K1 * float(
            entropic_rate_values(cp.eta, cp.psi, xi, model.lambda_weights, 1.0))
        lhs = r_eval(pen, t, cp, model)
        margin = lhs - rhs
        report.add(CheckRecord(
            check=f"growth[{idx}]", lhs=rhs, rhs=lhs, stderr=0.0,
            tolerance=1e-12 * max(1.0, abs(lhs)),
            passed=bool(margin >= -1e-12 * max(1.0, abs(lhs))),
            kind="inequality", detail=f"t={t}, margin={margin:.3e}"))
    return report


def check_rstar_bound(pen: PenaltyFn, model, sample) -> Report:
    """r* <= K2 + |z|^2/(2 K1) + K1 sum f*(zt/(K1 xi)) xi lam on the sample."""
    if not sample:
        raise DomainError("empty sample")
    report = Report("rstar_bound")
    for idx, (t, dp) in enumerate(sample):
        xi = _xi_at(model, t)
        lam = model.lambda_weights
        bound = pen.K2 + float(np.dot(dp.z, dp.z)) / (2.0 * pen.K1)
        if dp.z_tilde.size:
            bound += pen.K1 * float(
                np.sum(f_star_eval(dp.z_tilde / (pen.K1 * xi)) * xi * lam))
        lhs = r_star_eval(pen, t, dp, model)
        slack = bound - lhs
        report.add(CheckRecord(
            check=f"rstar_bound[{idx}]", lhs=lhs, rhs=bound, stderr=0.0,
            tolerance=1e-10 * max(1.0, abs(bound)),
            passed=bool(slack >= -1e-10 * max(1.0, abs(bound))),
            kind="inequality", detail=f"t={t}, slack={slack:.3e}"))
    return report
