"""Quadratic-exponential BSDE with jumps: LSMC solver and its checks.

The value process solves

    dV_t = (delta_t V_t - alpha U_t + beta r*(t, Z_t/beta, xi_t Zt_t/beta)) dt
           - Z_t dW_t - int Zt_t(x) mu~(dx, dt),        V_T = alpha_bar Ubar_T.

The solver runs an explicit backward least-squares Monte-Carlo loop: the
conditional expectation of V_{n+1} and the martingale-increment projections
for (Z, Zt) are regressed on basis functions of (W, cumulative counts), then
one fixed-point pass resolves the driver's dependence on V_n. Martingale
increments are variance-reduced by centering V_{n+1} at its regressed mean.

With the convention above, E[V_{n+1} dW_n | F_n] = -Z_n dt, so the increment
regressions carry a minus sign; this is what makes the extracted optimal
drift eta* = Z/beta come out as -1 (not +1) in the canonical Gaussian case.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cost import (CostSpec, gamma_cost, terminal_utility_values,
                   utility_rate_values)
from .errors import (ConfigurationError, DomainError, ModelValidationError,
                     PreconditionError, RegressionError)
from .measure import Control, Estimate, density_process, penalty_rate_path
from .model import (JumpDiffusionModel, PathBundle, TimeGrid, delta_on_grid,
                    discount_factors, poisson_cell_means)
from .penalty import (PenaltyFn, DualPoint, entropic_conjugate_values,
                      f_star_eval, r_star_eval)
from .report import (CheckRecord, Report, identity_check, inequality_check)

ZT_CLIP = 30.0          # |Zt/(kappa beta)| clip inside the exponential driver
CLIP_LIMIT = 1e-4       # abort when clips exceed 0.01% of evaluations


# ---------------------------------------------------------------------------
# regression basis

@dataclass(frozen=True)
class RegressionBasis:
    """Regressors built from (W_t, per-mark cumulative counts).

    kind "polynomial": constant plus monomials of total degree <= degree.
    kind "indicator_bins": quantile bins of the first Brownian coordinate,
    crossed with capped total jump count; offered for stress tests.
    """

    kind: str = "polynomial"
    degree: int = 2
    n_bins: int = 10

    def matrix(self, paths: PathBundle, grid: TimeGrid, n: int) -> np.ndarray:
        w = paths.brownian_levels()[:, n, :]
        c = paths.count_levels()[:, n, :].astype(float)
        state = np.concatenate([w, c], axis=1)
        if self.kind == "polynomial":
            return _polynomial_matrix(state, self.degree)
        if self.kind == "indicator_bins":
            return _indicator_matrix(w[:, 0], c, self.n_bins)
        raise ConfigurationError(f"unknown basis kind {self.kind!r}")

    def describe(self) -> str:
        if self.kind == "polynomial":
            return f"polynomial(degree={self.degree})"
        return f"indicator_bins(n_bins={self.n_bins})"


def _polynomial_matrix(state: np.ndarray, degree: int) -> np.ndarray:
    K, q = state.shape
    cols = [np.ones(K)]
    if degree >= 1:
        cols.extend(state[:, i] for i in range(q))
    if degree >= 2:
        for i in range(q):
            for j in range(i, q):
                cols.append(state[:, i] * state[:, j])
    if degree >= 3:
        raise ConfigurationError("polynomial basis supports degree <= 2")
    return np.column_stack(cols)


def _indicator_matrix(w1: np.ndarray, counts: np.ndarray, n_bins: int) -> np.ndarray:
    edges = np.unique(np.quantile(w1, np.linspace(0, 1, n_bins + 1)[1:-1]))
    w_bin = np.searchsorted(edges, w1)
    n_w = edges.size + 1
    if counts.shape[1]:
        c_cat = np.minimum(counts.sum(axis=1), 2).astype(int)
        cell = w_bin * 3 + c_cat
        n_cells = n_w * 3
    else:
        cell, n_cells = w_bin, n_w
    B = np.zeros((w1.size, n_cells))
    B[np.arange(w1.size), cell] = 1.0
    return B[:, B.any(axis=0)]


def _prune_columns(B: np.ndarray) -> np.ndarray:
    """Drop constant duplicates and zero columns; keep the leading constant."""
    keep = [0] if np.any(B[:, 0] != 0) else []
    for j in range(1, B.shape[1]):
        col = B[:, j]
        if np.ptp(col) > 1e-12:
            keep.append(j)
    if not keep:
        return np.ones((B.shape[0], 1))
    return B[:, keep]


def _fit_step(B: np.ndarray, targets: np.ndarray):
    """Least-squares fitted values for one or more targets.

    Returns fitted values of shape (K, q). Retries once on a reduced basis
    before giving up, per the solver contract.
    """
    K = B.shape[0]
    if B.shape[1] > K / 20:
        raise RegressionError(
            f"basis has {B.shape[1]} columns for {K} paths (limit K/20)")
    Y = targets if targets.ndim == 2 else targets[:, None]
    coef, _, rank, _ = np.linalg.lstsq(B, Y, rcond=None)
    if rank < B.shape[1]:
        B2 = _prune_columns(B)
        coef, _, rank, _ = np.linalg.lstsq(B2, Y, rcond=None)
        if rank < B2.shape[1]:
            raise RegressionError(
                "regression rank-deficient even after basis reduction")
        return B2 @ coef
    return B @ coef


# ---------------------------------------------------------------------------
# driver

class _ClipCounter:
    def __init__(self):
        self.clipped = 0
        self.total = 0

    def frac(self):
        return self.clipped / self.total if self.total else 0.0


def _conjugate_term(pen: PenaltyFn, z, zt, xi, lam, clip: _ClipCounter):
    """beta-less conjugate r*(z/beta', ...) evaluated vectorized with clipping.

    Arguments are already the dual coordinates (z, xi*zt) scaled by 1/beta.
    """
    if pen.is_closed_form:
        if zt.shape[-1]:
            arg = zt / (pen.kappa * xi)
            clip.total += arg.size
            clipped = np.abs(arg) > ZT_CLIP
            clip.clipped += int(np.count_nonzero(clipped))
            arg = np.clip(arg, -ZT_CLIP, ZT_CLIP)
            jump = pen.kappa * np.sum(xi * lam * f_star_eval(arg), axis=-1)
        else:
            jump = 0.0
            clip.total += z.shape[0] if z.ndim else 1
        return np.sum(z * z, axis=-1) / (2.0 * pen.kappa) + jump
    raise DomainError("vectorized driver needs a closed-form penalty")


def driver_eval(spec: CostSpec, pen: PenaltyFn, t: float, v: float, z, z_tilde,
                model: JumpDiffusionModel, u: float | None = None) -> float:
    """Driver delta_t v - alpha U_t + beta r*(t, z/beta, xi zt/beta).

    ``u`` is the utility-rate value at t; it defaults to the spec's rate when
    that rate is state independent.
    """
    if u is None:
        u = spec.u_rate.constant_value()
    if callable(spec.delta):
        delta_t = float(spec.delta(t))
    elif np.ndim(spec.delta) == 0:
        delta_t = float(spec.delta)
    else:
        raise ConfigurationError(
            "pointwise driver evaluation needs a scalar or callable rate")
    z = np.atleast_1d(np.asarray(z, float))
    zt = np.atleast_1d(np.asarray(z_tilde, float))
    xi = np.asarray(model.xi_fn(t), float).reshape(-1)
    dual = DualPoint(z / spec.beta, xi * zt / spec.beta)
    rstar = r_star_eval(pen, t, dual, model)
    return float(delta_t * v - spec.alpha * u + spec.beta * rstar)


def _driver_values(spec, pen, v, z, zt, xi_row, lam, delta_t, u_row,
                   clip: _ClipCounter):
    """Vectorized driver across paths at one time step."""
    conj = _conjugate_term(pen, z / spec.beta, xi_row * zt / spec.beta,
                           xi_row, lam, clip)
    return delta_t * v - spec.alpha * u_row + spec.beta * conj


# ---------------------------------------------------------------------------
# solution container

@dataclass
class BSDESolution:
    V: np.ndarray            # (K, N+1)
    Z: np.ndarray            # (K, N, d)
    Z_tilde: np.ndarray      # (K, N, m)
    basis: RegressionBasis
    residuals: np.ndarray    # (N,) one-step RMS residuals
    relative_residuals: np.ndarray
    v0: float
    v0_stderr: float
    clip_fraction: float

    @property
    def n_paths(self):
        return self.V.shape[0]

    @property
    def n_steps(self):
        return self.V.shape[1] - 1

    def space_proxies(self, model: JumpDiffusionModel, grid: TimeGrid) -> dict:
        """Finite-sample stand-ins for the solution-space memberships."""
        out = {}
        with np.errstate(over="ignore"):
            for g in (1.0, 2.0):
                sup_exp = np.exp(g * np.abs(self.V)).max(axis=1)
                out[f"exp_moment[gamma={g:g}]"] = float(sup_exp.mean())
            qz = np.sum(np.sum(self.Z ** 2, axis=2) * grid.dt, axis=1)
            xi = model.xi_on_grid(grid)[:-1]
            qzt = np.sum(np.sum(self.Z_tilde ** 2 * xi * model.lambda_weights,
                                axis=2) * grid.dt, axis=1)
            for p in (1.0, 2.0, 4.0):
                out[f"z_norm[p={p:g}]"] = float(np.mean(qz ** (p / 2.0)))
                out[f"zt_norm[p={p:g}]"] = float(np.mean(qzt ** (p / 2.0)))
        return out


# ---------------------------------------------------------------------------
# solver

def solve_lsmc(spec: CostSpec, pen: PenaltyFn, paths: PathBundle,
               model: JumpDiffusionModel, grid: TimeGrid,
               basis: RegressionBasis | None = None) -> BSDESolution:
    """Backward least-squares Monte-Carlo solve of the value-process BSDE."""
    basis = basis or RegressionBasis()
    K, N, d, m = paths.n_paths, grid.n_steps, model.d, model.m
    dt = grid.dt
    xi = model.xi_on_grid(grid)[:-1]
    lam = model.lambda_weights
    dvals = delta_on_grid(spec.delta, grid)
    cell_means = poisson_cell_means(model, grid)

    u_vals = (utility_rate_values(spec, paths, grid) if spec.alpha != 0.0
              else np.zeros((K, N)))
    if not np.all(np.isfinite(u_vals)):
        raise ModelValidationError("utility rate non-finite along the paths")

    V = np.empty((K, N + 1))
    V[:, N] = spec.alpha_bar * terminal_utility_values(spec, paths, grid)
    if not np.all(np.isfinite(V[:, N])):
        raise ModelValidationError("terminal utility non-finite on some paths")
    Z = np.zeros((K, N, d))
    Zt = np.zeros((K, N, m))
    residuals = np.empty(N)
    rel_residuals = np.empty(N)
    drivers = np.empty((K, N))
    clip = _ClipCounter()

    for n in range(N - 1, -1, -1):
        B = _prune_columns(basis.matrix(paths, grid, n))
        v_next = V[:, n + 1]
        cv = _fit_step(B, v_next)[:, 0]
        centered = v_next - cv

        targets = [centered[:, None] * paths.dW[:, n, :]]
        if m:
            comp = paths.jump_counts[:, n, :] - cell_means[n]
            targets.append(centered[:, None] * comp)
        fitted = _fit_step(B, np.concatenate(targets, axis=1))
        Z[:, n, :] = -fitted[:, :d] / dt[n]
        if m:
            denom = xi[n] * lam * dt[n]
            safe = np.where(denom > 0, denom, 1.0)
            Zt[:, n, :] = np.where(denom > 0, -fitted[:, d:] / safe, 0.0)

        v_est = cv
        for _ in range(2):    # explicit value plus one fixed-point pass on v
            g = _driver_values(spec, pen, v_est, Z[:, n, :], Zt[:, n, :],
                               xi[n], lam, dvals[n], u_vals[:, n], clip)
            v_est = cv - g * dt[n]
        V[:, n] = v_est
        drivers[:, n] = g

        mart = np.einsum("kd,kd->k", Z[:, n, :], paths.dW[:, n, :])
        if m:
            mart += np.einsum("km,km->k", Zt[:, n, :],
                              paths.jump_counts[:, n, :] - cell_means[n])
        resid = v_next - V[:, n] - g * dt[n] + mart
        residuals[n] = float(np.sqrt(np.mean(resid ** 2)))
        spread = float(np.std(v_next))
        rel_residuals[n] = residuals[n] / spread if spread > 1e-14 else 0.0

    if clip.frac() > CLIP_LIMIT:
        raise ModelValidationError(
            f"driver clipped {clip.frac():.2%} of exponential arguments; "
            "increase beta or cap the utilities")

    # stderr of V_0 from the raw pathwise estimate V_T - int driver dt; the
    # martingale-corrected version looks tighter but is overfit in-sample and
    # understates the bundle-to-bundle dispersion of the estimator
    pathwise = V[:, N] - drivers @ dt
    v0 = float(np.mean(V[:, 0]))
    v0_stderr = float(np.std(pathwise, ddof=1) / np.sqrt(K))

    return BSDESolution(V=V, Z=Z, Z_tilde=Zt, basis=basis,
                        residuals=residuals, relative_residuals=rel_residuals,
                        v0=v0, v0_stderr=v0_stderr, clip_fraction=clip.frac())


def closed_form_entropic(spec: CostSpec, paths: PathBundle,
                         grid: TimeGrid) -> Estimate:
    """Exponential-transform value V_0 = -beta log E[exp(-aggregate/beta)].

    Valid for zero discounting and the plain entropic rate; the stderr comes
    from the delta method on the log of the sampled mean.
    """
    dvals = delta_on_grid(spec.delta, grid)
    if np.any(dvals != 0.0):
        raise PreconditionError("closed form requires zero discounting")
    agg = spec.alpha_bar * terminal_utility_values(spec, paths, grid)
    if spec.alpha != 0.0:
        agg = agg + spec.alpha * utility_rate_values(spec, paths, grid) @ grid.dt
    with np.errstate(over="ignore"):
        x = np.exp(-agg / spec.beta)
    if not np.all(np.isfinite(x)):
        raise ModelValidationError(
            "exponential transform overflowed; increase beta or cap utilities")
    m = float(x.mean())
    se = float(np.std(x, ddof=1) / np.sqrt(paths.n_paths))
    return Estimate(-spec.beta * np.log(m), spec.beta * se / m, paths.n_paths)


def extract_optimal_control(sol: BSDESolution, pen: PenaltyFn,
                            model: JumpDiffusionModel, grid: TimeGrid,
                            beta: float, residual_threshold: float = 0.95
                            ) -> Control:
    """Optimal feedback control from the regressed (Z, Zt) coefficients.

    For the (scaled) entropic rate the subgradient inversion is explicit:
    eta* = Z/(kappa beta) and psi* = exp(Zt/(kappa beta)) - 1.
    """
    worst = float(np.max(sol.relative_residuals, initial=0.0))
    if worst > residual_threshold:
        raise PreconditionError(
            f"regression residuals too large to trust extraction ({worst:.3f})")
    if not pen.is_closed_form:
        raise DomainError("control extraction is implemented for the "
                          "entropic family; custom rates need argmax_control")
    eta = sol.Z / (pen.kappa * beta)
    arg = np.clip(sol.Z_tilde / (pen.kappa * beta), -ZT_CLIP, ZT_CLIP)
    psi = np.expm1(arg)
    return Control.from_arrays(eta, psi, tag="extracted")


# ---------------------------------------------------------------------------
# checks

def duality_check(sol: BSDESolution, extracted: Control, random_ctrls,
                  spec: CostSpec, pen: PenaltyFn, paths: PathBundle,
                  model: JumpDiffusionModel, grid: TimeGrid,
                  optimal_rel_tol: float = 0.02) -> Report:
    """V_0 <= Gamma(Q) for every sampled Q; equality at the extracted one."""
    rep = Report("duality")
    v0, v0_se = sol.v0, sol.v0_stderr
    for idx, ctrl in enumerate(random_ctrls):
        est = gamma_cost(spec, ctrl, pen, paths, model, grid)
        rep.add(inequality_check(
            f"duality[{idx}:{ctrl.tag}]", v0, est.mean, v0_se + est.stderr))
    est_star = gamma_cost(spec, extracted, pen, paths, model, grid)
    rep.add(identity_check(
        "duality[extracted]", v0, est_star.mean, v0_se + est_star.stderr,
        floor=optimal_rel_tol * abs(v0),
        detail=f"V0={v0:.6g}, Gamma(Q*)={est_star.mean:.6g}"))
    return rep


def _j_process(sol: BSDESolution, ctrl: Control, spec: CostSpec,
               pen: PenaltyFn, paths: PathBundle, model: JumpDiffusionModel,
               grid: TimeGrid) -> np.ndarray:
    """J^Q_n = S_n V_n + alpha sum_{j<n} S_j U_j dt + beta sum_{j<n} S_j r_j dt."""
    S = spec.discount(grid, paths).S[0]
    rates = penalty_rate_path(ctrl, pen, paths, model, grid)
    rates = np.broadcast_to(rates, (paths.n_paths, grid.n_steps))
    u_vals = (utility_rate_values(spec, paths, grid) if spec.alpha != 0.0
              else np.zeros((paths.n_paths, grid.n_steps)))
    run = (spec.alpha * u_vals + spec.beta * rates) * S[:-1] * grid.dt
    accum = np.concatenate(
        [np.zeros((paths.n_paths, 1)), np.cumsum(run, axis=1)], axis=1)
    return S * sol.V + accum


def martingale_check(sol: BSDESolution, ctrl: Control, spec: CostSpec,
                     pen: PenaltyFn, paths: PathBundle,
                     model: JumpDiffusionModel, grid: TimeGrid,
                     mode: str = "submartingale", per_step_sigma=5.0) -> Report:
    """Drift of J^Q under Q via density-weighted increment means.

    mode "martingale": total drift compatible with zero (optimal control).
    mode "submartingale": total drift bounded below by -3 stderr.
    mode "strict_positive": total drift significantly positive (perturbed
    control away from the optimum).
    """
    rep = Report(f"martingale[{ctrl.tag},{mode}]")
    dens = density_process(ctrl, paths, model, grid)
    w = dens.terminal
    J = _j_process(sol, ctrl, spec, pen, paths, model, grid)
    K = paths.n_paths

    totals = w * (J[:, -1] - J[:, 0])
    tot_mean = float(totals.mean())
    tot_se = float(np.std(totals, ddof=1) / np.sqrt(K))
    if mode == "martingale":
        rep.add(identity_check("J_drift_total", tot_mean, 0.0, tot_se))
    elif mode == "submartingale":
        rep.add(inequality_check("J_drift_total_nonneg", 0.0, tot_mean, tot_se))
    elif mode == "strict_positive":
        rep.add(CheckRecord(
            "J_drift_total_positive", tot_mean, 3.0 * tot_se, tot_se,
            3.0 * tot_se, bool(tot_mean > 3.0 * tot_se), "inequality",
            detail="perturbed control must show positive drift"))
    else:
        raise ConfigurationError(f"unknown mode {mode!r}")

    incr = w[:, None] * np.diff(J, axis=1)
    means = incr.mean(axis=0)
    ses = incr.std(axis=0, ddof=1) / np.sqrt(K)
    if mode == "martingale":
        worst = int(np.argmax(np.abs(means) / np.where(ses > 0, ses, 1.0)))
        rep.add(identity_check(f"J_drift_step[{worst}]", float(means[worst]),
                               0.0, float(ses[worst]), n_sigma=per_step_sigma))
    elif mode == "submartingale":
        worst = int(np.argmin(means + per_step_sigma * ses))
        rep.add(inequality_check(
            f"J_drift_step[{worst}]", 0.0, float(means[worst]),
            float(ses[worst]), n_sigma=per_step_sigma))
    return rep


@dataclass
class TransformDiagnostics:
    sup_moments: dict
    quadratic_variation: dict
    i_minus_min: float
    report: Report = field(default=None)


def transform_diagnostics(sol: BSDESolution, spec: CostSpec, pen: PenaltyFn,
                          model: JumpDiffusionModel, grid: TimeGrid,
                          paths: PathBundle) -> TransformDiagnostics:
    """Exponential-transform integrability diagnostics.

    Builds K+- = exp(+-C V + C int (alpha|U| + K2 beta) + C int delta |V|)
    with C = 1/(K1 beta), reports sup-norm sample moments, the quadratic
    variation of the associated martingales, and the pathwise positivity of
    the I- drift (the conjugate-bound inequality evaluated pointwise).
    """
    C = 1.0 / (pen.K1 * spec.beta)
    K, N = sol.n_paths, sol.n_steps
    dt = grid.dt
    dvals = delta_on_grid(spec.delta, grid)
    u_vals = (utility_rate_values(spec, paths, grid) if spec.alpha != 0.0
              else np.zeros((K, N)))
    xi = model.xi_on_grid(grid)[:-1]
    lam = model.lambda_weights

    run = (spec.alpha * np.abs(u_vals) + pen.K2 * spec.beta) * dt \
        + dvals[:-1] * np.abs(sol.V[:, :-1]) * dt
    accum = np.concatenate([np.zeros((K, 1)), np.cumsum(run, axis=1)], axis=1)

    rep = Report("transform_diagnostics")
    sup_moments = {}
    with np.errstate(over="ignore"):
        for sign, label in ((1.0, "+"), (-1.0, "-")):
            Y = sign * C * sol.V + C * accum
            sup_y = Y.max(axis=1)
            for p in (1.0, 2.0, 4.0):
                val = float(np.mean(np.exp(p * sup_y)))
                sup_moments[f"K{label}^{p:g}"] = val
                rep.add(CheckRecord(
                    f"sup_moment[K{label},p={p:g}]", val, val, 0.0, 0.0,
                    bool(np.isfinite(val)), "identity",
                    detail="finite sample sup-norm moment"))

        qv = {}
        z_q = np.sum(np.sum((C * sol.Z) ** 2, axis=2) * dt, axis=1)
        for sign, label in ((1.0, "+"), (-1.0, "-")):
            if model.m:
                incr = (np.expm1(sign * C * sol.Z_tilde)) ** 2 \
                    * xi * lam * dt[:, None]
                j_q = incr.sum(axis=(1, 2))
            else:
                j_q = 0.0
            total = z_q + j_q
            qv[f"M{label}"] = float(np.mean(total))
            rep.add(CheckRecord(
                f"qv[M{label}]", qv[f"M{label}"], qv[f"M{label}"], 0.0, 0.0,
                bool(np.all(np.isfinite(total))), "identity",
                detail="sample quadratic variation"))

    # pathwise I- increments: delta,U terms + conjugate-bound slack, all >= 0
    clip = _ClipCounter()
    conj = _conjugate_term(pen, sol.Z / spec.beta, xi * sol.Z_tilde / spec.beta,
                           xi, lam, clip)
    slack = -C * spec.beta * conj + C * pen.K2 * spec.beta \
        + 0.5 * np.sum((C * sol.Z) ** 2, axis=2)
    if model.m:
        arg = np.clip(C * sol.Z_tilde, -ZT_CLIP, ZT_CLIP)
        slack = slack + np.sum(f_star_eval(arg) * xi * lam, axis=2)
    incr = (C * dvals[:-1] * (np.abs(sol.V[:, :-1]) - sol.V[:, :-1])
            + C * spec.alpha * (np.abs(u_vals) + u_vals) + slack) * dt
    i_min = float(incr.min())
    scale = max(1.0, float(np.abs(incr).max()))
    rep.add(inequality_check("I_minus_increments_nonneg", 0.0, i_min,
                             1e-9 * scale / 3.0,
                             detail="pointwise conjugate-bound slack"))
    return TransformDiagnostics(sup_moments, qv, i_min, rep)


def comparison_check(spec1: CostSpec, spec2: CostSpec, pen: PenaltyFn,
                     paths: PathBundle, model: JumpDiffusionModel,
                     grid: TimeGrid, basis: RegressionBasis | None = None,
                     expected_gap: float | None = None,
                     gap_floor: float = 0.0) -> Report:
    """Ordered utility data must give ordered value processes.

    Compares regression-state means at every grid time; raw paths are not
    comparable because the LSMC value is defined up to basis projection.
    When ``expected_gap`` is given, the time-0 difference V2_0 - V1_0 is also
    checked against it (constant-shift oracle).
    """
    u1 = utility_rate_values(spec1, paths, grid) if spec1.alpha != 0 else 0.0
    u2 = utility_rate_values(spec2, paths, grid) if spec2.alpha != 0 else 0.0
    if np.any(spec1.alpha * np.asarray(u1) > spec2.alpha * np.asarray(u2) + 1e-12):
        raise PreconditionError("running utilities are not ordered pathwise")
    ub1 = terminal_utility_values(spec1, paths, grid)
    ub2 = terminal_utility_values(spec2, paths, grid)
    if np.any(spec1.alpha_bar * ub1 > spec2.alpha_bar * ub2 + 1e-12):
        raise PreconditionError("terminal utilities are not ordered pathwise")

    sol1 = solve_lsmc(spec1, pen, paths, model, grid, basis)
    sol2 = solve_lsmc(spec2, pen, paths, model, grid, basis)
    rep = Report("comparison")
    K = paths.n_paths
    diffs = sol1.V - sol2.V
    worst_idx, worst_z = 0, -np.inf
    for n in range(grid.n_steps + 1):
        dmean = float(diffs[:, n].mean())
        dse = float(np.std(diffs[:, n], ddof=1) / np.sqrt(K))
        z = dmean / dse if dse > 0 else (np.inf if dmean > 0 else -np.inf)
        if z > worst_z:
            worst_z, worst_idx = z, n
    dmean = float(diffs[:, worst_idx].mean())
    dse = float(np.std(diffs[:, worst_idx], ddof=1) / np.sqrt(K))
    rep.add(inequality_check(
        f"comparison[worst t{worst_idx}]", dmean, 0.0, dse,
        detail="max over grid times of mean(V1 - V2)"))
    if expected_gap is not None:
        gap = -diffs[:, 0]
        rep.add(identity_check(
            "comparison[shift gap]", float(gap.mean()), float(expected_gap),
            float(np.std(gap, ddof=1) / np.sqrt(K)), floor=gap_floor))
    return rep


def uniqueness_check(spec: CostSpec, pen: PenaltyFn, model: JumpDiffusionModel,
                     grid: TimeGrid, n_paths: int, seeds,
                     basis: RegressionBasis | None = None) -> Report:
    """Independent-seed solver runs must agree on V_0 within combined noise."""
    from .model import simulate_paths
    rep = Report("uniqueness")
    results = []
    for seed in seeds:
        paths = simulate_paths(model, grid, n_paths, seed)
        sol = solve_lsmc(spec, pen, paths, model, grid, basis)
        results.append((sol.v0, sol.v0_stderr))
    for i in range(1, len(results)):
        v_a, se_a = results[0]
        v_b, se_b = results[i]
        rep.add(identity_check(
            f"v0_seed{seeds[0]}_vs_seed{seeds[i]}", v_a, v_b, se_a + se_b))
    return rep


def driver_convexity_report(spec: CostSpec, pen: PenaltyFn,
                            model: JumpDiffusionModel, t: float,
                            n_pairs: int = 1000, seed: int = 0,
                            box: float = 3.0) -> Report:
    """Midpoint convexity of the driver in (z, zt) at random pairs."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    d, m = model.d, model.m
    rep = Report("driver_convexity")
    worst = -np.inf
    for _ in range(n_pairs):
        z1, z2 = rng.uniform(-box, box, (2, d))
        zt1, zt2 = rng.uniform(-box, box, (2, m)) if m else (np.zeros(0),) * 2
        g1 = driver_eval(spec, pen, t, 0.0, z1, zt1, model, u=0.0)
        g2 = driver_eval(spec, pen, t, 0.0, z2, zt2, model, u=0.0)
        gm = driver_eval(spec, pen, t, 0.0, (z1 + z2) / 2, (zt1 + zt2) / 2,
                         model, u=0.0)
        worst = max(worst, gm - 0.5 * (g1 + g2))
    rep.add(inequality_check("driver_midpoint_convexity", worst, 0.0,
                             1e-10 / 3.0))
    return rep
