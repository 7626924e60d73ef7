"""Reference probability model and path simulation.

The reference measure carries a d-dimensional Brownian motion and a finite
family of jump marks. Mark i arrives as an inhomogeneous Poisson stream with
intensity xi_t(x_i) * lambda_i, where the compensator density xi is a
deterministic function of time bounded by 0 < xi <= C_nu. Paths are simulated
on a fixed grid: Gaussian increments per step and Poisson counts per
(step, mark) cell with the left-endpoint intensity rule.

Reproducibility: path k consumes its own counter-based Philox substream with
key ``(seed << 64) + k``, so bundles are bit-identical for identical
(seed, model, grid, n_paths) regardless of how work is scheduled.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigurationError, ModelValidationError

MAX_MARKS = 16
_BUNDLE_MAGIC = b"RBSDE1"
_BUNDLE_VERSION = 1
SUBSTREAM_RULE = "philox4x64:key=(seed<<64)+path_index"


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing grid 0 = t_0 < ... < t_N = T."""

    times: np.ndarray
    uniform: bool

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise ConfigurationError("time grid needs at least one step")
        if t[0] != 0.0:
            raise ConfigurationError("time grid must start at 0")
        if not np.all(np.diff(t) > 0):
            raise ConfigurationError("time grid must be strictly increasing")
        object.__setattr__(self, "times", t)

    @classmethod
    def regular(cls, horizon: float, n_steps: int) -> "TimeGrid":
        if n_steps < 1 or not np.isfinite(horizon) or horizon <= 0:
            raise ConfigurationError(
                f"bad grid: horizon={horizon}, n_steps={n_steps}")
        return cls(np.linspace(0.0, horizon, n_steps + 1), True)

    @classmethod
    def from_times(cls, times) -> "TimeGrid":
        t = np.asarray(times, dtype=float)
        dt = np.diff(t)
        uniform = bool(dt.size > 0 and np.allclose(dt, dt[0]))
        return cls(t, uniform)

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def dt(self) -> np.ndarray:
        """Step lengths, shape (N,)."""
        return np.diff(self.times)

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.times, other.times)

    def __hash__(self):
        return hash((self.times.tobytes(), self.uniform))


@dataclass(frozen=True)
class JumpDiffusionModel:
    """Reference measure: Brownian dimension, marks, weights and density xi.

    ``xi_fn(t)`` returns the compensator density per mark at time t, as an
    array of shape (m,); it must stay in (0, xi_bound].
    """

    d: int
    marks: np.ndarray            # (m, d), nonzero rows
    lambda_weights: np.ndarray   # (m,), nonnegative rates
    xi_fn: Callable[[float], np.ndarray]
    xi_bound: float

    def __post_init__(self):
        if self.d < 1:
            raise ModelValidationError("Brownian dimension must be >= 1")
        marks = np.atleast_2d(np.asarray(self.marks, dtype=float))
        if marks.size == 0:
            marks = marks.reshape(0, self.d)
        lam = np.asarray(self.lambda_weights, dtype=float).reshape(-1)
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "lambda_weights", lam)
        if marks.shape[0] != lam.size:
            raise ModelValidationError(
                f"{marks.shape[0]} marks but {lam.size} lambda weights")
        if marks.shape[0] > MAX_MARKS:
            raise ModelValidationError(
                f"at most {MAX_MARKS} marks supported, got {marks.shape[0]}")
        if marks.shape[0] and marks.shape[1] != self.d:
            raise ModelValidationError("marks must live in R^d")
        if marks.shape[0] and np.any(np.all(marks == 0.0, axis=1)):
            raise ModelValidationError("marks must be nonzero")
        if not np.all(np.isfinite(lam)) or np.any(lam < 0):
            raise ModelValidationError("lambda weights must be finite and >= 0")
        if not (np.isfinite(self.xi_bound) and self.xi_bound > 0):
            raise ModelValidationError("xi bound C_nu must be positive finite")

    @property
    def m(self) -> int:
        return self.marks.shape[0]

    @classmethod
    def constant_xi(cls, d, marks, lambda_weights, xi=1.0, xi_bound=None):
        """Model with time-constant density xi per mark."""
        marks = np.atleast_2d(np.asarray(marks, dtype=float))
        m = marks.shape[0] if marks.size else 0
        xi_vec = np.broadcast_to(np.asarray(xi, dtype=float), (m,)).copy()
        bound = float(xi_bound) if xi_bound is not None else float(
            xi_vec.max(initial=1.0))
        return cls(d, marks, lambda_weights, lambda t, v=xi_vec: v, bound)

    def xi_on_grid(self, grid: TimeGrid) -> np.ndarray:
        """xi evaluated at every grid time, shape (N+1, m). Validates bounds."""
        out = np.empty((grid.n_steps + 1, self.m))
        for n, t in enumerate(grid.times):
            v = np.asarray(self.xi_fn(t), dtype=float).reshape(-1)
            if v.size != self.m:
                raise ModelValidationError(
                    f"xi_fn returned {v.size} values for {self.m} marks")
            out[n] = v
        if not np.all(np.isfinite(out)):
            raise ModelValidationError("xi is non-finite on the grid")
        if np.any(out <= 0.0) or np.any(out > self.xi_bound + 1e-15):
            raise ModelValidationError(
                "xi must satisfy 0 < xi <= C_nu on the grid")
        total = out * self.lambda_weights
        if not np.all(np.isfinite(total.sum(axis=1))):
            raise ModelValidationError("total jump intensity is not finite")
        return out

    def validate_on(self, grid: TimeGrid):
        self.xi_on_grid(grid)

    def key(self, grid: TimeGrid) -> bytes:
        """Stable identity used for bundle caching."""
        return b"|".join([
            str(self.d).encode(),
            self.marks.tobytes(),
            self.lambda_weights.tobytes(),
            self.xi_on_grid(grid).tobytes(),
            struct.pack("<d", self.xi_bound),
        ])


@dataclass
class PathBundle:
    """Simulated increments: dW per (path, step) and jump counts per cell."""

    dW: np.ndarray           # (K, N, d)
    jump_counts: np.ndarray  # (K, N, m), uint32
    seed: int
    substream_rule: str = SUBSTREAM_RULE
    _w_levels: np.ndarray | None = field(default=None, repr=False)
    _c_levels: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_paths(self) -> int:
        return self.dW.shape[0]

    @property
    def n_steps(self) -> int:
        return self.dW.shape[1]

    @property
    def d(self) -> int:
        return self.dW.shape[2]

    @property
    def m(self) -> int:
        return self.jump_counts.shape[2]

    def brownian_levels(self) -> np.ndarray:
        """W at grid times, shape (K, N+1, d); W_0 = 0."""
        if self._w_levels is None:
            K, N, d = self.dW.shape
            w = np.zeros((K, N + 1, d))
            np.cumsum(self.dW, axis=1, out=w[:, 1:, :])
            self._w_levels = w
        return self._w_levels

    def count_levels(self) -> np.ndarray:
        """Cumulative jump counts at grid times, shape (K, N+1, m)."""
        if self._c_levels is None:
            K, N, m = self.jump_counts.shape
            c = np.zeros((K, N + 1, m), dtype=np.int64)
            np.cumsum(self.jump_counts, axis=1, out=c[:, 1:, :])
            self._c_levels = c
        return self._c_levels


def poisson_cell_means(model: JumpDiffusionModel, grid: TimeGrid) -> np.ndarray:
    """Expected counts per (step, mark) cell, left-endpoint rule; shape (N, m)."""
    xi = model.xi_on_grid(grid)
    return xi[:-1] * model.lambda_weights * grid.dt[:, None]


def simulate_paths(model: JumpDiffusionModel, grid: TimeGrid,
                   n_paths: int, seed: int) -> PathBundle:
    """Draw a path bundle under the reference measure.

    Per-path substreams make the result independent of batching or thread
    count; the loop below is just one schedule of an embarrassingly parallel
    computation.
    """
    if n_paths < 1:
        raise ConfigurationError(f"n_paths must be >= 1, got {n_paths}")
    if grid.n_steps < 1:
        raise ConfigurationError("empty time grid")
    model.validate_on(grid)

    N, d, m = grid.n_steps, model.d, model.m
    means = poisson_cell_means(model, grid)
    sqrt_dt = np.sqrt(grid.dt)[:, None]

    dW = np.empty((n_paths, N, d))
    counts = np.zeros((n_paths, N, m), dtype=np.uint32)
    base_key = int(seed) << 64
    no_jumps = m == 0 or not np.any(means > 0)
    for k in range(n_paths):
        gen = np.random.Generator(np.random.Philox(key=base_key + k))
        dW[k] = gen.standard_normal((N, d)) * sqrt_dt
        if not no_jumps:
            counts[k] = gen.poisson(means)
    return PathBundle(dW=dW, jump_counts=counts, seed=int(seed))


@dataclass
class DiscountPath:
    """Pathwise discount factors S at grid times with the rate's sup norm."""

    S: np.ndarray          # (K, N+1), broadcast view when delta is deterministic
    delta_sup: float
    delta_on_grid: np.ndarray  # (N+1,)


def delta_on_grid(delta, grid: TimeGrid) -> np.ndarray:
    """Normalize a rate spec (scalar, callable or array) to grid values."""
    if callable(delta):
        vals = np.array([float(delta(t)) for t in grid.times])
    else:
        arr = np.asarray(delta, dtype=float)
        if arr.ndim == 0:
            vals = np.full(grid.n_steps + 1, float(arr))
        elif arr.shape == (grid.n_steps + 1,):
            vals = arr.copy()
        else:
            raise ConfigurationError(
                f"delta array must have shape ({grid.n_steps + 1},)")
    if not np.all(np.isfinite(vals)):
        raise ModelValidationError("discount rate is non-finite on the grid")
    if np.any(vals < 0):
        raise ModelValidationError("discount rate must be nonnegative")
    return vals


def discount_factors(delta, grid: TimeGrid, paths: PathBundle) -> DiscountPath:
    """S_n = exp(-sum_{j<n} delta_{t_j} dt_j), broadcast across paths."""
    vals = delta_on_grid(delta, grid)
    acc = np.concatenate([[0.0], np.cumsum(vals[:-1] * grid.dt)])
    S_row = np.exp(-acc)
    S = np.broadcast_to(S_row, (paths.n_paths, grid.n_steps + 1))
    return DiscountPath(S=S, delta_sup=float(vals.max()), delta_on_grid=vals)


def write_bundle(path, bundle: PathBundle):
    """Binary export: magic, u32 version/n_paths/N/d/m, u64 seed, then payload.

    Payload is row-major float64 dW followed by row-major uint32 jump counts,
    little-endian throughout.
    """
    K, N, d = bundle.dW.shape
    m = bundle.jump_counts.shape[2]
    with open(path, "wb") as fh:
        fh.write(_BUNDLE_MAGIC)
        fh.write(struct.pack("<IIIII", _BUNDLE_VERSION, K, N, d, m))
        fh.write(struct.pack("<Q", bundle.seed % (1 << 64)))
        fh.write(np.ascontiguousarray(bundle.dW, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(bundle.jump_counts, dtype="<u4").tobytes())


def read_bundle(path) -> PathBundle:
    with open(path, "rb") as fh:
        magic = fh.read(6)
        if magic != _BUNDLE_MAGIC:
            raise ConfigurationError(f"not a path-bundle file: magic={magic!r}")
        version, K, N, d, m = struct.unpack("<IIIII", fh.read(20))
        if version != _BUNDLE_VERSION:
            raise ConfigurationError(f"unsupported bundle version {version}")
        (seed,) = struct.unpack("<Q", fh.read(8))
        dW = np.frombuffer(fh.read(K * N * d * 8), dtype="<f8").reshape(K, N, d)
        counts = np.frombuffer(fh.read(K * N * m * 4), dtype="<u4").reshape(K, N, m)
    return PathBundle(dW=dW.copy(), jump_counts=counts.copy(), seed=int(seed))
