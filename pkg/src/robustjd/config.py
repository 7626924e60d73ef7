"""Run configuration: flat sectioned key-value files with explicit types.

The format is deliberately boring: ``[section]`` headers, one ``key = value``
per line, values parsed as Python literals (numbers, quoted strings, lists,
None). Tables (time-varying xi, per-step discount rates) are inline arrays.
Unknown sections or keys are hard errors, validation collects every problem
before reporting, and a parsed configuration re-serializes canonically so
that load -> serialize -> load is the identity.
"""

from __future__ import annotations

import ast
import hashlib
from dataclasses import dataclass

import numpy as np

from .bsde import RegressionBasis
from .cost import (CostSpec, StateFunction)
from .errors import ConfigurationError
from .measure import Control
from .model import JumpDiffusionModel, TimeGrid
from .penalty import PenaltyFn
from .suite import DEFAULT_EXPERIMENTS, SuiteScale
from .tree import TreeModel

_UNSET = object()

# section -> key -> (kind, default); kind is a coarse shape tag used both for
# validation and for canonical serialization order
SCHEMA = {
    "model": {
        "d": ("int", 1),
        "marks": ("matrix", ((1.0,),)),
        "lambda_weights": ("vector", (2.0,)),
        "xi": ("scalar_or_table", 1.0),
        "xi_bound": ("number", 1.0),
    },
    "grid": {
        "horizon": ("number", 1.0),
        "n_steps": ("int", 50),
    },
    "cost": {
        "alpha": ("number", 0.0),
        "alpha_bar": ("number", 1.0),
        "beta": ("number", 1.0),
        "delta": ("scalar_or_vector", 0.0),
        "u_kind": ("str", "zero"),
        "u_a": ("vector", ()),
        "u_b": ("number", 0.0),
        "u_cap": ("number_or_none", None),
        "ubar_kind": ("str", "linear_w"),
        "ubar_a": ("vector", (1.0,)),
        "ubar_b": ("number", 0.0),
        "ubar_cap": ("number_or_none", None),
    },
    "penalty": {
        "kind": ("str", "entropic"),
        "kappa": ("number", 1.0),
        "K1": ("number_or_none", None),
        "K2": ("number_or_none", None),
    },
    "solver": {
        "n_paths": ("int", 200_000),
        "seed": ("int", 20250809),
        "basis_kind": ("str", "polynomial"),
        "basis_degree": ("int", 2),
        "basis_bins": ("int", 10),
    },
    "tree": {
        "depth": ("int", 8),
        "eta_min": ("number", -2.5),
        "eta_max": ("number", 2.5),
        "eta_points": ("int", 41),
        "psi_min": ("number", -0.9),
        "psi_max": ("number", 2.0),
        "psi_points": ("int", 41),
    },
    "control": {
        "eta": ("vector", (0.0,)),
        "psi": ("vector", ()),
        "tag": ("str", "config-control"),
    },
    "suite": {
        "experiments": ("str_list", tuple(DEFAULT_EXPERIMENTS)),
        "tolerance_overrides": ("override_list", ()),
    },
}

_STATE_FN_KINDS = ("zero", "constant", "linear_w", "linear_counts",
                   "linear_state", "capped_exp")


def _check_kind(kind, value):
    """Return (ok, canonical_value)."""
    if kind == "int":
        return isinstance(value, int) and not isinstance(value, bool), value
    if kind == "number":
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        return ok, float(value) if ok else value
    if kind == "number_or_none":
        if value is None:
            return True, None
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        return ok, float(value) if ok else value
    if kind == "str":
        return isinstance(value, str), value
    if kind == "vector":
        ok = isinstance(value, (list, tuple)) and all(
            isinstance(v, (int, float)) and not isinstance(v, bool)
            for v in value)
        return ok, tuple(float(v) for v in value) if ok else value
    if kind == "matrix":
        ok = isinstance(value, (list, tuple)) and all(
            isinstance(r, (list, tuple)) and all(
                isinstance(v, (int, float)) for v in r) for r in value)
        return ok, tuple(tuple(float(v) for v in r) for r in value) if ok \
            else value
    if kind == "scalar_or_vector":
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return True, float(value)
        return _check_kind("vector", value)
    if kind == "scalar_or_table":
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return True, float(value)
        if value and isinstance(value, (list, tuple)) \
                and isinstance(value[0], (list, tuple)):
            return _check_kind("matrix", value)
        return _check_kind("vector", value)
    if kind == "str_list":
        ok = isinstance(value, (list, tuple)) and all(
            isinstance(v, str) for v in value)
        return ok, tuple(value) if ok else value
    if kind == "override_list":
        ok = isinstance(value, (list, tuple)) and all(
            isinstance(v, (list, tuple)) and len(v) == 2
            and isinstance(v[0], str) and isinstance(v[1], (int, float))
            for v in value)
        return (ok, tuple((str(n), float(t)) for n, t in value)) if ok \
            else (ok, value)
    raise AssertionError(f"unhandled schema kind {kind}")


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration; ``sections`` holds canonical plain values."""

    sections: tuple   # tuple of (section, tuple of (key, value))

    def get(self, section: str, key: str):
        for sec, items in self.sections:
            if sec == section:
                for k, v in items:
                    if k == key:
                        return v
        raise KeyError(f"[{section}] {key}")

    # -- builders -----------------------------------------------------------
    def build_grid(self) -> TimeGrid:
        return TimeGrid.regular(self.get("grid", "horizon"),
                                self.get("grid", "n_steps"))

    def build_model(self) -> JumpDiffusionModel:
        marks = np.asarray(self.get("model", "marks"), float)
        lam = np.asarray(self.get("model", "lambda_weights"), float)
        xi = self.get("model", "xi")
        bound = self.get("model", "xi_bound")
        d = self.get("model", "d")
        m = marks.shape[0] if marks.size else 0
        if isinstance(xi, tuple) and xi and isinstance(xi[0], tuple):
            table = np.asarray(xi, float)
            grid = self.build_grid()
            if table.shape != (grid.n_steps + 1, m):
                raise ConfigurationError(
                    f"xi table must be (n_steps+1) x m = "
                    f"{grid.n_steps + 1} x {m}, got {table.shape}")
            times = grid.times

            def xi_fn(t, _times=times, _table=table):
                idx = int(np.argmin(np.abs(_times - t)))
                if abs(_times[idx] - t) > 1e-9:
                    raise ConfigurationError(f"xi table has no entry for t={t}")
                return _table[idx]

            return JumpDiffusionModel(d, marks, lam, xi_fn, float(bound))
        return JumpDiffusionModel.constant_xi(d, marks, lam, xi=np.asarray(
            xi, float) if isinstance(xi, tuple) else float(xi),
            xi_bound=float(bound))

    def _state_fn(self, prefix: str) -> StateFunction:
        kind = self.get("cost", f"{prefix}_kind")
        if kind not in _STATE_FN_KINDS:
            raise ConfigurationError(
                f"unknown {prefix}_kind {kind!r}; pick from {_STATE_FN_KINDS}")
        a = self.get("cost", f"{prefix}_a")
        b = self.get("cost", f"{prefix}_b")
        cap = self.get("cost", f"{prefix}_cap")
        return StateFunction(kind, a=tuple(a), b=float(b),
                             cap=float(cap) if cap is not None else float("inf"))

    def build_cost(self) -> CostSpec:
        delta = self.get("cost", "delta")
        if isinstance(delta, tuple):
            delta = np.asarray(delta, float)
        return CostSpec(alpha=self.get("cost", "alpha"),
                        alpha_bar=self.get("cost", "alpha_bar"),
                        beta=self.get("cost", "beta"), delta=delta,
                        u_rate=self._state_fn("u"),
                        u_terminal=self._state_fn("ubar"))

    def build_penalty(self) -> PenaltyFn:
        kind = self.get("penalty", "kind")
        kappa = self.get("penalty", "kappa")
        if kind == "entropic":
            pen = PenaltyFn.entropic()
        elif kind == "scaled_entropic":
            pen = PenaltyFn.scaled_entropic(kappa)
        else:
            raise ConfigurationError(
                f"penalty kind {kind!r} not configurable (custom rates are "
                "library-level only)")
        K1, K2 = self.get("penalty", "K1"), self.get("penalty", "K2")
        if K1 is not None or K2 is not None:
            pen = PenaltyFn(pen.kind, pen.kappa,
                            float(K1) if K1 is not None else pen.K1,
                            float(K2) if K2 is not None else pen.K2)
        return pen

    def build_control(self) -> Control:
        eta = np.asarray(self.get("control", "eta"), float)
        psi = np.asarray(self.get("control", "psi"), float)
        return Control.constant(eta, psi, tag=self.get("control", "tag"))

    def build_basis(self) -> RegressionBasis:
        return RegressionBasis(kind=self.get("solver", "basis_kind"),
                               degree=self.get("solver", "basis_degree"),
                               n_bins=self.get("solver", "basis_bins"))

    def build_tree(self) -> TreeModel:
        grid = TimeGrid.regular(self.get("grid", "horizon"),
                                self.get("tree", "depth"))
        eta_axis = np.linspace(self.get("tree", "eta_min"),
                               self.get("tree", "eta_max"),
                               self.get("tree", "eta_points"))
        psi_axis = np.linspace(self.get("tree", "psi_min"),
                               self.get("tree", "psi_max"),
                               self.get("tree", "psi_points"))
        return TreeModel(self.build_model(), grid, eta_axis, psi_axis)

    def suite_scale(self) -> SuiteScale:
        model = self.build_model()
        if model.d != 1 or model.m != 1:
            raise ConfigurationError(
                "the verification suite is defined for d = 1 with one mark")
        xi = self.get("model", "xi")
        if not isinstance(xi, float):
            raise ConfigurationError(
                "the verification suite needs a constant scalar xi")
        return SuiteScale(
            n_paths=self.get("solver", "n_paths"),
            n_steps=self.get("grid", "n_steps"),
            tree_depth=self.get("tree", "depth"),
            horizon=self.get("grid", "horizon"),
            control_points=self.get("tree", "eta_points"),
            jump_weight=float(self.get("model", "lambda_weights")[0]),
            xi_value=xi)

    def experiments(self):
        return list(self.get("suite", "experiments"))

    def tolerance_overrides(self):
        return tuple(self.get("suite", "tolerance_overrides"))

    @property
    def n_paths(self) -> int:
        return self.get("solver", "n_paths")

    @property
    def seed(self) -> int:
        return self.get("solver", "seed")

    def with_seed(self, seed: int) -> "RunConfig":
        sections = []
        for sec, items in self.sections:
            if sec == "solver":
                items = tuple((k, seed if k == "seed" else v)
                              for k, v in items)
            sections.append((sec, items))
        return RunConfig(tuple(sections))

    # -- serialization ------------------------------------------------------
    def serialize(self) -> str:
        lines = ["# robustjd run configuration"]
        for sec, items in self.sections:
            lines.append("")
            lines.append(f"[{sec}]")
            for k, v in items:
                lines.append(f"{k} = {_literal(v)}")
        return "\n".join(lines) + "\n"

    def sha256(self) -> str:
        return hashlib.sha256(self.serialize().encode()).hexdigest()


def _literal(value) -> str:
    if isinstance(value, tuple):
        return "[" + ", ".join(_literal(v) for v in value) + "]"
    if isinstance(value, str):
        return repr(value)
    return repr(value)


def _strip_comment(line: str) -> str:
    out = []
    quote = None
    for ch in line:
        if quote:
            out.append(ch)
            if ch == quote:
                quote = None
        elif ch in "'\"":
            quote = ch
            out.append(ch)
        elif ch == "#":
            break
        else:
            out.append(ch)
    return "".join(out)


def parse_config_text(text: str) -> RunConfig:
    """Parse and fully validate; raises with every problem, not just the first."""
    errors = []
    raw = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = _strip_comment(line).strip()
        if not stripped:
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if section not in SCHEMA:
                errors.append(f"line {lineno}: unknown section [{section}]")
                section = None
            elif section in raw:
                errors.append(f"line {lineno}: duplicate section [{section}]")
            else:
                raw[section] = {}
            continue
        if "=" not in stripped:
            errors.append(f"line {lineno}: expected 'key = value'")
            continue
        if section is None:
            errors.append(f"line {lineno}: key outside any known section")
            continue
        key, _, value_text = stripped.partition("=")
        key = key.strip()
        if key not in SCHEMA[section]:
            errors.append(f"line {lineno}: unknown key [{section}] {key}")
            continue
        if key in raw[section]:
            errors.append(f"line {lineno}: duplicate key [{section}] {key}")
            continue
        try:
            value = ast.literal_eval(value_text.strip())
        except (ValueError, SyntaxError):
            errors.append(f"line {lineno}: unparseable value for "
                          f"[{section}] {key}: {value_text.strip()!r}")
            continue
        kind, _ = SCHEMA[section][key]
        ok, canon = _check_kind(kind, value)
        if not ok:
            errors.append(f"line {lineno}: [{section}] {key} must be {kind}")
            continue
        raw[section][key] = canon

    sections = []
    for sec, keys in SCHEMA.items():
        items = []
        for key, (kind, default) in keys.items():
            if sec in raw and key in raw[sec]:
                items.append((key, raw[sec][key]))
            else:
                items.append((key, default))
        sections.append((sec, tuple(items)))
    cfg = RunConfig(tuple(sections))

    errors.extend(_semantic_errors(cfg))
    if errors:
        exc = ConfigurationError("invalid configuration:\n  "
                                 + "\n  ".join(errors))
        exc.errors = errors
        raise exc
    return cfg


def _semantic_errors(cfg: RunConfig):
    """Re-validate every module-level invariant by building the objects."""
    errors = []
    grid = model = None
    try:
        grid = cfg.build_grid()
    except Exception as exc:   # noqa: BLE001
        errors.append(f"[grid] {exc}")
    try:
        model = cfg.build_model()
        if grid is not None:
            model.validate_on(grid)
    except Exception as exc:   # noqa: BLE001
        errors.append(f"[model] {exc}")
    try:
        cfg.build_cost()
        if grid is not None:
            from .model import delta_on_grid
            delta_on_grid(cfg.build_cost().delta, grid)
    except Exception as exc:   # noqa: BLE001
        errors.append(f"[cost] {exc}")
    try:
        cfg.build_penalty()
    except Exception as exc:   # noqa: BLE001
        errors.append(f"[penalty] {exc}")
    try:
        if model is not None:
            ctrl = cfg.build_control()
            eta = np.asarray(cfg.get("control", "eta"))
            psi = np.asarray(cfg.get("control", "psi"))
            if eta.size != model.d:
                errors.append(f"[control] eta has {eta.size} entries for "
                              f"d={model.d}")
            if psi.size != model.m:
                errors.append(f"[control] psi has {psi.size} entries for "
                              f"m={model.m}")
            del ctrl
    except Exception as exc:   # noqa: BLE001
        errors.append(f"[control] {exc}")
    if cfg.get("solver", "n_paths") < 1:
        errors.append("[solver] n_paths must be >= 1")
    if cfg.get("solver", "basis_kind") not in ("polynomial", "indicator_bins"):
        errors.append("[solver] basis_kind must be polynomial or indicator_bins")
    for name in cfg.get("suite", "experiments"):
        if name not in DEFAULT_EXPERIMENTS:
            errors.append(f"[suite] unknown experiment {name!r}")
    for name, tol in cfg.get("suite", "tolerance_overrides"):
        if tol <= 0:
            errors.append(f"[suite] tolerance override {name!r} must be positive")
    return errors


def parse_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)
