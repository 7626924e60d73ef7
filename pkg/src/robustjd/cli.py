"""Command-line entry point.

Subcommands: ``simulate`` (write a path-bundle binary), ``solve`` (LSMC
solution summary as CSV/JSON), ``oracle`` (tree dynamic programming table),
``verify`` (run the verification suite, write verdicts) and ``evaluate``
(cost of the configured candidate control). Exit codes follow the suite
convention: 0 all good, 1 a check or computation failed, 2 configuration
problems.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__
from .bsde import solve_lsmc
from .config import RunConfig, parse_config
from .cost import gamma_cost
from .errors import ConfigurationError
from .measure import density_process, gamma0, relative_entropy
from .model import simulate_paths, write_bundle
from .suite import default_suite, format_verdicts, run_suite, verdicts_to_jsonl
from .tree import dp_solve, solution_rows


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="robustjd",
        description="robust utility minimization under jump-diffusion "
                    "uncertainty: simulation, BSDE solver, tree oracle and "
                    "verification suite")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
            ("simulate", "simulate a path bundle and write it as binary"),
            ("solve", "solve the value-process BSDE by LSMC"),
            ("oracle", "solve the tree oracle by dynamic programming"),
            ("verify", "run the verification suite"),
            ("evaluate", "estimate the cost of the configured control")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="configuration file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the configured seed")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--threads", type=int, default=1,
                       help="experiment-level parallelism (verify only); "
                            "results are identical for any value")
        p.add_argument("--format", choices=("csv", "json"), default="csv")
    return parser


def _metadata(cfg: RunConfig) -> dict:
    return {"tool": f"robustjd {__version__}",
            "config_sha256": cfg.sha256(),
            "seed": cfg.seed}


def _comment_header(cfg: RunConfig) -> list:
    meta = _metadata(cfg)
    return [f"# tool={meta['tool']}",
            f"# config_sha256={meta['config_sha256']}",
            f"# seed={meta['seed']}"]


def _write_csv(path, header_rows, columns, rows):
    with open(path, "w", newline="") as fh:
        for line in header_rows:
            fh.write(line + "\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerows(rows)


def _cmd_simulate(cfg: RunConfig, args) -> int:
    model, grid = cfg.build_model(), cfg.build_grid()
    bundle = simulate_paths(model, grid, cfg.n_paths, cfg.seed)
    out = os.path.join(args.out, "bundle.bin")
    write_bundle(out, bundle)
    meta = _metadata(cfg)
    meta.update(n_paths=bundle.n_paths, n_steps=bundle.n_steps,
                d=bundle.d, m=bundle.m,
                substream_rule=bundle.substream_rule)
    with open(out + ".meta.json", "w") as fh:
        json.dump(meta, fh, indent=2)
    print(f"wrote {out}: {bundle.n_paths} paths x {bundle.n_steps} steps "
          f"(d={bundle.d}, m={bundle.m}, seed={cfg.seed})")
    return 0


def _solution_summary_rows(sol, grid, model):
    rows = []
    qlabels = (("q10", 0.10), ("q50", 0.50), ("q90", 0.90))
    for n in range(grid.n_steps + 1):
        t = grid.times[n]
        have_zn = n < grid.n_steps
        z = sol.Z[:, n, :] if have_zn else np.zeros((sol.n_paths, model.d))
        zt = sol.Z_tilde[:, n, :] if have_zn else np.zeros((sol.n_paths, model.m))
        resid = sol.residuals[n] if have_zn else 0.0
        base = [float(sol.V[:, n].mean())] + \
            [float(z[:, j].mean()) for j in range(model.d)] + \
            [float(zt[:, i].mean()) for i in range(model.m)]
        rows.append([f"{t:.6g}", "mean"] + [repr(v) for v in base]
                    + [repr(float(resid))])
        for label, q in qlabels:
            vals = [float(np.quantile(sol.V[:, n], q))] + \
                [float(np.quantile(z[:, j], q)) for j in range(model.d)] + \
                [float(np.quantile(zt[:, i], q)) for i in range(model.m)]
            rows.append([f"{t:.6g}", label] + [repr(v) for v in vals]
                        + [repr(float(resid))])
    return rows


def _cmd_solve(cfg: RunConfig, args) -> int:
    model, grid = cfg.build_model(), cfg.build_grid()
    spec, pen = cfg.build_cost(), cfg.build_penalty()
    basis = cfg.build_basis()
    paths = simulate_paths(model, grid, cfg.n_paths, cfg.seed)
    sol = solve_lsmc(spec, pen, paths, model, grid, basis)
    columns = (["t", "state_descriptor", "V"]
               + [f"Z_{j + 1}" for j in range(model.d)]
               + [f"Zt_{i + 1}" for i in range(model.m)] + ["residual"])
    rows = _solution_summary_rows(sol, grid, model)
    if args.format == "json":
        out = os.path.join(args.out, "solution.json")
        payload = {"metadata": _metadata(cfg), "columns": columns,
                   "rows": rows, "v0": sol.v0, "v0_stderr": sol.v0_stderr,
                   "basis": sol.basis.describe(),
                   "clip_fraction": sol.clip_fraction}
        with open(out, "w") as fh:
            json.dump(payload, fh, indent=2)
    else:
        out = os.path.join(args.out, "solution.csv")
        _write_csv(out, _comment_header(cfg), columns, rows)
    print(f"V0 = {sol.v0:.6f} +- {sol.v0_stderr:.6f}  "
          f"(basis {sol.basis.describe()}, wrote {out})")
    return 0


def _cmd_oracle(cfg: RunConfig, args) -> int:
    tree = cfg.build_tree()
    spec, pen = cfg.build_cost(), cfg.build_penalty()
    sol = dp_solve(tree, spec, pen)
    columns = ["node_id", "t", "state", "V", "argmin_eta", "argmin_psi"]
    rows = solution_rows(sol)
    if args.format == "json":
        out = os.path.join(args.out, "tree_solution.json")
        with open(out, "w") as fh:
            json.dump({"metadata": _metadata(cfg), "columns": columns,
                       "rows": rows, "v0": sol.v0}, fh, indent=2)
    else:
        out = os.path.join(args.out, "tree_solution.csv")
        _write_csv(out, _comment_header(cfg), columns, rows)
    print(f"tree V0 = {sol.v0:.6f}  (depth {tree.grid.n_steps}, wrote {out})")
    return 0


def _cmd_verify(cfg: RunConfig, args) -> int:
    scale = cfg.suite_scale()
    specs = default_suite(scale=scale, seed=cfg.seed,
                          names=cfg.experiments(),
                          tolerances=cfg.tolerance_overrides())
    verdicts, code = run_suite(specs, parallel=max(1, args.threads))
    out = os.path.join(args.out, "verdicts.jsonl")
    with open(out, "w") as fh:
        meta = _metadata(cfg)
        fh.write(json.dumps({"metadata": meta}) + "\n")
        fh.write(verdicts_to_jsonl(verdicts) + "\n")
    print(format_verdicts(verdicts))
    print(f"wrote {out}")
    return code


def _cmd_evaluate(cfg: RunConfig, args) -> int:
    model, grid = cfg.build_model(), cfg.build_grid()
    spec, pen = cfg.build_cost(), cfg.build_penalty()
    ctrl = cfg.build_control()
    paths = simulate_paths(model, grid, cfg.n_paths, cfg.seed)
    dens = density_process(ctrl, paths, model, grid)
    est = gamma_cost(spec, ctrl, pen, paths, model, grid, dens=dens)
    g = gamma0(ctrl, dens, pen, paths, model, grid)
    h = relative_entropy(ctrl, dens, paths)
    record = {
        "control": ctrl.tag,
        "gamma_cost": est.mean, "gamma_cost_stderr": est.stderr,
        "utility_part": est.utility_part.mean,
        "penalty_part": est.penalty_part.mean,
        "gamma0": g.mean, "gamma0_stderr": g.stderr,
        "relative_entropy": h.mean, "relative_entropy_stderr": h.stderr,
        "n_paths": est.n_paths,
    }
    if args.format == "json":
        out = os.path.join(args.out, "evaluate.json")
        with open(out, "w") as fh:
            json.dump({"metadata": _metadata(cfg), **record}, fh, indent=2)
    else:
        out = os.path.join(args.out, "evaluate.csv")
        _write_csv(out, _comment_header(cfg), list(record),
                   [[repr(v) if isinstance(v, float) else v
                     for v in record.values()]])
    print(f"Gamma(Q) = {est.mean:.6f} +- {est.stderr:.6f}  "
          f"(utility {est.utility_part.mean:.6f}, "
          f"penalty {est.penalty_part.mean:.6f}, wrote {out})")
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "solve": _cmd_solve,
    "oracle": _cmd_oracle,
    "verify": _cmd_verify,
    "evaluate": _cmd_evaluate,
}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        os.makedirs(args.out, exist_ok=True)
        return _COMMANDS[args.command](cfg, args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:   # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


def console_entry():
    raise SystemExit(main())


if __name__ == "__main__":
    console_entry()
