"""Experiment runner: subcommands for each pipeline, deterministic outputs.

Every run writes a manifest (normalized config + versions + seed), CSV
files with pinned headers, a summary of key = value lines, and plain-text
field dumps.  Outputs are byte-deterministic given the config and seed;
validation happens before any file is created.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .carleman import carleman_ratio_report, check_weight_properties, estimate_observability, eta_gradient_scan
from .config import (build_carleman, build_leader_field, build_nonlinearity, build_problem_spec,
                     load_config, validate_for)
from .errors import ConfigError, HierctrlError
from .hum import control_to_trajectory, dense_oracle_coupled_adjoint, minimize_G, solve_coupled_adjoint
from .nash import (cost_followers, cost_leader, dense_oracle_nash, q_norm, solve_nash_fixed_point,
                   _raw_residuals)
from .operators import TimeStepper
from .semilinear import semilinear_null_control, solve_quasi_equilibrium, verify_equilibrium_sufficiency

SUBCOMMANDS = ("nash", "null-control", "trajectory", "semilinear",
               "second-order", "observability", "carleman", "oracle")


def fmt(x):
    """17 significant digits, enough to round-trip doubles."""
    return f"{float(x):.17g}"


def write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(c) if isinstance(c, (int, str)) else fmt(c) for c in row))
    Path(path).write_text("\n".join(lines) + "\n")


def dump_field(path, field):
    g = field.grid
    nx = g.nx[0]
    ny = g.nx[1] if g.dim == 2 else 1
    lines = [f"# {nx} {ny} {g.nt}"]
    for k in range(g.nt + 1):
        lines.append(" ".join(fmt(v) for v in field.values[k].reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n")


def write_summary(path, items):
    lines = [f"{key} = {value}" for key, value in items]
    Path(path).write_text("\n".join(lines) + "\n")


def write_manifest(out, subcommand, config):
    manifest = {
        "subcommand": subcommand,
        "seed": config.seed,
        "versions": {
            "hierctrl": __version__,
            "python": ".".join(map(str, sys.version_info[:3])),
            "numpy": np.__version__,
        },
        "config": config.normalized(),
    }
    try:
        import scipy

        manifest["versions"]["scipy"] = scipy.__version__
    except ImportError:
        pass
    Path(out, "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _run_nash(config, out):
    spec = build_problem_spec(config)
    f = build_leader_field(config)
    stepper = TimeStepper(spec)
    rows = []

    def on_sweep(it, W, vs, change):
        r1, r2 = _raw_residuals(spec, W, vs, stepper)
        rows.append((it, change, r1, r2))

    sol = solve_nash_fixed_point(
        spec, f, tol_rel=config.solver["nash_tol"], max_iter=config.solver["nash_max_iter"],
        damping=config.solver["damping"], stepper=stepper, on_sweep=on_sweep)
    write_csv(Path(out, "nash_history.csv"), ("iter", "change_norm", "residual_1", "residual_2"), rows)
    for name, field in (("w", sol.w), ("v1", sol.v1), ("v2", sol.v2)):
        dump_field(Path(out, f"{name}.field.txt"), field)
    j1, j2 = cost_followers(spec, f, sol.v1, sol.v2, w=sol.w, stepper=stepper)
    write_summary(Path(out, "summary.txt"), [
        ("iterations", sol.iterations),
        ("w_norm", fmt(q_norm(spec.grid, sol.w.interior()))),
        ("v1_norm", fmt(q_norm(spec.grid, sol.v1.interior()))),
        ("v2_norm", fmt(q_norm(spec.grid, sol.v2.interior()))),
        ("residual_1", fmt(sol.residuals[0])),
        ("residual_2", fmt(sol.residuals[1])),
        ("J1", fmt(j1)),
        ("J2", fmt(j2)),
        ("J_leader", fmt(cost_leader(spec, f))),
    ])
    return 0


def _sweep_rows(spec, eps_list, cg_tol, cg_max_iter, threads):
    def solve_one(idx_eps):
        idx, eps = idx_eps
        res = minimize_G(spec, eps, cg_tol=cg_tol, max_iter=cg_max_iter)
        return idx, res

    items = list(enumerate(eps_list))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(solve_one, items))
    else:
        results = [solve_one(item) for item in items]
    results.sort(key=lambda pair: pair[0])
    return [res for _, res in results]


def _run_null_control(config, out, threads):
    spec = build_problem_spec(config)
    results = _sweep_rows(spec, config.eps_list, config.solver["cg_tol"],
                          config.solver["cg_max_iter"], threads)
    rows = []
    for eps, res in zip(config.eps_list, results):
        chi = np.sqrt(spec.leader_mask.interior_vector())
        f_norm = q_norm(spec.grid, res.f.interior() * chi)
        rows.append((eps, res.terminal_norm, res.cg_iterations, f_norm, 0.5 * f_norm**2))
    write_csv(Path(out, "sweep.csv"), ("eps", "terminal_norm", "cg_iters", "f_norm", "J_leader"), rows)
    last = results[-1]
    dump_field(Path(out, "f.field.txt"), last.f)
    dump_field(Path(out, "w.field.txt"), last.nash.w)
    tns = [r.terminal_norm for r in results]
    write_summary(Path(out, "summary.txt"), [
        ("eps_count", len(tns)),
        ("terminal_first", fmt(tns[0])),
        ("terminal_last", fmt(tns[-1])),
        ("strictly_decreasing", all(tns[i] > tns[i + 1] for i in range(len(tns) - 1))),
        ("drop_factor", fmt(tns[0] / tns[-1] if tns[-1] > 0 else float("inf"))),
    ])
    return 0


def _run_trajectory(config, out, threads):
    spec = build_problem_spec(config)
    u0 = spec.w0
    ubar0 = spec.ubar0
    zetas = spec.targets

    def solve_one(idx_eps):
        idx, eps = idx_eps
        res = control_to_trajectory(spec, u0, ubar0, zetas, eps,
                                    cg_tol=config.solver["cg_tol"],
                                    max_iter=config.solver["cg_max_iter"])
        return idx, res

    items = list(enumerate(config.eps_list))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(solve_one, items))
    else:
        results = [solve_one(item) for item in items]
    results.sort(key=lambda pair: pair[0])
    results = [r for _, r in results]
    rows = []
    for eps, res in zip(config.eps_list, results):
        chi = np.sqrt(spec.leader_mask.interior_vector())
        f_norm = q_norm(spec.grid, res.hum.f.interior() * chi)
        rows.append((eps, res.terminal_mismatch, res.hum.cg_iterations, f_norm, 0.5 * f_norm**2))
    write_csv(Path(out, "sweep.csv"), ("eps", "terminal_norm", "cg_iters", "f_norm", "J_leader"), rows)
    last = results[-1]
    dump_field(Path(out, "u.field.txt"), last.u)
    dump_field(Path(out, "ubar.field.txt"), last.ubar)
    mms = [r.terminal_mismatch for r in results]
    write_summary(Path(out, "summary.txt"), [
        ("mismatch_first", fmt(mms[0])),
        ("mismatch_last", fmt(mms[-1])),
        ("strictly_decreasing", all(mms[i] > mms[i + 1] for i in range(len(mms) - 1))),
    ])
    return 0


def _run_semilinear(config, out):
    spec = build_problem_spec(config)
    nonlin = build_nonlinearity(config)
    theta = None
    try:
        weights = build_carleman(config, spec=None)
        theta = weights.theta
    except HierctrlError:
        pass  # weights are diagnostic here; the pipeline runs without them
    eps = config.eps_list[-1]
    res = semilinear_null_control(
        spec, nonlin, spec.ubar0, eps,
        outer_tol=config.solver["outer_tol"], max_outer=config.solver["max_outer"],
        cg_tol=config.solver["cg_tol"], theta=theta)
    write_csv(Path(out, "outer_history.csv"), ("iter", "change_norm"),
              list(enumerate(res.history, start=1)))
    dump_field(Path(out, "u.field.txt"), res.u)
    dump_field(Path(out, "ubar.field.txt"), res.ubar)
    dump_field(Path(out, "f.field.txt"), res.f)
    items = [
        ("eps", fmt(eps)),
        ("outer_iterations", res.outer_iterations),
        ("terminal_mismatch", fmt(res.terminal_mismatch)),
        ("nonlinearity", nonlin.name),
        ("bound_M", fmt(nonlin.bound)),
    ]
    if res.target_check is not None:
        for i, (value, flagged) in enumerate(res.target_check, start=1):
            items.append((f"target_condition_{i}", fmt(value)))
            items.append((f"target_condition_{i}_infinite", flagged))
    write_summary(Path(out, "summary.txt"), items)
    return 0


def _run_second_order(config, out):
    spec = build_problem_spec(config)
    nonlin = build_nonlinearity(config)
    f = build_leader_field(config)
    qe = solve_quasi_equilibrium(spec, nonlin, f, tol=config.solver["nash_tol"],
                                 inner_tol=config.solver["nash_tol"])
    report = verify_equilibrium_sufficiency(spec, nonlin, f, qe,
                                            n_directions=config.solver["n_directions"],
                                            seed=config.seed)
    rows = []
    for i, forms in enumerate(report.forms, start=1):
        for k, val in enumerate(forms):
            rows.append((i, k, val))
    write_csv(Path(out, "second_order.csv"), ("follower", "sample", "form"), rows)
    write_summary(Path(out, "summary.txt"), [
        ("n_directions", report.n_directions),
        ("min_form_1", fmt(report.min_form[0])),
        ("min_form_2", fmt(report.min_form[1])),
        ("c_hat_1", fmt(report.c_hat[0])),
        ("c_hat_2", fmt(report.c_hat[1])),
        ("all_positive", report.all_positive),
        ("sufficiency_verified", report.all_positive),
        ("dimension_in_analysis_range", report.dimension_in_analysis_range),
    ])
    return 0


def _run_observability(config, out):
    spec = build_problem_spec(config)
    weights = build_carleman(config, spec=spec)
    report = estimate_observability(spec, weights, n_samples=config.solver["n_samples"],
                                    seed=config.seed, tol_rel=config.solver["coupled_tol"])
    rows = [(k, r, d) for k, (r, d) in enumerate(zip(report.ratios, report.denominators))]
    write_csv(Path(out, "observability.csv"), ("sample", "ratio", "denominator"), rows)
    write_summary(Path(out, "summary.txt"), [
        ("samples", len(report.ratios)),
        ("resampled", report.resampled),
        ("max_ratio", fmt(report.max_ratio)),
        ("all_finite", report.all_finite),
        ("all_denominators_positive", report.all_denominators_positive),
        ("case", report.case),
    ])
    return 0


def _run_carleman(config, out):
    needed = ("leader", "follower1", "follower2", "target1", "target2")
    spec = build_problem_spec(config) if all(k in config.boxes for k in needed) else None
    weights = build_carleman(config, spec=spec if spec is not None and config.case == "shared" else None)
    props = check_weight_properties(weights, n_samples=100, seed=config.seed)
    report = carleman_ratio_report(config.grid, weights, n_samples=config.solver["n_samples"],
                                   seed=config.seed)
    rows = [(k, rec["lhs"], rec["rhs"], rec["ratio"]) for k, rec in enumerate(report.samples)]
    write_csv(Path(out, "carleman_ratio.csv"), ("sample", "lhs", "rhs", "ratio"), rows)
    write_summary(Path(out, "summary.txt"), [
        ("lambda", fmt(weights.lam)),
        ("s", fmt(weights.s)),
        ("identity_max_rel", fmt(props.identity_max_rel)),
        ("identity_ok", props.identity_ok),
        ("xi_inv_ok", props.xi_inv_ok),
        ("time_bound_strict_ok", props.time_bound_strict_ok),
        ("time_bound_relaxed_ok", props.time_bound_relaxed_ok),
        ("min_grad_eta_outside_omega0", fmt(eta_gradient_scan(weights, 0.1 * min(config.grid.lengths)))),
        ("ratio_samples", len(report.samples)),
        ("ratio_skipped", report.skipped),
        ("ratio_max", fmt(report.max_ratio)),
        ("ratio_median", fmt(report.median_ratio)),
    ] + [("note", n) for n in props.notes])
    return 0


def _run_oracle(config, out):
    spec = build_problem_spec(config)
    f = build_leader_field(config)
    stepper = TimeStepper(spec)
    fixed = solve_nash_fixed_point(spec, f, tol_rel=config.solver["nash_tol"], stepper=stepper)
    oracle = dense_oracle_nash(spec, f)
    scale = max(q_norm(spec.grid, oracle.w.interior()), 1e-300)
    nash_rel = q_norm(spec.grid, fixed.w.interior() - oracle.w.interior()) / scale
    rng = np.random.default_rng(config.seed)
    psi0 = spec.grid.from_interior(rng.standard_normal(spec.grid.n_interior))
    it = solve_coupled_adjoint(spec, psi0, tol_rel=config.solver["coupled_tol"], stepper=stepper)
    dn = dense_oracle_coupled_adjoint(spec, psi0)
    scale = max(q_norm(spec.grid, dn.psi.interior()), 1e-300)
    adj_rel = q_norm(spec.grid, it.psi.interior() - dn.psi.interior()) / scale
    write_summary(Path(out, "summary.txt"), [
        ("nash_vs_oracle_rel", fmt(nash_rel)),
        ("coupled_adjoint_vs_oracle_rel", fmt(adj_rel)),
        ("nash_residual_1", fmt(fixed.residuals[0])),
        ("nash_residual_2", fmt(fixed.residuals[1])),
        ("oracle_residual_1", fmt(oracle.residuals[0])),
        ("oracle_residual_2", fmt(oracle.residuals[1])),
    ])
    return 0


def run(subcommand, config_path, out_dir, seed=None, threads=1):
    """Validate, then compute and write artifacts.  Returns the exit code."""
    try:
        config = load_config(config_path)
        if seed is not None:
            config.seed = int(seed)
            config.solver["seed"] = int(seed)
            config.sections.setdefault("solver", {})["seed"] = str(int(seed))
        validate_for(config, subcommand)
    except HierctrlError as exc:
        record = {"error": type(exc).__name__, "message": str(exc), "stage": "validation"}
        print(json.dumps(record), file=sys.stderr)
        return 2
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        write_manifest(out, subcommand, config)
        if subcommand == "nash":
            return _run_nash(config, out)
        if subcommand == "null-control":
            return _run_null_control(config, out, threads)
        if subcommand == "trajectory":
            return _run_trajectory(config, out, threads)
        if subcommand == "semilinear":
            return _run_semilinear(config, out)
        if subcommand == "second-order":
            return _run_second_order(config, out)
        if subcommand == "observability":
            return _run_observability(config, out)
        if subcommand == "carleman":
            return _run_carleman(config, out)
        if subcommand == "oracle":
            return _run_oracle(config, out)
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    except HierctrlError as exc:
        record = {"error": type(exc).__name__, "message": str(exc), "stage": "solve"}
        print(json.dumps(record), file=sys.stderr)
        Path(out, "error.json").write_text(json.dumps(record, indent=2) + "\n")
        return 1


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="hierctrl",
        description="Leader-follower control experiments for clamped fourth-order parabolic equations",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the INI config")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=1, help="parallel sweep width")
    args = parser.parse_args(argv)
    code = run(args.subcommand, args.config, args.out, seed=args.seed, threads=args.threads)
    return code


if __name__ == "__main__":
    sys.exit(main())
