"""Command-line harness.

Subcommands:
  invstat          reference trajectory + equilibrium input trajectory +
                   equilibrium audit
  rank-check       rank of the rigid-body equilibrium matrix along the
                   sweep, plus the classical per-node assembly diagnosis
  run              closed-loop (or open-loop) simulation with metrics and
                   plot-ready CSV output
  linearize-check  finite-difference Jacobian self-consistency audit
  batch            sequence of runs from one file, isolated output dirs

Exit codes: 0 success, 1 assertion failure, 2 usage/config error,
3 runtime divergence.  Every output file carries a '#'-comment header
echoing the resolved configuration; outputs are byte-reproducible for a
fixed (config, seed).
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np
import yaml

from . import invstat, mpc, numopt, trajectory
from .config import (ConfigError, ExperimentConfig, apply_override,
                     config_from_dict, config_header_lines, resolve_config)
from .dynamics import DivergenceError, accelerations, cable_state, default_noise
from .invstat import InfeasiblePoseError
from .spine import (ModelFormatError, SpineModel, cable_vectors,
                    node_positions, resolve_model)

EXIT_OK = 0
EXIT_ASSERTION = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _sweep_for(cfg: ExperimentConfig, model: SpineModel) -> trajectory.SweepSpec:
    return trajectory.default_sweep(model, cfg.sweep.duration, cfg.sweep.dt,
                                    cfg.sweep.profile)


def _write_csv(path: Path, header_lines, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([v if isinstance(v, str) else f"{v:.17g}" for v in row])


def cmd_invstat(cfg: ExperimentConfig, model: SpineModel, out: Path) -> int:
    spec = _sweep_for(cfg, model)
    times, states = trajectory.build_trajectory(spec, model)
    header = config_header_lines(cfg)
    try:
        traj = invstat.generate_input_trajectory(
            model, times, states, cfg.invstat.c_min, cfg.invstat.stacking)
    except InfeasiblePoseError as exc:
        print(f"inverse statics infeasible: {exc}", file=sys.stderr)
        return EXIT_ASSERTION

    out.mkdir(parents=True, exist_ok=True)
    trajectory.trajectory_to_csv(out / "reference.csv", times, states, header)
    traj.to_csv(out / "inputs.csv", header)

    # Equilibrium audit: accelerations and tension margins at every pose.
    rows = []
    worst_acc = 0.0
    worst_margin = np.inf
    for t, xi, u in zip(times, states, traj.u):
        acc = float(np.max(np.abs(accelerations(model, xi, u))))
        _, lengths, _, tensions = cable_state(model, xi, u)
        margin = float(np.min(tensions - cfg.invstat.c_min * lengths))
        worst_acc = max(worst_acc, acc)
        worst_margin = min(worst_margin, margin)
        rows.append((t, acc, margin))
    _write_csv(out / "audit.csv", header,
               ["t", "max_abs_acceleration", "tension_margin"], rows)
    passed = worst_acc <= 1e-6 and worst_margin >= -1e-9
    (out / "audit.txt").write_text(
        "\n".join([f"# {line}" for line in header] + [
            f"poses: {len(times)}",
            f"max equality residual: {traj.residuals.max():.3e}",
            f"max |acceleration| at rest: {worst_acc:.3e} (limit 1e-6)",
            f"min tension margin over c_min*length: {worst_margin:.3e}",
            f"result: {'PASS' if passed else 'FAIL'}",
        ]) + "\n")
    return EXIT_OK if passed else EXIT_ASSERTION


def cmd_rank_check(cfg: ExperimentConfig, model: SpineModel, out: Path) -> int:
    if model.d != 2:
        print("rank-check requires a planar model", file=sys.stderr)
        return EXIT_CONFIG
    spec = _sweep_for(cfg, model)
    times, states = trajectory.build_trajectory(spec, model)
    header = config_header_lines(cfg)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    ranks = set()
    worst_ratio = 0.0
    max_nodal = 0.0
    for t, xi in zip(times, states):
        positions = node_positions(model, model.poses_from_state(xi))
        eq = invstat.assemble_rigid_body(model, positions, "planar6")
        rank, sv = numopt.numeric_rank(eq.A_b, 1e-10)
        ranks.add(rank)
        ratio = float(sv[3] / sv[0])
        worst_ratio = max(worst_ratio, ratio)
        nodal = invstat.nodal_least_squares_residual(model, positions)
        max_nodal = max(max_nodal, nodal)
        rows.append((t, rank, sv[0], sv[1], sv[2], sv[3], ratio, nodal))
    _write_csv(out / "rank_report.csv", header,
               ["t", "rank", "sigma1", "sigma2", "sigma3", "sigma4",
                "sigma4_over_sigma1", "nodal_lstsq_residual"], rows)
    ok = ranks == {3} and worst_ratio <= 1e-10
    nodal_inconsistent = max_nodal > 0.1
    nodal_shape = invstat.assemble_nodal(
        model, node_positions(model, model.poses_from_state(states[0]))).A.shape
    (out / "summary.txt").write_text(
        "\n".join([f"# {line}" for line in header] + [
            f"poses: {len(times)}",
            f"rigid-body equilibrium matrix ranks seen: {sorted(ranks)}",
            f"max sigma4/sigma1: {worst_ratio:.3e} (limit 1e-10)",
            f"classical per-node assembly shape: {nodal_shape[0]}x{nodal_shape[1]}",
            f"max least-squares residual of per-node balance: {max_nodal:.6g} N",
            ("per-node balance has no solution at swept poses (residual > 0.1 N): "
             + ("confirmed" if nodal_inconsistent else "NOT confirmed")),
            f"result: {'PASS' if ok and nodal_inconsistent else 'FAIL'}",
        ]) + "\n")
    return EXIT_OK if ok and nodal_inconsistent else EXIT_ASSERTION


def _controller_name(cfg: ExperimentConfig) -> str:
    return {"is-tracking": "tracking"}.get(cfg.controller, cfg.controller)


def _run_settings(cfg: ExperimentConfig, model: SpineModel,
                  spec: trajectory.SweepSpec) -> mpc.RunSettings:
    sim = cfg.resolved_sim(model.d, spec.duration)
    noise = None
    if sim.noise:
        noise = default_noise(model, sim.seed, sim.noise_pose, sim.noise_velocity)
    return mpc.RunSettings(duration=sim.duration, dt_sim=sim.dt_sim,
                           dt_control=sim.dt_control, integrator=sim.integrator,
                           noise=noise)


def _write_run_outputs(cfg, model, out: Path, trace: mpc.ControllerTrace) -> None:
    header = config_header_lines(cfg)
    trace.to_csv(out / "trace.csv", header)
    metrics = mpc.error_metrics(trace, model)
    (out / "metrics.txt").write_text(
        "".join(f"# {line}\n" for line in header)
        + f"controller: {trace.controller}\nflagged: {trace.flagged}\n"
        + mpc.format_metrics(metrics))
    solved = trace.solve_ms[:-1]
    (out / "timing.txt").write_text(
        "# wall-clock solve times; not reproducible across runs\n"
        + (f"mean_ms: {solved.mean():.3f}\nmax_ms: {solved.max():.3f}\n"
           if solved.size else "no solves\n"))

    names_pos = ["x", "z"] if model.d == 2 else ["x", "y", "z"]
    ang_names = ["gamma"] if model.d == 2 else ["theta", "gamma", "psi"]
    com_cols = ["t"]
    err_cols = ["t"]
    for j in range(model.n_moving):
        com_cols += [f"body{j + 1}_{n}_ref" for n in names_pos]
        com_cols += [f"body{j + 1}_{n}" for n in names_pos]
        err_cols += [f"body{j + 1}_{n}_err_cm" for n in names_pos]
        err_cols += [f"body{j + 1}_{n}_err_deg" for n in ang_names]
    com_rows, err_rows = [], []
    for i in range(len(trace)):
        com_row = [trace.t[i]]
        err_row = [trace.t[i]]
        for j in range(model.n_moving):
            sl = model.pose_slice(j)
            ref = trace.reference[i, sl]
            act = trace.states[i, sl]
            com_row += list(ref[:model.d]) + list(act[:model.d])
            err = act - ref
            err_row += [100.0 * e for e in err[:model.d]]
            err_row += [np.degrees(e) for e in err[model.d:]]
        com_rows.append(com_row)
        err_rows.append(err_row)
    _write_csv(out / "com_path.csv", header, com_cols, com_rows)
    _write_csv(out / "errors.csv", header, err_cols, err_rows)


def cmd_run(cfg: ExperimentConfig, model: SpineModel, out: Path) -> int:
    controller = _controller_name(cfg)
    if controller in ("tracking", "open-loop-is") and model.d != 2:
        print("input-tracking controllers require a planar model", file=sys.stderr)
        return EXIT_CONFIG
    spec = _sweep_for(cfg, model)
    settings = _run_settings(cfg, model, spec)
    ctl_cfg = cfg.smoothing if controller == "smoothing" else cfg.tracking
    out.mkdir(parents=True, exist_ok=True)
    try:
        trace = mpc.run_closed_loop(model, controller, spec, ctl_cfg, settings)
    except InfeasiblePoseError as exc:
        print(f"inverse statics infeasible: {exc}", file=sys.stderr)
        return EXIT_ASSERTION
    except DivergenceError as exc:
        print(f"simulation diverged: {exc}", file=sys.stderr)
        partial = getattr(exc, "partial_trace", None)
        if partial is not None:
            _write_run_outputs(cfg, model, out, partial)
        return EXIT_DIVERGED
    _write_run_outputs(cfg, model, out, trace)
    n_solves = max(len(trace) - 1, 1)
    failed = sum(s not in ("optimal", "terminal", "constant", "open-loop")
                 for s in trace.statuses)
    if failed > 0.2 * n_solves:
        print(f"persistent solver failure: {failed}/{n_solves}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_linearize_check(cfg: ExperimentConfig, model: SpineModel, out: Path) -> int:
    spec = _sweep_for(cfg, model)
    header = config_header_lines(cfg)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    worst_included = 0.0
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        t = frac * spec.duration
        xi = trajectory.state_at(spec, model, t)
        positions = node_positions(model, model.poses_from_state(xi))
        _, lengths = cable_vectors(model, positions)
        for label, u in (("taut", 0.95 * lengths), ("slack-boundary", lengths.copy())):
            lin_h = mpc.linearize(model, xi, u, h=1e-6)
            lin_h2 = mpc.linearize(model, xi, u, h=5e-7)
            scale = max(1.0, float(np.max(np.abs(lin_h2.A))))
            disc = max(float(np.max(np.abs(lin_h.A - lin_h2.A))) / scale,
                       float(np.max(np.abs(lin_h.B - lin_h2.B)))
                       / max(1.0, float(np.max(np.abs(lin_h2.B)))))
            _, lens, rates, tensions = cable_state(model, xi, u)
            margin = float(np.min(np.abs(model.cable_stiffness * (lens - u)
                                         + model.cable_damping * rates)))
            kink = margin < 2.0 * model.cable_stiffness.max() * 1e-6 * max(1.0, lens.max())
            if not kink:
                worst_included = max(worst_included, disc)
            rows.append((t, label, disc, margin, "excluded-kink" if kink else "checked"))
    _write_csv(out / "linearize_report.csv", header,
               ["t", "input_case", "rel_discrepancy", "rectification_margin", "status"],
               rows)
    ok = worst_included <= 1e-5
    (out / "linearize_summary.txt").write_text(
        "".join(f"# {line}\n" for line in header)
        + f"max relative discrepancy (checked points): {worst_included:.3e}\n"
        + f"tolerance: 1e-5\nresult: {'PASS' if ok else 'FAIL'}\n")
    return EXIT_OK if ok else EXIT_ASSERTION


def _deep_merge(base: dict, extra: dict) -> dict:
    merged = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def cmd_batch(batch_path: Path, out: Path, overrides) -> int:
    try:
        data = yaml.safe_load(Path(batch_path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        print(f"cannot read batch file: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not isinstance(data, dict) or "runs" not in data:
        print("batch file needs a 'runs' list (and optional 'base')", file=sys.stderr)
        return EXIT_CONFIG
    base = data.get("base", {}) or {}
    worst = EXIT_OK
    for i, entry in enumerate(data["runs"]):
        entry = dict(entry or {})
        name = str(entry.pop("name", f"run{i:03d}"))
        merged = _deep_merge(base, entry)
        try:
            for assignment in overrides:
                apply_override(merged, assignment)
            cfg = config_from_dict(merged)
            model = resolve_model(cfg.model)
        except (ConfigError, ModelFormatError) as exc:
            print(f"[{name}] config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        code = cmd_run(cfg, model, out / name)
        print(f"[{name}] exit {code}")
        worst = max(worst, code)
    return worst


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spinesim",
        description="Tensegrity spine simulation and control workbench")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
            ("invstat", "generate the equilibrium input trajectory"),
            ("rank-check", "rank audit of the rigid-body equilibrium matrix"),
            ("run", "closed-loop simulation"),
            ("linearize-check", "finite-difference Jacobian audit"),
            ("batch", "run a batch file of experiments")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", type=Path, default=None,
                       help="YAML experiment config (defaults apply if omitted)")
        p.add_argument("--out", type=Path, default=Path("out"),
                       help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override sim.seed")
        p.add_argument("--override", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted config override")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"sim.seed={args.seed}")
    if args.command == "batch":
        if args.config is None:
            print("batch requires --config", file=sys.stderr)
            return EXIT_CONFIG
        return cmd_batch(args.config, args.out, overrides)
    try:
        cfg = resolve_config(args.config, overrides)
        model = resolve_model(cfg.model)
    except (ConfigError, ModelFormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    command = {
        "invstat": cmd_invstat,
        "rank-check": cmd_rank_check,
        "run": cmd_run,
        "linearize-check": cmd_linearize_check,
    }[args.command]
    try:
        return command(cfg, model, args.out)
    except ValueError as exc:
        # Bad derived settings (timestep ratios, sweep grids, ...) are
        # configuration errors at this boundary.
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
