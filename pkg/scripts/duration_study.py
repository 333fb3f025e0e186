#!/usr/bin/env python3
"""Sweep-duration study for the tracking controller.

Runs the same bend at several durations and tabulates the tracking error;
slower sweeps approach the quasi-static regime where the equilibrium input
reference is exact, so the error should shrink monotonically.
"""

import argparse
from pathlib import Path

from spinesim import (RunSettings, TrackingConfig, default_spine_2d,
                      default_sweep, error_metrics, larger_spine_2d,
                      run_closed_loop)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--durations", type=float, nargs="+",
                    default=[3.0, 10.0, 30.0])
    ap.add_argument("--dt-sim", type=float, default=1e-5)
    ap.add_argument("--dt-control", type=float, default=1e-3)
    ap.add_argument("--large", action="store_true")
    ap.add_argument("--out", type=Path, default=Path("out/duration_study"))
    args = ap.parse_args()

    model = larger_spine_2d() if args.large else default_spine_2d()
    args.out.mkdir(parents=True, exist_ok=True)
    rows = ["duration_s,max_com_err_cm,mean_com_err_cm,final_com_err_cm"]
    for T in args.durations:
        spec = default_sweep(model, duration=T)
        settings = RunSettings(duration=T, dt_sim=args.dt_sim,
                               dt_control=args.dt_control)
        trace = run_closed_loop(model, "tracking", spec, TrackingConfig(),
                                settings)
        com = error_metrics(trace, model)["com_path_cm"]["body_1"]
        rows.append(f"{T},{com['max']:.6g},{com['mean']:.6g},{com['final']:.6g}")
        print(rows[-1])
    (args.out / "duration_study.csv").write_text("\n".join(rows) + "\n")


if __name__ == "__main__":
    main()
