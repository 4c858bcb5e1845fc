"""Command-line entry point.

Usage: p2flow run CONFIG [--out DIR] [--threads K] [--exact-curvature]

Exit codes: 0 completed, 1 configuration error, 2 time-step underflow.
The --threads option must take effect before the numerics stack loads,
so this module defers all heavy imports into main().
"""

from __future__ import annotations

import argparse
import os
import sys


def _build_parser():
    parser = argparse.ArgumentParser(prog="p2flow")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a benchmark configuration")
    run.add_argument("config", help="path to a key = value config file")
    run.add_argument("--out", default=None, metavar="DIR",
                     help="directory for CSV/VTK artifacts")
    run.add_argument("--threads", type=int, default=None, metavar="K",
                     help="cap BLAS/OpenMP threads")
    run.add_argument("--exact-curvature", action="store_true",
                     help="replace the discrete curvature by the analytic one")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    from dataclasses import replace

    from . import bench

    try:
        case, config, raw = bench.parse_config(args.config)
    except bench.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    if args.exact_curvature:
        case = replace(case, exact_curvature=True)

    print(f"case: {case.name}")
    for key in sorted(raw):
        print(f"  {key} = {raw[key]}")
    print(f"  (dt target {case.dt_target:.6g}, eps {case.fluids.eps:.6g})")

    if case.name == "static_disc":
        report = bench.run_static_disc(case, config, out_dir=args.out)
        last = max(report.rows)
        speed, rel = report.rows[last]
        print(f"final: max speed {speed:.3e}, dp rel err {rel:.3e}")
        return 0

    run = bench.run_bubble(case, config, out_dir=args.out)
    if run.underflow:
        print("time-step underflow: partial series saved", file=sys.stderr)
        return 2
    err = bench.volume_error(run.series, case.reference_volume())
    print(f"completed: {run.nts_used} increments, {run.halvings_total} halvings, "
          f"Error(V_b) = {err:.4e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
