"""Command-line entry point: ``rmdp {run,sweep,plot,verify,oracle}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .core import RMdpError
from .envs import ResourceGatheringConfig, VelocityTrackConfig, rg_optimal_oracle, vt_partition_oracle
from .experiment import RUN_ALGORITHMS, load_config, read_progress_csv, run, sweep
from .plots import PLOT_KINDS, plot_assignment_histogram, plot_file, plot_learning_curve, plot_sw_vs_k
from .verify import report_json, run_checks


def _int_list(text: str) -> list[int]:
    """``"1,3,5"`` or ``"0-9"`` (inclusive) or a mix of both."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    return out


def _add_config_args(p):
    p.add_argument("--config", type=Path, help="key = value configuration file")
    p.add_argument("overrides", nargs="*", metavar="key=value", help="configuration overrides")


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.overrides)
    outcome = run(cfg, args.out)
    records = read_progress_csv(outcome.directory / "progress.csv")
    plot_learning_curve(records, outcome.directory / "learning_curve.svg")
    targets = cfg.env_config().target_array() if cfg.env == "velocity" else None
    plot_assignment_histogram(outcome.alpha, outcome.directory / "assignment.svg", targets)
    print(f"final social welfare {outcome.final_sw:.4f}")
    print(f"run directory {outcome.directory}")
    return 0


def cmd_sweep(args) -> int:
    template = load_config(args.config, args.overrides)
    algos = [a.strip() for a in args.algos.split(",") if a.strip()]
    for a in algos:
        if a not in RUN_ALGORITHMS:
            raise RMdpError(f"unknown algorithm {a!r}; expected one of {RUN_ALGORITHMS}")

    def progress(cfg, sw):
        print(f"{cfg.algorithm} k={cfg.k} seed={cfg.seed} sw={sw:.4f}", flush=True)

    rows = sweep(template, algos, _int_list(args.k), _int_list(args.seeds), args.out, progress=progress)
    print("algo,k,seeds,mean_sw,se_sw,oracle_sw,failures")
    for r in rows:
        print(f"{r['algo']},{r['k']},{r['seeds']},{r['mean_sw']:.4f},{r['se_sw']:.4f},{r['oracle_sw']:.4f},"
              f"{r['failures']}")
    finite = [r for r in rows if np.isfinite(r["mean_sw"])]
    if finite:
        plot_sw_vs_k(finite, Path(args.out) / "sw_vs_k.svg")
    return 1 if any(r["failures"] for r in rows) else 0


def cmd_plot(args) -> int:
    info = plot_file(args.kind, args.inputs, args.out, args.targets)
    print(info.path)
    return 0


def cmd_verify(args) -> int:
    checks = run_checks(corrupt_gradient=args.corrupt_gradient)
    text = report_json(checks)
    if args.out:
        Path(args.out).write_text(text + "\n")
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: measured {c.measured:.6g}, threshold {c.threshold:.6g}")
    return 0 if all(c.passed for c in checks) else 1


def cmd_oracle(args) -> int:
    if args.env == "resource_gathering":
        per_agent, sw = rg_optimal_oracle(ResourceGatheringConfig())
        print(f"resource_gathering k=25 optimum {sw:.4f}")
        return 0
    if args.targets:
        from .plots import read_targets_csv
        targets = read_targets_csv(args.targets)
    else:
        cfg = load_config(None, ["env=velocity", f"n={args.n}", f"k={args.k}", f"seed={args.seed}",
                                 f"velocity_bound={args.b}"])
        targets = cfg.env_config().target_array()
    sw, bounds = vt_partition_oracle(targets, args.k, args.b)
    print(f"velocity n={len(targets)} k={args.k} b={args.b} partition reference {sw:.4f}")
    print("groups of sorted agents " + " ".join(f"[{lo}, {hi})" for lo, hi in bounds))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rmdp", description="Policies for many agents under a policy budget.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one configuration")
    _add_config_args(p)
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="cross product of algorithms, k values and seeds")
    _add_config_args(p)
    p.add_argument("--algos", default="em,end_to_end,clustering,random")
    p.add_argument("--k", default="1,2,3,5,10,25", help="k values, e.g. 1,3,5 or 1-5")
    p.add_argument("--seeds", default="0-9")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", help="render an SVG from run or sweep CSVs")
    p.add_argument("kind", choices=PLOT_KINDS)
    p.add_argument("inputs", nargs="+", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--targets", type=Path, help="targets.csv of a velocity run")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("verify", help="run the structural checks and print a report")
    p.add_argument("--out", type=Path, help="write the JSON report here")
    p.add_argument("--corrupt-gradient", action="store_true", help="mutation test: perturb the actor gradient")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("oracle", help="print exact reference welfare values")
    p.add_argument("env", choices=("resource_gathering", "velocity"))
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--b", type=float, default=4.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--targets", type=Path)
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except RMdpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
