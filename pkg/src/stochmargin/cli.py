"""Command-line entry point: ``stochmargin <command> [options]``.

Exit codes: 0 ok, 1 input error, 2 runtime fault, 3 study error.
"""
import argparse
from dataclasses import replace
import json
import math
from pathlib import Path
import sys

from . import io, montecarlo
from .integrator import SimulationFault, System
from .network import CaseError

EXIT_OK, EXIT_INPUT, EXIT_FAULT, EXIT_STUDY = 0, 1, 2, 3
DEFAULT_SCENARIO = "ieee39_load_noise.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _common(p, trials=False):
    src = p.add_mutually_exclusive_group()
    src.add_argument("--case", help="case file; bundled names such as two_bus.json also work")
    src.add_argument("--scenario", help="scenario file (defaults to the bundled IEEE 39-bus load-noise study)")
    p.add_argument("--seed", type=int, help="base seed")
    p.add_argument("--dt", type=float, help="integration step in seconds")
    p.add_argument("--out-dir", default=".", help="output directory (default: current directory)")
    if trials:
        p.add_argument("--trials", type=int, help="number of Monte Carlo trials")
        p.add_argument("--parallelism", type=int, help="worker processes")
        p.add_argument("--dump-trajectories", type=int, nargs="?", const=-1, metavar="N",
                       help="write trajectory_<id>.csv for the first N trials (all if N is omitted)")


def build_parser():
    parser = _Parser(prog="stochmargin",
                     description="Dynamic voltage stability margins under stochastic load and renewables.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _common(sub.add_parser("run", help="full Monte Carlo study"), trials=True)
    p = sub.add_parser("single", help="one trial with a trajectory dump")
    _common(p)
    p.add_argument("--trial", type=int, default=0, help="trial index within the study (default 0)")
    _common(sub.add_parser("deterministic", help="noise-free margin"))
    _common(sub.add_parser("validate", help="check a case or scenario and exit"))
    p = sub.add_parser("stats", help="recompute statistics from a margins.csv")
    p.add_argument("margins", nargs="?", help="margins.csv (default: <out-dir>/margins.csv)")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--bin-width", type=float, default=10.0, help="histogram bin width in MW")
    p.add_argument("--deterministic-margin", type=float, default=math.nan)
    return parser


def _scenario(args, noisy_default):
    if args.case:
        sc = io.scenario_from_case(args.case)
        if noisy_default:
            sc = replace(sc, load_noise=replace(sc.load_noise, enabled=True))
    else:
        sc = io.load_scenario(args.scenario or DEFAULT_SCENARIO)
    if args.dt is not None:
        if not args.dt > 0:
            raise io.InputError("--dt", "dt", f"must be > 0, got {args.dt}")
        sc = sc.with_integration(dt=args.dt)
    return sc


def _cmd_run(args):
    sc = _scenario(args, noisy_default=True)
    st = sc.study
    n = st.n_trials if args.trials is None else args.trials
    seed = st.base_seed if args.seed is None else args.seed
    par = st.parallelism if args.parallelism is None else args.parallelism
    if n < 1 or par < 1:
        raise io.InputError("command line", "--trials/--parallelism", "must be >= 1")
    dump = args.dump_trajectories
    record = () if dump is None else range(n if dump < 0 else min(dump, n))
    res = montecarlo.run_study(sc, n, seed, par, record=record)
    out = montecarlo.write_outputs(args.out_dir, res, st.bin_width_mw)
    s = res.stats
    print(f"trials {s.n_trials} (collapsed {s.n_collapsed}, no collapse {s.n_no_collapse}, faults {s.n_faults})")
    print(f"mean {s.mean_mw:.2f} MW, std {s.std_mw:.2f} MW, d90 {s.d90_mw:.2f} MW, "
          f"deterministic {s.deterministic_margin_mw:.2f} MW")
    print(f"outputs in {out}")
    return EXIT_OK


def _cmd_single(args):
    sc = _scenario(args, noisy_default=True)
    base = sc.study.base_seed if args.seed is None else args.seed
    seed = montecarlo.trial_seed(base, args.trial)
    r = System(sc).run(seed, trial_id=args.trial, record=True)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"trajectory_{args.trial}.csv"
    montecarlo.write_trajectory(path, r.trajectory)
    _print_trial(r)
    print(f"trajectory written to {path}")
    return EXIT_OK


def _print_trial(r):
    if r.collapsed:
        print(f"margin {r.margin_mw:.3f} MW ({r.cause} at t = {r.t_collapse:.2f} s)")
    else:
        print("no collapse within the simulated time")
    for t, what in r.events:
        print(f"  t = {t:8.2f} s  {what}")


def _cmd_deterministic(args):
    sc = _scenario(args, noisy_default=False)
    _print_trial(montecarlo.run_deterministic(sc))
    return EXIT_OK


def _cmd_validate(args):
    sc = _scenario(args, noisy_default=False)
    c, d = sc.case, sc.devices
    print(f"ok: {c.n_bus} buses, {len(c.branches)} branches, {len(d.erls)} recovery loads, "
          f"{len(d.generators)} generators, {len(d.ltcs)} tap changers, "
          f"{len(d.renewables)} renewables, ramp at bus {d.ramp.bus}")
    return EXIT_OK


def _cmd_stats(args):
    path = Path(args.margins) if args.margins else Path(args.out_dir) / "margins.csv"
    if not path.exists():
        raise io.InputError(str(path), "margins", "file not found")
    try:
        records = montecarlo.read_margins(path)
    except ValueError as exc:
        raise io.InputError(str(path), "margins", str(exc)) from None
    stats = montecarlo.margin_stats(records, args.deterministic_margin)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    montecarlo.write_stats(out / "stats.json", stats)
    montecarlo.write_histogram(out / "histogram.csv", montecarlo.histogram(records, args.bin_width))
    print(json.dumps({"n_trials": stats.n_trials, "mean_mw": stats.mean_mw, "std_mw": stats.std_mw,
                      "d90_mw": stats.d90_mw}))
    return EXIT_OK


_COMMANDS = {"run": _cmd_run, "single": _cmd_single, "deterministic": _cmd_deterministic,
             "validate": _cmd_validate, "stats": _cmd_stats}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (io.InputError, CaseError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except montecarlo.StudyError as exc:
        print(f"study error: {exc}", file=sys.stderr)
        return EXIT_STUDY
    except (SimulationFault, ArithmeticError, RuntimeError, ValueError) as exc:
        print(f"runtime fault: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
