"""Command line entry point: nsmalliavin <subcommand> --config FILE [options]."""

import argparse
import json
import os
import sys

import numpy as np

from .config import ConfigError, parse_config
from .dynamics import BlowUp
from .harness import CheckFailed, MissingSeries, RunManifest, export_plotdata, read_series, run_experiment
from .malliavin import NonConvergence
from .spanning import check_condition1, reachable_modes

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4

SUBCOMMANDS = ("simulate", "energy-check", "jacobian-check", "spanning", "malliavin", "nondegeneracy",
               "control-probe", "lyapunov", "mixing", "irreducibility")


def _parse_modes(s):
    try:
        return [tuple(int(v) for v in p.split(",")) for p in s.split(";") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"modes must look like '1,0;-1,0', got {s!r}") from None


def _parse_interval(s):
    try:
        a, b = (float(v) for v in s.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"interval must look like 's,t', got {s!r}") from None
    return (a, b)


def build_parser():
    p = argparse.ArgumentParser(prog="nsmalliavin", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="experiment config (INI-style sections)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory (overrides the config; env NSMALLIAVIN_OUT wins)")
        sp.add_argument("--paths", type=int, help="number of paths (n_paths)")
        sp.add_argument("--workers", type=int)
        sp.add_argument("--figures", action="store_true", help="also render PNG figures next to series.csv")
        if name == "spanning":
            sp.add_argument("--modes", type=_parse_modes, help="forced modes, e.g. '1,0;-1,0;1,1;-1,-1'")
            sp.add_argument("--radius", type=int, default=6)
            sp.add_argument("--max-iter", type=int, default=50)
        if name == "malliavin":
            sp.add_argument("--interval", type=_parse_interval)
            sp.add_argument("--node-stride", type=int)
            sp.add_argument("--alpha", type=float)
            sp.add_argument("--N", type=int)
            sp.add_argument("--radius", type=int, help="Galerkin truncation radius")
    rp = sub.add_parser("report", help="export plot data and render figures for a finished run")
    rp.add_argument("run", help="run directory (containing manifest.json)")
    return p


def _spanning_direct(args):
    ok, _ = check_condition1(args.modes)
    rep = reachable_modes(args.modes, args.radius, args.max_iter).as_dict()
    rep["condition1"] = ok
    print(json.dumps(rep, sort_keys=True))
    return EXIT_OK if ok and rep["covered"] else EXIT_CHECK


def _report(args):
    try:
        man = RunManifest.load(args.run)
    except FileNotFoundError:
        print(f"error: no manifest in {args.run!r} (run missing or failed)", file=sys.stderr)
        return EXIT_CONFIG
    man.out_dir = args.run
    try:
        names = export_plotdata(man)
    except MissingSeries as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CHECK
    from . import plotting

    names += plotting.render_run(args.run, read_series(os.path.join(args.run, "series.csv")), man.kind)
    for n in names:
        print(os.path.join(args.run, n))
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "report":
        return _report(args)
    if args.command == "spanning" and args.modes is not None and args.config is None:
        return _spanning_direct(args)
    if args.config is None:
        print("error: --config is required", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with open(args.config, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        print(f"error: cannot read config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = parse_config(text, kind=args.command)
        over = {"seed": args.seed, "out": args.out, "workers": args.workers, "n_paths": args.paths}
        if args.command == "malliavin":
            over.update(interval=args.interval, node_stride=args.node_stride, alpha=args.alpha, N=args.N,
                        galerkin_radius=args.radius)
        if args.command == "spanning" and args.modes is not None:
            print("error: give either --config or --modes, not both", file=sys.stderr)
            return EXIT_CONFIG
        cfg = cfg.with_overrides(**over)
    except ConfigError as e:
        for msg in e.errors:
            print(f"config error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        man = run_experiment(cfg, figures=args.figures)
    except CheckFailed as e:
        print(f"check failed: {e}", file=sys.stderr)
        return EXIT_CHECK
    except (BlowUp, NonConvergence, np.linalg.LinAlgError, FloatingPointError, OverflowError) as e:
        print(f"numerical failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    print(os.path.join(man.out_dir, "manifest.json"))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
