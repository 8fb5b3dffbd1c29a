"""
Command-line entry point::

    rollingcs <command> --config <path|name> [--seed N] [--out DIR] [--no-plots]

Commands: gen, measure, reconstruct, compare-solvers, sweep, nyquist,
phase-sweep, rip-probe.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import experiments as ex
from .config import SWEEP_PARAMS, ConfigError, load_config

COMMANDS = ("gen", "measure", "reconstruct", "compare-solvers", "sweep", "nyquist",
            "phase-sweep", "rip-probe")

log = logging.getLogger("rollingcs")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="config JSON path or bundled config name")
    common.add_argument("--seed", type=int, default=None, help="override the config's rng_seed")
    common.add_argument("--out", default=None, help="override the config's output directory")
    common.add_argument("--no-plots", action="store_true", help="skip SVG plots")
    common.add_argument("--workers", type=int, default=1,
                        help="worker processes for sweep cells (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="rollingcs", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "sweep":
            sp.add_argument("--axis", choices=SWEEP_PARAMS, default=None,
                            help="sweep axis (default: the config's sweep.param)")
        if name == "phase-sweep":
            sp.add_argument("--system", default="single",
                            help="single, double or single_4x (or a system named in the config)")
    return p


def run(args):
    cfg = load_config(args.config).with_overrides(seed=args.seed, out=args.out)
    plots = not args.no_plots
    cmd = args.command
    if cmd == "gen":
        return ex.cmd_gen(cfg, plots)
    if cmd == "measure":
        return ex.cmd_measure(cfg, plots)
    if cmd == "reconstruct":
        return ex.cmd_reconstruct(cfg, plots)
    if cmd == "compare-solvers":
        return ex.cmd_compare_solvers(cfg, plots)
    if cmd == "sweep":
        return ex.cmd_sweep(cfg, args.axis, plots, args.workers)
    if cmd == "nyquist":
        return ex.cmd_nyquist(cfg, plots, args.workers)
    if cmd == "phase-sweep":
        return ex.cmd_phase_sweep(cfg, args.system, plots, args.workers)
    if cmd == "rip-probe":
        return ex.cmd_rip_probe(cfg, plots, args.workers)
    raise ValueError(cmd)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        result = run(args)
    except (ConfigError, ex.MissingInputError, FileNotFoundError, ValueError) as e:
        print(f"rollingcs {args.command}: error: {e}", file=sys.stderr)
        return 2
    for f in result.get("files", []):
        print(f)
    return 0


if __name__ == "__main__":
    sys.exit(main())
