"""
qmt-hybrid command line.

    qmt-hybrid synth --config brockett.ini --out out/
    qmt-hybrid simulate --x0 1,0,0 --s0 omega
    qmt-hybrid sweep --threads 8

Results go to stdout as JSON, diagnostics to stderr. Exit code 0 on
success, 1 on any failure.
"""

import argparse
import json
import logging
import sys
from typing import Any, Dict, List, Optional

from core.command_registry import execute_command
from core.field_cache import to_jsonable
from core.hysteresis import MODES

from . import __version__
from .config import get_runtime_config
from .constants import S0_OMEGA


def _common(parser: argparse.ArgumentParser, threads: bool = True, mode: bool = True) -> None:
    parser.add_argument("--config", default=None, help="Scenario file (default: built-in Brockett scenario)")
    parser.add_argument("--out", default=None, help="Output directory (default: [output] directory)")
    parser.add_argument("--verbose", "-v", action="store_true", help="Log at INFO to stderr")
    if mode:
        parser.add_argument("--mode", choices=MODES, default=None, help="Flow-set variant for ω")
    if threads:
        parser.add_argument("--threads", type=int, default=None, help="Worker threads (default: QMTH_THREADS)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qmt-hybrid", description="Quasi-minimal-time hybrid stabilization: synthesis and simulation"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="Build the time field, cut locus, patches, shells and feedback")
    _common(synth)
    synth.add_argument("--seed", type=int, default=0, help="Base seed for certification runs")

    simulate = sub.add_parser("simulate", help="One hybrid run with its certificate")
    _common(simulate, threads=False)
    simulate.add_argument("--seed", type=int, default=0, help="Noise seed")
    simulate.add_argument("--x0", required=True, help="Start point, comma separated")
    simulate.add_argument("--s0", default=S0_OMEGA, help="omega, nearest or patch:<k> (default: omega)")
    simulate.add_argument("--run", type=int, default=0, help="Run index k in arc_<k>.csv")
    simulate.add_argument("--noise-scale", type=float, default=None, help="Override [hybrid] noise_scale")

    sweep = sub.add_parser("sweep", help="Quasi-optimality sweep over the working box")
    _common(sweep)
    sweep.add_argument("--seed", type=int, default=0, help="First noise seed")
    sweep.add_argument("--noise-scale", type=float, default=None, help="Override [hybrid] noise_scale")

    cutlocus = sub.add_parser("cutlocus", help="Dump flagged cells of the stored field")
    _common(cutlocus, threads=False, mode=False)

    certify = sub.add_parser("certify", help="Re-run certificates on stored arcs")
    _common(certify, threads=False)
    return parser


def _command_kwargs(args: argparse.Namespace) -> Dict[str, Any]:
    kwargs: Dict[str, Any] = {"config": args.config, "out": args.out}
    for name in ("seed", "threads", "x0", "s0", "run", "noise_scale"):
        if hasattr(args, name):
            kwargs[name] = getattr(args, name)
    if getattr(args, "mode", None) is not None:
        kwargs["mode"] = args.mode
    return kwargs


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.INFO if args.verbose else get_runtime_config().log_level_value()
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")

    result = execute_command(args.command, **_command_kwargs(args))
    json.dump(result, sys.stdout, indent=2, sort_keys=True, default=to_jsonable)
    sys.stdout.write("\n")
    if not result.get("success", False):
        stage = result.get("stage")
        where = f" at stage {stage}" if stage else ""
        print(f"qmt-hybrid {args.command} failed{where}: {result.get('error')}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
