"""Command-line surface: run, verify and export.

Exit codes: 0 success, 1 verification failure, 2 invalid input or
configuration, 3 solver or internal failure, 4 file system error.
"""
import argparse
import logging
import sys
from pathlib import Path

from app.config import LOG_LEVEL, THREADS
from app.errors import ThbError
from app.schemas import CommandResult
from app.services import runner, verification
from app.services.geometry_io import load_run_config
from app.version import get_version

logger = logging.getLogger(__name__)

EXIT_IO = 4


def _print_table(records) -> None:
    print(f"{'iter':>4} {'dofs':>8} {'elements':>9} {'l2_error':>14} {'estimator':>14}")
    for rec in records:
        l2 = "-" if rec.l2_error is None else f"{rec.l2_error:.6e}"
        est = "-" if rec.estimator_total is None else f"{rec.estimator_total:.6e}"
        print(f"{rec.iteration:>4} {rec.dofs:>8} {rec.elements:>9} {l2:>14} {est:>14}")


def cmd_run(args: argparse.Namespace) -> CommandResult:
    config = load_run_config(args.config)
    outcome = runner.execute_run(config, workers=args.threads)
    _print_table(outcome.result.records)
    return CommandResult(success=True, message=f"results written to {outcome.run_dir}")


def cmd_verify(args: argparse.Namespace) -> CommandResult:
    results = verification.run_checks(inject_fault=args.inject_fault, quick=args.quick)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<24} {r.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        return CommandResult(success=False, message=f"failed checks: {', '.join(failed)}", exit_code=1)
    return CommandResult(success=True, message=f"all {len(results)} checks passed")


def cmd_export(args: argparse.Namespace) -> CommandResult:
    path = runner.export_from_run(args.run_dir, args.what, args.output, args.resolution)
    return CommandResult(success=True, message=f"wrote {path}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="thb-bezier",
        description="Adaptive isogeometric analysis with THB-splines and multi-level Bezier extraction",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {get_version()}")
    parser.add_argument("--log-level", default=LOG_LEVEL, help="logging level (default: THB_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an adaptive simulation from a config file")
    run.add_argument("config", type=Path, help="run configuration (key = value lines)")
    run.add_argument("--threads", type=int, default=THREADS, help="worker threads for element loops")
    run.set_defaults(handler=cmd_run)

    verify = sub.add_parser("verify", help="run the self-check battery")
    verify.add_argument("--inject-fault", action="store_true",
                        help="corrupt one extraction operator; the battery must fail")
    verify.add_argument("--quick", action="store_true", help="shorter convergence study")
    verify.set_defaults(handler=cmd_verify)

    export = sub.add_parser("export", help="re-export results of a finished run")
    export.add_argument("--what", choices=("fields", "mesh", "hierarchy", "matrix"), required=True)
    export.add_argument("--from", dest="run_dir", type=Path, required=True, help="run directory")
    export.add_argument("--output", type=Path, default=None, help="output file")
    export.add_argument("--resolution", type=int, default=None, help="samples per patch direction")
    export.set_defaults(handler=cmd_export)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        result = args.handler(args)
    except ThbError as exc:
        logger.error("%s", exc)
        result = CommandResult(success=False, message=str(exc), exit_code=exc.exit_code)
    except OSError as exc:
        logger.error("file system error: %s", exc)
        result = CommandResult(success=False, message=str(exc), exit_code=EXIT_IO)
    print(result.message, file=sys.stdout if result.success else sys.stderr)
    return result.exit_code
