import argparse
import sys

from cli.commands.common import emit
from services.verify_service import SUITES, VerifyService


def run(args: argparse.Namespace) -> int:
    results = VerifyService.run(args.suite or None)
    sys.stderr.write(VerifyService.table(results) + "\n")
    failed = sum(not r.passed for r in results)
    emit(passed=len(results) - failed, failed=failed, seconds=sum(r.seconds for r in results))
    VerifyService.require_all(results)
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("verify", help="run the gradient, entropy, metric and EMA property suites")
    parser.add_argument("--suite", action="append", choices=list(SUITES), help="run only this suite (repeatable)")
    parser.set_defaults(func=run)
