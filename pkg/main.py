import argparse
import logging
import sys
from typing import List, Optional

from config import configure_logging
from core.errors import HDCError
from cli.commands.ablate import register as register_ablate
from cli.commands.evaluate import register as register_eval
from cli.commands.gen_data import register as register_gen_data
from cli.commands.train import register as register_train
from cli.commands.verify import register as register_verify

logger = logging.getLogger("hdc")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hdc-seg", description="Semi-supervised segmentation with hierarchical "
                                     "distillation and consistency (mean teacher, dual-decoder student)")
    parser.add_argument("--log-level", help="overrides HDC_LOG_LEVEL")
    subparsers = parser.add_subparsers(dest="command", required=True)

    # Include commands
    register_gen_data(subparsers)
    register_train(subparsers)
    register_eval(subparsers)
    register_verify(subparsers)
    register_ablate(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    configure_logging(args.log_level.upper() if args.log_level else None)
    try:
        return args.func(args)
    except HDCError as e:
        logger.error("%s: %s", type(e).__name__, e.detail)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
