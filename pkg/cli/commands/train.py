import argparse
import logging
from pathlib import Path

from cli.commands.common import add_config_arguments, emit, load_config, load_manifest
from services.train_service import TrainService

logger = logging.getLogger(__name__)


def run(args: argparse.Namespace) -> int:
    config = load_config(args)
    manifest = load_manifest(args.data)
    result = TrainService.run_experiment(config, manifest, args.out, max_steps=args.max_steps, resume=args.resume,
                                         progress=not args.no_progress)
    counts = result.parameters
    emit(params=counts["student"], teacher_params=counts["teacher"], encoder=counts["encoder"],
         decoder1=counts["decoder1"], decoder2=counts["decoder2"])
    last = result.log.records[-1] if result.log.records else None
    if last is not None:
        emit(iterations=last.iter + 1, l_total=last.l_total, out=args.out)
    if result.report is not None:
        mean = result.report.mean
        emit(split=result.report.split, dsc=mean.dsc, hd=mean.hd, hd95=mean.hd95, asd=mean.asd,
             degenerate=mean.degenerate_count)
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("train", help="train the dual-decoder student with its EMA teacher")
    add_config_arguments(parser)
    parser.add_argument("--data", type=Path, required=True, help="manifest file or dataset directory")
    parser.add_argument("--out", type=Path, required=True)
    parser.add_argument("--resume", type=Path, help="continue from a checkpoint")
    parser.add_argument("--max-steps", type=int, help="stop after this iteration without changing the schedule")
    parser.add_argument("--no-progress", action="store_true")
    parser.set_defaults(func=run)
