import argparse
import logging
import sys
from pathlib import Path

from cli.commands.common import emit, load_manifest
from core.tensor import precision
from schemas.schema import Split
from services.metric_service import MetricService
from services.train_service import TrainService

logger = logging.getLogger(__name__)


def run(args: argparse.Namespace) -> int:
    session = TrainService.load(args.checkpoint)
    config = session.config
    manifest = load_manifest(args.data)
    network = args.network or config.eval.network
    with precision(config.train.precision):
        report = MetricService.evaluate_model(session.model, manifest, args.split, network, config.eval.batch_size)
    if args.out is None:
        sys.stdout.write(report.to_csv())
        sys.stdout.flush()
    else:
        MetricService.write_report(report, args.out)
        mean = report.mean
        emit(split=report.split, network=network, dsc=mean.dsc, hd=mean.hd, hd95=mean.hd95, asd=mean.asd,
             degenerate=mean.degenerate_count, report=args.out)
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("eval", help="score a checkpoint on one split")
    parser.add_argument("--checkpoint", type=Path, required=True)
    parser.add_argument("--data", type=Path, required=True, help="manifest file or dataset directory")
    parser.add_argument("--split", choices=[s.value for s in Split], default=Split.TEST.value)
    parser.add_argument("--network", choices=["student", "teacher"], help="defaults to the checkpoint's eval.network")
    parser.add_argument("--out", type=Path, help="write the report CSV here instead of stdout")
    parser.set_defaults(func=run)
