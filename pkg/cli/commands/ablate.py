import argparse
from pathlib import Path

from cli.commands.common import add_config_arguments, emit, load_config, load_manifest
from services.train_service import ABLATION_ROWS, TrainService


def run(args: argparse.Namespace) -> int:
    config = load_config(args)
    manifest = load_manifest(args.data)
    summary = TrainService.run_ablation(config, manifest, args.out, args.seeds, args.rows or tuple(ABLATION_ROWS))
    for row in summary["rows"]:
        emit(seed=row.seed, row=row.row, dsc=row.dsc, hd=row.hd, hd95=row.hd95, asd=row.asd)
    emit(seeds=len(args.seeds), full_beats_suponly=summary["full_beats_suponly"],
         full_best_count=summary["full_best_count"], table=Path(args.out) / "ablation.csv")
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("ablate", help="SupOnly and the loss-switch rows over several seeds")
    add_config_arguments(parser)
    parser.add_argument("--data", type=Path, required=True, help="manifest file or dataset directory")
    parser.add_argument("--out", type=Path, required=True)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--rows", nargs="+", choices=list(ABLATION_ROWS))
    parser.set_defaults(func=run)
