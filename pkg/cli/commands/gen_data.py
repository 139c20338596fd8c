import argparse
import logging
import re
from pathlib import Path
from typing import Tuple

from cli.commands.common import emit
from core.errors import UsageError
from services.config_service import ConfigService
from services.data_service import DataService
from storage.manifest import MANIFEST_NAME

logger = logging.getLogger(__name__)

_SIZE = re.compile(r"^(\d+)[xX](\d+)$")


def parse_size(text: str) -> Tuple[int, int]:
    """``HxW`` -> (height, width)."""
    match = _SIZE.match(text.strip())
    if not match:
        raise UsageError(f"--size must look like 64x64, got {text!r}")
    return int(match.group(1)), int(match.group(2))


def run(args: argparse.Namespace) -> int:
    height, width = parse_size(args.size)
    values = {"data.seed": str(args.seed), "data.n_total": str(args.n), "data.labeled_fraction": str(args.labeled_frac),
              "data.height": str(height), "data.width": str(width), "data.n_val": str(args.val),
              "data.n_test": str(args.test), "data.num_classes": str(args.classes)}
    data = ConfigService.build(values).data
    manifest = DataService.generate_dataset(data.seed, data.n_total, data.labeled_fraction, data.height, data.width,
                                            args.out, n_val=data.n_val, n_test=data.n_test,
                                            num_classes=data.num_classes)
    emit(manifest=Path(args.out) / MANIFEST_NAME, labeled=manifest.labeled, unlabeled=manifest.unlabeled,
         val=data.n_val, test=data.n_test)
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("gen-data", help="write a synthetic ultrasound-like dataset and its manifest")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--n", type=int, default=500, help="training images, labeled and unlabeled")
    parser.add_argument("--labeled-frac", type=float, default=0.1)
    parser.add_argument("--size", default="64x64", help="HxW, both divisible by 8")
    parser.add_argument("--val", type=int, default=10)
    parser.add_argument("--test", type=int, default=50)
    parser.add_argument("--classes", type=int, default=2, help="2 (one structure) or 3 (two structures)")
    parser.add_argument("--out", type=Path, required=True)
    parser.set_defaults(func=run)
