import argparse
from pathlib import Path

from core.errors import UsageError
from schemas.config_schema import ExperimentConfig
from schemas.schema import DatasetManifest
from services.config_service import ConfigService
from storage.manifest import read_manifest


def emit(**values) -> None:
    """One machine-parseable ``key=value`` summary line on stdout."""
    print(" ".join(f"{key}={_text(value)}" for key, value in values.items()), flush=True)


def _text(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def add_config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="key = value configuration file")
    parser.add_argument("--override", action="extend", nargs="+", default=[], metavar="KEY=VALUE",
                        help="configuration overrides, applied after the file")


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    return ConfigService.load(args.config, args.override)


def load_manifest(path: Path) -> DatasetManifest:
    if path is None:
        raise UsageError("--data is required")
    return read_manifest(path)
