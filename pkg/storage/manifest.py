"""Dataset manifest text format.

Header lines are ``key=value`` (seed, width, height, labeled, unlabeled, classes); each
following line is one record ``<split>\\t<image-path>\\t<mask-path|UNLABELED>`` with paths
relative to the manifest's directory.
"""

from pathlib import Path
from typing import Optional, Union

from pydantic import ValidationError

from core.errors import DataIOError, FormatError
from schemas.schema import UNLABELED, DatasetManifest, ManifestRecord, Split

MANIFEST_NAME = "manifest.txt"
_HEADER_KEYS = {"seed": "seed", "width": "width", "height": "height", "labeled": "labeled",
                "unlabeled": "unlabeled", "classes": "num_classes"}


def encode_manifest(manifest: DatasetManifest) -> str:
    lines = [
        f"seed={manifest.seed}",
        f"width={manifest.width}",
        f"height={manifest.height}",
        f"labeled={manifest.labeled}",
        f"unlabeled={manifest.unlabeled}",
        f"classes={manifest.num_classes}",
    ]
    for record in manifest.records:
        lines.append(f"{record.split.value}\t{record.image}\t{record.mask or UNLABELED}")
    return "\n".join(lines) + "\n"


def decode_manifest(text: str, root: Union[str, Path], path: Optional[str] = None) -> DatasetManifest:
    header = {}
    records = []
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if "\t" in line:
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(f"line {number}: expected 3 tab-separated fields, got {len(parts)}", path=path)
            split, image, mask = parts
            try:
                records.append(ManifestRecord(split=Split(split), image=image,
                                              mask=None if mask == UNLABELED else mask))
            except ValueError:
                raise FormatError(f"line {number}: unknown split {split!r}", path=path) from None
            continue
        key, sep, value = line.partition("=")
        if not sep or key.strip() not in _HEADER_KEYS or records:
            raise FormatError(f"line {number}: unexpected header line {line!r}", path=path)
        try:
            header[_HEADER_KEYS[key.strip()]] = int(value)
        except ValueError:
            raise FormatError(f"line {number}: {key.strip()} is not an integer", path=path) from None
    missing = [k for k, field in _HEADER_KEYS.items() if field not in header and k != "classes"]
    if missing:
        raise FormatError(f"manifest header is missing {', '.join(missing)}", path=path)
    try:
        return DatasetManifest(root=str(root), records=records, **header)
    except ValidationError as e:
        raise FormatError(f"inconsistent manifest: {e.errors()[0]['msg']}", path=path) from None


def write_manifest(manifest: DatasetManifest, path: Union[str, Path, None] = None) -> Path:
    path = Path(path) if path is not None else Path(manifest.root) / MANIFEST_NAME
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(encode_manifest(manifest), encoding="utf-8")
    except OSError as e:
        raise DataIOError(f"cannot write {path}: {e.strerror or e}") from e
    return path


def read_manifest(path: Union[str, Path]) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise DataIOError(f"cannot read manifest {path}: {e}") from e
    return decode_manifest(text, path.parent, str(path))
