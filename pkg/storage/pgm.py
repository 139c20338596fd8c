"""Binary 8-bit grayscale PGM (P5)."""

import re
from pathlib import Path
from typing import Union

import numpy as np

from core.errors import ContractError, DataIOError, FormatError

_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def encode_pgm(pixels: np.ndarray) -> bytes:
    if pixels.ndim != 2:
        raise ContractError(f"PGM stores 2-D images, got shape {pixels.shape}")
    if pixels.dtype != np.uint8:
        raise ContractError(f"PGM payload must be uint8, got {pixels.dtype}")
    height, width = pixels.shape
    return b"P5\n%d %d\n255\n" % (width, height) + np.ascontiguousarray(pixels).tobytes()


def decode_pgm(data: bytes, path: Union[str, Path, None] = None) -> np.ndarray:
    where = None if path is None else str(path)
    match = _HEADER.match(data)
    if match is None:
        raise FormatError("not a binary PGM (bad magic or header)", offset=0, path=where)
    width, height, maxval = (int(g) for g in match.groups())
    if maxval != 255:
        raise FormatError(f"unsupported PGM maxval {maxval}", offset=match.start(3), path=where)
    start = match.end()
    expected = width * height
    payload = data[start:start + expected]
    if len(payload) != expected:
        raise FormatError(f"truncated PGM payload: {len(payload)} of {expected} bytes", offset=start + len(payload),
                          path=where)
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()


def write_pgm(path: Union[str, Path], pixels: np.ndarray) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_pgm(pixels))
    except OSError as e:
        raise DataIOError(f"cannot write {path}: {e.strerror or e}") from e


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataIOError(f"cannot read {path}: {e.strerror or e}") from e
    return decode_pgm(data, path)


def to_pixels(image: np.ndarray) -> np.ndarray:
    """[0, 1] floats to 8-bit, round half to even."""
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def from_pixels(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float64) / 255.0
