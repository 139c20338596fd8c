"""HDC1 checkpoint container.

All integers are little-endian::

    magic "HDC1" | version u32 | section count u32
    section table: count x (offset u64, length u64)
    sections, each:
        kind u8 (0 = tensor, 1 = json) | name length u16 | name (utf-8)
        tensor: rank u8 | dims rank x u32 | payload prod(dims) x f32
        json:   length u32 | utf-8 text
        crc32 u32 over the section bytes above

Tensors are stored as 4-byte floats. A checkpoint written from float32 parameters
therefore reloads bit-for-bit.
"""

import json
import struct
import zlib
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

from core.errors import ContractError, DataIOError, FormatError

MAGIC = b"HDC1"
VERSION = 1
KIND_TENSOR = 0
KIND_JSON = 1
META_SECTION = "meta"

_HEADER = struct.Struct("<4sII")
_TABLE_ENTRY = struct.Struct("<QQ")


def _encode_section(kind: int, name: str, body: bytes) -> bytes:
    name_bytes = name.encode("utf-8")
    if len(name_bytes) > 0xFFFF:
        raise ContractError(f"section name too long: {name[:40]}...")
    section = struct.pack("<BH", kind, len(name_bytes)) + name_bytes + body
    return section + struct.pack("<I", zlib.crc32(section))


def _tensor_body(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.ndim > 255:
        raise ContractError(f"tensor rank {array.ndim} is too large for a checkpoint")
    dims = struct.pack(f"<B{array.ndim}I", array.ndim, *array.shape)
    return dims + np.ascontiguousarray(array, dtype="<f4").tobytes()


def encode_checkpoint(tensors: Dict[str, np.ndarray], meta: Dict[str, Any]) -> bytes:
    sections = [_encode_section(KIND_TENSOR, name, _tensor_body(array)) for name, array in tensors.items()]
    text = json.dumps(meta, sort_keys=True).encode("utf-8")
    sections.append(_encode_section(KIND_JSON, META_SECTION, struct.pack("<I", len(text)) + text))

    offset = _HEADER.size + _TABLE_ENTRY.size * len(sections)
    table = b""
    for section in sections:
        table += _TABLE_ENTRY.pack(offset, len(section))
        offset += len(section)
    return _HEADER.pack(MAGIC, VERSION, len(sections)) + table + b"".join(sections)


def _unpack(fmt: str, data: bytes, offset: int, what: str) -> Tuple:
    size = struct.calcsize(fmt)
    if offset + size > len(data):
        raise FormatError(f"truncated checkpoint while reading {what}", offset=offset)
    return struct.unpack_from(fmt, data, offset)


def _decode_section(data: bytes, start: int, length: int) -> Tuple[str, Any]:
    end = start + length
    if length < 7 or end > len(data):
        raise FormatError("section extends past the end of the file", offset=start)
    (stored_crc,) = struct.unpack_from("<I", data, end - 4)
    if zlib.crc32(data[start:end - 4]) != stored_crc:
        raise FormatError("section checksum mismatch", offset=start)
    kind, name_length = _unpack("<BH", data, start, "section header")
    cursor = start + 3
    name = data[cursor:cursor + name_length].decode("utf-8", errors="replace")
    cursor += name_length
    if kind == KIND_TENSOR:
        (rank,) = _unpack("<B", data, cursor, "tensor rank")
        dims = _unpack(f"<{rank}I", data, cursor + 1, "tensor dims")
        cursor += 1 + 4 * rank
        count = int(np.prod(dims, dtype=np.int64))
        if cursor + 4 * count != end - 4:
            raise FormatError(f"tensor {name!r} payload size does not match dims {list(dims)}", offset=cursor)
        return name, np.frombuffer(data, dtype="<f4", count=count, offset=cursor).reshape(dims).astype(np.float32)
    if kind == KIND_JSON:
        (size,) = _unpack("<I", data, cursor, "json length")
        cursor += 4
        if cursor + size != end - 4:
            raise FormatError(f"json section {name!r} length mismatch", offset=cursor)
        try:
            return name, json.loads(data[cursor:cursor + size].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"json section {name!r} is not valid: {e}", offset=cursor) from None
    raise FormatError(f"unknown section kind {kind}", offset=start)


def decode_checkpoint(data: bytes) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    magic, version, count = _unpack("<4sII", data, 0, "header")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    tensors: Dict[str, np.ndarray] = {}
    meta = None
    for index in range(count):
        entry_offset = _HEADER.size + index * _TABLE_ENTRY.size
        start, length = _unpack("<QQ", data, entry_offset, "section table")
        name, value = _decode_section(data, start, length)
        if isinstance(value, np.ndarray):
            tensors[name] = value
        elif name == META_SECTION:
            meta = value
    if meta is None:
        raise FormatError("checkpoint has no meta section", offset=len(data))
    return tensors, meta


def save_checkpoint(path: Union[str, Path], tensors: Dict[str, np.ndarray], meta: Dict[str, Any]) -> Path:
    path = Path(path)
    payload = encode_checkpoint(tensors, meta)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(payload)
        tmp.replace(path)
    except OSError as e:
        raise DataIOError(f"cannot write checkpoint {path}: {e.strerror or e}") from e
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataIOError(f"cannot read checkpoint {path}: {e.strerror or e}") from e
    try:
        return decode_checkpoint(data)
    except FormatError as e:
        error = FormatError(e.detail, path=str(path))
        error.offset = e.offset
        raise error from None
