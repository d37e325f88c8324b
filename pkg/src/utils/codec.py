"""Binary container shared by checkpoints and datasets.

Layout (little-endian):
    magic (4 bytes) | version (u32) | metadata length (u64) | metadata JSON |
    raw float64 payloads, one per entry of ``metadata['tensors']`` in order.

The JSON is written with sorted keys and fixed separators so saving the same
content twice yields identical bytes.
"""
import json
import struct
from pathlib import Path
from typing import Any, Dict, List, Tuple

import numpy as np

from ..errors import DataError, FormatError

FORMAT_VERSION = 1
_HEADER = struct.Struct('<4sIQ')


def encode_container(magic: bytes, meta: Dict[str, Any], tensors: List[Tuple[str, np.ndarray]]) -> bytes:
    if len(magic) != 4:
        raise FormatError(f'magic must be 4 bytes, got {magic!r}')
    meta = dict(meta)
    meta['tensors'] = [{'name': name, 'shape': list(np.shape(arr))} for name, arr in tensors]
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(',', ':')).encode('utf-8')
    parts = [_HEADER.pack(magic, FORMAT_VERSION, len(meta_bytes)), meta_bytes]
    for _, arr in tensors:
        parts.append(np.ascontiguousarray(arr, dtype='<f8').tobytes())
    return b''.join(parts)


def decode_container(blob: bytes, magic: bytes) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    if len(blob) < _HEADER.size:
        raise FormatError('file truncated inside the header')
    found_magic, version, meta_len = _HEADER.unpack_from(blob, 0)
    if found_magic != magic:
        raise FormatError(f'bad magic {found_magic!r}, expected {magic!r}')
    if version != FORMAT_VERSION:
        raise FormatError(f'unsupported format version {version}, expected {FORMAT_VERSION}')
    offset = _HEADER.size
    if len(blob) < offset + meta_len:
        raise FormatError('file truncated inside the metadata block')
    try:
        meta = json.loads(blob[offset:offset + meta_len].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f'corrupt metadata: {str(e)}')
    offset += meta_len

    tensors: Dict[str, np.ndarray] = {}
    for entry in meta.get('tensors', []):
        shape = tuple(int(s) for s in entry['shape'])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if len(blob) < offset + nbytes:
            raise FormatError(f"file truncated inside tensor '{entry['name']}'")
        arr = np.frombuffer(blob, dtype='<f8', count=nbytes // 8, offset=offset).reshape(shape)
        tensors[entry['name']] = arr.astype(np.float64)
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f'{len(blob) - offset} trailing bytes after the last tensor')
    return meta, tensors


def write_container(path: str, magic: bytes, meta: Dict[str, Any], tensors: List[Tuple[str, np.ndarray]]) -> str:
    target = Path(path)
    blob = encode_container(magic, meta, tensors)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(blob)
    except OSError as e:
        raise DataError(f'cannot write {path}: {str(e)}')
    return str(target)


def read_container(path: str, magic: bytes) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise FormatError(f'file not found: {path}')
    return decode_container(blob, magic)
