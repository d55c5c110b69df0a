"""
SADT tensor files.

Layout: magic ``SADT``, version byte 0x01, dtype byte (0x00 f32, 0x01 u8),
ndim byte, ndim little-endian u32 extents, then the raw row-major payload
(f32 little-endian or u8).

Usage:
    >>> from sada.sadt import save_tensor, load_tensor
    >>> save_tensor("mask.sadt", mask)          # uint8 array
    >>> load_tensor("mask.sadt").dtype
    dtype('uint8')
"""

import struct
from pathlib import Path
from typing import Union

import numpy as np

from .exceptions import SadaArtifactError, SadaDataError

MAGIC = b"SADT"
VERSION = 0x01
DTYPE_F32 = 0x00
DTYPE_U8 = 0x01

_CODES = {DTYPE_F32: np.dtype("<f4"), DTYPE_U8: np.dtype("u1")}


def encode(array: np.ndarray) -> bytes:
    """Serialize a float32 or uint8 array.

    Other float dtypes are rounded to float32; other integer dtypes are rejected.
    """
    arr = np.asarray(array)
    if arr.dtype == np.uint8:
        code = DTYPE_U8
    elif np.issubdtype(arr.dtype, np.floating):
        code = DTYPE_F32
    else:
        raise SadaArtifactError(
            f"SADT stores float32 or uint8 tensors, got {arr.dtype}",
            suggestion="Cast masks to uint8 and activations to float32 before saving",
        )
    if arr.ndim > 255:
        raise SadaArtifactError(f"SADT supports at most 255 axes, got {arr.ndim}")
    payload = np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()
    header = MAGIC + bytes([VERSION, code, arr.ndim]) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + payload


def decode_from(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns (array, next offset)."""
    if len(buf) < offset + 7:
        raise SadaArtifactError("Truncated SADT header")
    if buf[offset:offset + 4] != MAGIC:
        raise SadaArtifactError(f"Bad SADT magic {bytes(buf[offset:offset + 4])!r}")
    version, code, ndim = buf[offset + 4], buf[offset + 5], buf[offset + 6]
    if version != VERSION:
        raise SadaArtifactError(f"Unsupported SADT version {version}")
    if code not in _CODES:
        raise SadaArtifactError(f"Unknown SADT dtype code {code}")
    pos = offset + 7
    if len(buf) < pos + 4 * ndim:
        raise SadaArtifactError("Truncated SADT extents")
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    dtype = _CODES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise SadaArtifactError(f"Truncated SADT payload: need {nbytes} bytes, have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape)
    native = np.float32 if code == DTYPE_F32 else np.uint8
    return arr.astype(native), pos + nbytes


def decode(buf: bytes) -> np.ndarray:
    """Decode a buffer that holds exactly one tensor."""
    arr, end = decode_from(buf)
    if end != len(buf):
        raise SadaArtifactError(f"{len(buf) - end} trailing bytes after SADT tensor")
    return arr


def save_tensor(path: Union[str, Path], array: np.ndarray) -> None:
    """Write ``array`` to ``path`` as a SADT file."""
    path = Path(path)
    try:
        path.write_bytes(encode(array))
    except OSError as e:
        raise SadaDataError(f"Cannot write {path}: {e}", path=str(path)) from e


def load_tensor(path: Union[str, Path]) -> np.ndarray:
    """Read a SADT file."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise SadaDataError(f"Cannot read {path}: {e}", path=str(path)) from e
    try:
        return decode(buf)
    except SadaArtifactError as e:
        raise SadaArtifactError(e.message, path=str(path)) from e
