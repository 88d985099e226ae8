"""Little-endian binary block helpers shared by the LAVM and LAVT formats."""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np


class FormatError(ValueError):
    """Base class for malformed artifact files."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class NonFiniteValueError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


def write_u32(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<I", value))


def write_str(fh: BinaryIO, text: str) -> None:
    raw = text.encode("utf-8")
    write_u32(fh, len(raw))
    fh.write(raw)


def write_f32(fh: BinaryIO, values: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise TruncatedFileError(f"truncated file while reading {what}: wanted {n} bytes, got {len(raw)}")
    return raw


def read_u32(fh: BinaryIO, what: str) -> int:
    return struct.unpack("<I", read_exact(fh, 4, what))[0]


def read_str(fh: BinaryIO, what: str) -> str:
    n = read_u32(fh, f"{what} length")
    return read_exact(fh, n, what).decode("utf-8")


def read_f32(fh: BinaryIO, count: int, what: str) -> np.ndarray:
    arr = np.frombuffer(read_exact(fh, 4 * count, what), dtype="<f4").astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValueError(f"non-finite values in {what}")
    return arr


def check_magic(fh: BinaryIO, magic: bytes) -> None:
    got = fh.read(len(magic))
    if got != magic:
        raise BadMagicError(f"bad magic: expected {magic!r}, got {got!r}")


def write_array_block(fh: BinaryIO, name: str, arr: np.ndarray) -> None:
    write_str(fh, name)
    write_u32(fh, arr.ndim)
    for d in arr.shape:
        write_u32(fh, d)
    write_f32(fh, arr)


def read_array_block(fh: BinaryIO) -> tuple[str, np.ndarray]:
    name = read_str(fh, "block name")
    rank = read_u32(fh, f"rank of {name}")
    dims = tuple(read_u32(fh, f"dims of {name}") for _ in range(rank))
    count = int(np.prod(dims)) if dims else 1
    return name, read_f32(fh, count, f"values of {name}").reshape(dims)
