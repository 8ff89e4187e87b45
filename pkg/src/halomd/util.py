"""
This module contains utility functions.

The varint helpers and `assert_read` back the binary model file; the rest
are small IO helpers shared by the command-line tools.
"""

from __future__ import annotations

import os
import tempfile
from io import BytesIO
from pathlib import Path
from typing import Optional, Union

import numpy as np
from cryptography.hazmat.primitives import hashes

from .exceptions import DecodeError

PathLike = Union[str, "os.PathLike[str]"]


def encode_varint(i: int) -> bytes:
    r"""
    Encode an unsigned variable-length integer in little endian.

    Used for the shape table of model files, where most values fit in a byte.

    >>> encode_varint(16)
    b'\x10'
    >>> encode_varint(300)
    b'\xfd,\x01'
    """
    if i < 0:
        raise ValueError(f"invalid: {i!r}")
    if i < 0xFD:
        return i.to_bytes(1, byteorder="little")
    if i <= 0xFFFF:
        return b"\xFD" + i.to_bytes(2, byteorder="little")
    if i <= 0xFFFF_FFFF:
        return b"\xFE" + i.to_bytes(4, byteorder="little")
    if i <= 0xFFFF_FFFF_FFFF_FFFF:
        return b"\xFF" + i.to_bytes(8, byteorder="little")
    raise ValueError(f"invalid: {i!r}")


def assert_read(f: BytesIO, n: int) -> bytes:
    """
    Read and assert length is as expected

    >>> f = BytesIO(b"HMDP")
    >>> assert_read(f, 4)
    b'HMDP'
    >>> assert_read(f, 8)
    Traceback (most recent call last):
      ...
    halomd.exceptions.DecodeError: Expecting length 8
    """
    d = f.read(n)
    if len(d) != n:
        raise DecodeError(f"Expecting length {n:d}")
    return d


def decode_varint(b: bytes) -> int:
    r"""
    Decode a variable-length integer that must use up all of `b`

    >>> decode_varint(b"\xfd,\x01")
    300
    """
    with BytesIO(b) as f:
        n = raw_decode_varint(f)
        if f.read(1):
            raise DecodeError("Extra data")
    return n


def raw_decode_varint(f: BytesIO) -> int:
    r"""
    Decode (raw) a variable-length integer, leaving the rest of the stream

    >>> b = BytesIO(b"\x03\x10")
    >>> raw_decode_varint(b)
    3
    >>> b.read()
    b'\x10'
    """
    sentinel = assert_read(f, 1)
    if sentinel < b"\xFD":
        return int.from_bytes(sentinel, byteorder="little")
    if sentinel == b"\xFD":
        d = assert_read(f, 2)
    elif sentinel == b"\xFE":
        d = assert_read(f, 4)
    else:  # sentinel == b"\xFF":
        d = assert_read(f, 8)
    return int.from_bytes(d, byteorder="little")


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    """
    Write `data` to `path` through a temporary file in the same directory,
    so readers never observe a partially written file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    """Text counterpart of `atomic_write_bytes` (UTF-8)"""
    return atomic_write_bytes(path, text.encode("utf-8"))


def sha256_hex(data: bytes) -> str:
    """
    SHA-256 digest of `data` as hex

    >>> sha256_hex(b"")[:16]
    'e3b0c44298fc1c14'
    """
    digest = hashes.Hash(hashes.SHA256())
    digest.update(data)
    return digest.finalize().hex()


def sha256_file(path: PathLike) -> str:
    """SHA-256 digest of a file's contents as hex"""
    with open(path, "rb") as f:
        return sha256_hex(f.read())


def make_rng(seed: Optional[int]) -> np.random.Generator:
    """The one way randomness enters the package"""
    return np.random.default_rng(seed)
