"""
This module handles the binary model file.

The naming conventions for `decode` and `raw_decode` functions are that:
- `decode` functions take `bytes` objects expecting a single model
- `raw_decode` takes `BytesIO` objects that may have extraneous data at the
  end and only consumes as much as it needs to parse the next model

Model layout
    Field                          | Size
    -----------------------------------------------------------------
    magic "HMDP"                   | 4 bytes
    format version                 | 4 bytes, unsigned little endian
    length of header JSON          | 1 to 9 bytes VarInt
    header JSON (config, metadata) | <previous field> bytes, UTF-8
    number of tensors              | 1 to 9 bytes VarInt
    shape table, per tensor:
        length of name             | 1 to 9 bytes VarInt
        name                       | <previous field> bytes, ASCII
        number of dimensions       | 1 to 9 bytes VarInt
        dimensions                 | one VarInt each
    weights                        | 8 bytes per value, little-endian
                                   | float64, tensors in table order,
                                   | C order within a tensor
    SHA-256 of the weights         | 32 bytes
"""

from __future__ import annotations

import json
import logging
from io import BytesIO
from typing import Dict, List, Tuple

import numpy as np

from .deeppot import MODEL_CONVENTIONS, DPConfig, DPModel
from .exceptions import DecodeError, ModelFormatError
from .util import PathLike, assert_read, atomic_write_bytes, encode_varint, raw_decode_varint, sha256_hex

logger = logging.getLogger(__name__)

MAGIC = b"HMDP"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f8")


def _encode_shape_table(model: DPModel) -> bytes:
    parts = [encode_varint(len(model.params))]
    for name, value in model.params.items():
        raw = name.encode("ascii")
        parts += [encode_varint(len(raw)), raw, encode_varint(value.ndim)]
        parts += [encode_varint(n) for n in value.shape]
    return b"".join(parts)


def encode_model(model: DPModel) -> bytes:
    """Serialize a model"""
    header = json.dumps(
        {"config": model.config.to_dict(), "metadata": model.metadata}, sort_keys=True
    ).encode("utf-8")
    weights = b"".join(np.ascontiguousarray(v, dtype=_DTYPE).tobytes() for v in model.params.values())
    return b"".join(
        [
            MAGIC,
            FORMAT_VERSION.to_bytes(4, byteorder="little"),
            encode_varint(len(header)),
            header,
            _encode_shape_table(model),
            weights,
            bytes.fromhex(sha256_hex(weights)),
        ]
    )


def decode_model(b: bytes) -> DPModel:
    """Decode a model from the encoded bytes"""
    with BytesIO(b) as f:
        model = raw_decode_model(f)
        if f.read(1):
            raise DecodeError("Extra data")
    return model


def _raw_decode_shape_table(f: BytesIO) -> List[Tuple[str, Tuple[int, ...]]]:
    table = []
    for _ in range(raw_decode_varint(f)):
        raw = assert_read(f, raw_decode_varint(f))
        try:
            name = raw.decode("ascii")
        except UnicodeDecodeError as e:
            raise DecodeError(f"tensor name is not ASCII: {raw!r}") from e
        ndim = raw_decode_varint(f)
        table.append((name, tuple(raw_decode_varint(f) for _ in range(ndim))))
    return table


def raw_decode_model(f: BytesIO) -> DPModel:
    """Decode (raw) a model from the encoded bytes"""
    magic = assert_read(f, 4)
    if magic != MAGIC:
        raise ModelFormatError(f"not a model file (magic {magic!r})")
    version = int.from_bytes(assert_read(f, 4), byteorder="little")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(assert_read(f, raw_decode_varint(f)).decode("utf-8"))
        config = DPConfig.from_dict(header["config"])
        metadata = dict(header["metadata"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise ModelFormatError(f"corrupted model header: {e}") from e
    for key, value in MODEL_CONVENTIONS.items():
        if metadata.get(key, value) != value:
            raise ModelFormatError(f"model was trained with {key}={metadata[key]!r}, evaluation uses {value!r}")

    table = _raw_decode_shape_table(f)
    expected = list(config.param_shapes().items())
    if table != expected:
        raise ModelFormatError(f"shape table does not match the configuration: got {table}, expected {expected}")

    params: Dict[str, np.ndarray] = {}
    chunks = []
    for name, shape in table:
        raw = assert_read(f, int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize)
        chunks.append(raw)
        params[name] = np.frombuffer(raw, dtype=_DTYPE).astype(np.float64).reshape(shape)
    digest = assert_read(f, 32)
    if digest.hex() != sha256_hex(b"".join(chunks)):
        raise ModelFormatError("weight checksum mismatch")
    return DPModel(config, params, metadata)


def save_model(path: PathLike, model: DPModel) -> str:
    """Write a model atomically; returns the SHA-256 of the file"""
    data = encode_model(model)
    atomic_write_bytes(path, data)
    logger.info("saved model with %d parameters to %s", model.n_params, path)
    return sha256_hex(data)


def load_model(path: PathLike) -> DPModel:
    """Read a model written by `save_model`"""
    with open(path, "rb") as f:
        return decode_model(f.read())
