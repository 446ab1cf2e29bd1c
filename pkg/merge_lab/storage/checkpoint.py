"""
Checkpoint Storage Module

Reads and writes the MRGL named-tensor container used for model checkpoints and
dataset caches. Layout (all integers little-endian):

    magic "MRGL" | version u32 | entry count u64 |
    entries: name_len u32, name UTF-8, ndim u32, dims u64 x ndim, dtype u8, payload |
    CRC-64/XZ u64 of every preceding byte

dtype 0 is float32 (4 bytes per element), dtype 1 is raw bytes. Tensors are
quantized from float64 to float32 only here, with round-to-nearest-even.
"""

import json
import math
import struct
from pathlib import Path
from typing import Dict, List, Mapping, Tuple, Union

import numpy as np
from pydantic import ValidationError

from merge_lab.errors import (
    BadMagicError,
    CheckpointFormatError,
    ChecksumMismatchError,
    DomainError,
    TruncatedCheckpointError,
    UnsupportedVersionError,
)
from merge_lab.models.zoo import Activation, Layer, Model, ModelMeta
from merge_lab.tensor.core import freeze
from merge_lab.utils.logger import get_logger

logger = get_logger(__name__)

MAGIC = b"MRGL"
VERSION = 1

DTYPE_F32 = 0
DTYPE_BYTES = 1

META_ENTRY = "__meta__"

# CRC-64/XZ: ECMA-182 polynomial, reflected, init and xor-out all ones
_CRC64_POLY = 0xC96C5795D7870F42
_CRC64_MASK = 0xFFFFFFFFFFFFFFFF
_CRC64_TABLE: List[int] = []

PathLike = Union[str, Path]
EntryValue = Union[np.ndarray, bytes]


def _init_crc64_table() -> None:
    if _CRC64_TABLE:
        return
    for i in range(256):
        crc = i
        for _ in range(8):
            if crc & 1:
                crc = (crc >> 1) ^ _CRC64_POLY
            else:
                crc >>= 1
        _CRC64_TABLE.append(crc)


def crc64(data: bytes, crc: int = 0) -> int:
    """
    CRC-64/XZ of data, optionally continuing from a previous result.

    crc64(b"123456789") == 0x995DC9BBDF1939FA.
    """
    _init_crc64_table()
    crc ^= _CRC64_MASK
    for byte in data:
        crc = _CRC64_TABLE[(crc ^ byte) & 0xFF] ^ (crc >> 8)
    return crc ^ _CRC64_MASK


def _encode_entry(name: str, value: EntryValue) -> bytes:
    encoded_name = name.encode("utf-8")
    if isinstance(value, (bytes, bytearray)):
        dims: Tuple[int, ...] = (len(value),)
        dtype, payload = DTYPE_BYTES, bytes(value)
    else:
        array = np.asarray(value, dtype=np.float64)
        quantized = array.astype("<f4")
        if not np.all(np.isfinite(quantized)):
            raise CheckpointFormatError(f"tensor {name!r} is not finite in float32")
        dims = tuple(int(d) for d in array.shape)
        dtype, payload = DTYPE_F32, quantized.tobytes(order="C")
    return b"".join(
        [
            struct.pack("<I", len(encoded_name)),
            encoded_name,
            struct.pack("<I", len(dims)),
            struct.pack(f"<{len(dims)}Q", *dims),
            struct.pack("<B", dtype),
            payload,
        ]
    )


def encode_tensors(named: Mapping[str, EntryValue]) -> bytes:
    """Serialize named entries, in mapping order, to container bytes."""
    body = b"".join(
        [MAGIC, struct.pack("<IQ", VERSION, len(named))]
        + [_encode_entry(name, value) for name, value in named.items()]
    )
    return body + struct.pack("<Q", crc64(body))


def write_tensors(named: Mapping[str, EntryValue], path: PathLike) -> None:
    """
    Write named tensors (or raw byte blobs) to a container file.

    The file is written beside the target and renamed into place, so readers never
    see a partial file.
    """
    data = encode_tensors(named)
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_name(target.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(target)
    logger.debug(f"Wrote {len(named)} entries ({len(data)} bytes) to {target}")


class _Reader:
    def __init__(self, data: bytes, end: int) -> None:
        self.data = data
        self.end = end
        self.pos = 0

    def take(self, size: int, what: str) -> bytes:
        if size < 0 or self.pos + size > self.end:
            raise TruncatedCheckpointError(f"file ends inside {what} at byte {self.pos}")
        chunk = self.data[self.pos : self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple[int, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_tensors(data: bytes) -> Dict[str, np.ndarray]:
    """
    Parse container bytes.

    Returns:
        Dict[str, np.ndarray]: float32 entries as float64 tensors, byte entries as uint8.

    Raises:
        BadMagicError, UnsupportedVersionError, TruncatedCheckpointError,
        ChecksumMismatchError, CheckpointFormatError
    """
    if len(data) < len(MAGIC):
        raise TruncatedCheckpointError(f"file has only {len(data)} bytes")
    if data[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"expected magic {MAGIC!r}, found {data[:4]!r}")
    if len(data) < 16 + 8:
        raise TruncatedCheckpointError(f"file has only {len(data)} bytes")
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version}, this reader supports {VERSION}")

    reader = _Reader(data, len(data) - 8)
    reader.pos = 8
    (count,) = reader.unpack("<Q", "entry count")
    entries: Dict[str, np.ndarray] = {}
    for index in range(count):
        (name_len,) = reader.unpack("<I", f"entry {index} name length")
        try:
            name = reader.take(name_len, f"entry {index} name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointFormatError(f"entry {index} name is not UTF-8") from e
        (ndim,) = reader.unpack("<I", f"entry {name!r} rank")
        dims = reader.unpack(f"<{ndim}Q", f"entry {name!r} dims")
        (dtype,) = reader.unpack("<B", f"entry {name!r} dtype")
        elements = math.prod(dims)
        if dtype == DTYPE_F32:
            payload = reader.take(4 * elements, f"entry {name!r} payload")
            value = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(dims)
        elif dtype == DTYPE_BYTES:
            payload = reader.take(elements, f"entry {name!r} payload")
            value = np.frombuffer(payload, dtype=np.uint8).reshape(dims)
        else:
            raise CheckpointFormatError(f"entry {name!r} has unknown dtype tag {dtype}")
        if name in entries:
            raise CheckpointFormatError(f"duplicate entry name {name!r}")
        entries[name] = freeze(value.copy())
    if reader.pos != reader.end:
        raise CheckpointFormatError(
            f"{reader.end - reader.pos} unexpected bytes before the checksum footer"
        )

    (stored,) = struct.unpack("<Q", data[-8:])
    computed = crc64(data[:-8])
    if stored != computed:
        raise ChecksumMismatchError(f"checksum {stored:#018x} does not match {computed:#018x}")
    return entries


def read_tensors(path: PathLike) -> Dict[str, np.ndarray]:
    """Read a container file written by write_tensors."""
    return decode_tensors(Path(path).read_bytes())


def write_checkpoint(model: Model, path: PathLike) -> None:
    """
    Write a model's parameters and metadata.

    Entries are __meta__ (UTF-8 JSON) followed by layer{i}.weight and layer{i}.bias.

    Raises:
        DomainError: If the model has no layers.
    """
    if not model.layers:
        raise DomainError("refusing to write a model without layers")
    meta = {
        "activations": [layer.activation.kind for layer in model.layers],
        **model.meta.model_dump(),
    }
    named: Dict[str, EntryValue] = {
        META_ENTRY: json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    }
    for i, layer in enumerate(model.layers):
        named[f"layer{i}.weight"] = layer.weight
        named[f"layer{i}.bias"] = layer.bias
    write_tensors(named, path)


def read_checkpoint(path: PathLike) -> Model:
    """
    Read a model written by write_checkpoint.

    Parameters come back as float64 holding the stored float32 values exactly.
    """
    entries = read_tensors(path)
    if META_ENTRY not in entries:
        raise CheckpointFormatError(f"{path} has no {META_ENTRY} entry")
    try:
        meta = json.loads(entries[META_ENTRY].tobytes().decode("utf-8"))
        activations = meta.pop("activations")
        layers = tuple(
            Layer(
                weight=entries[f"layer{i}.weight"],
                bias=entries[f"layer{i}.bias"],
                activation=Activation(kind=kind),
            )
            for i, kind in enumerate(activations)
        )
        return Model(layers=layers, meta=ModelMeta(**meta))
    except KeyError as e:
        raise CheckpointFormatError(f"{path} is missing entry {e}") from e
    except (ValueError, ValidationError) as e:
        raise CheckpointFormatError(f"{path} holds an invalid model: {e}") from e
