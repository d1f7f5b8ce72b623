"""
Binary parameter container shared by the extractor ("EGNX") and model
("EGNM") checkpoints.

Layout, little-endian::

    magic            4 bytes
    version          u32
    config length    u32, followed by the config as canonical JSON (utf-8)
    parameter count  u32
    per parameter:
        name length  u32, followed by the name (utf-8)
        rank         u32
        dims         rank x u64
        values       prod(dims) x f64
"""
import json
import logging
import os
import struct
from typing import Any, Dict, List, Mapping, Tuple

import numpy as np

from .errors import CheckpointError

__all__ = (
    "FORMAT_VERSION",
    "canonical_json",
    "encode_container",
    "decode_container",
    "write_container",
    "read_container",
    "write_atomic",
)

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


def canonical_json(obj: Any) -> str:
    "Sorted keys, two-space indent, trailing newline."
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def encode_container(
    magic: bytes, config: Mapping[str, Any], params: List[Tuple[str, np.ndarray]]
) -> bytes:
    if len(magic) != 4:
        raise CheckpointError(f"Magic must be 4 bytes, got {magic!r}.")

    config_bytes = canonical_json(config).encode("utf-8")
    parts = [
        magic,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<I", len(config_bytes)),
        config_bytes,
        struct.pack("<I", len(params)),
    ]
    for name, value in params:
        value = np.asarray(value, dtype="<f8")
        name_bytes = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<I", value.ndim))
        parts.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        parts.append(np.ascontiguousarray(value).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, path: str) -> None:
        self.data = data
        self.path = path
        self.offset = 0

    def read(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise CheckpointError(f"{self.path!r} is truncated at byte {self.offset}.")
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str) -> Tuple[Any, ...]:
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def decode_container(
    data: bytes, magic: bytes, path: str = "<bytes>"
) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """
    Inverse of `encode_container`. Returns (config, parameters) with the
    parameters in file order.
    """
    reader = _Reader(data, path)
    found = reader.read(4)
    if found != magic:
        raise CheckpointError(f"{path!r}: expected magic {magic!r}, found {found!r}.")
    (version,) = reader.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path!r}: unsupported format version {version}.")

    (config_length,) = reader.unpack("<I")
    try:
        config = json.loads(reader.read(config_length).decode("utf-8"))
    except ValueError as e:
        raise CheckpointError(f"{path!r}: config block is not valid JSON ({e}).")

    (count,) = reader.unpack("<I")
    params: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_length,) = reader.unpack("<I")
        name = reader.read(name_length).decode("utf-8")
        (rank,) = reader.unpack("<I")
        shape = reader.unpack(f"<{rank}Q") if rank else ()
        n = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(reader.read(8 * n), dtype="<f8")
        params[name] = values.astype(np.float64).reshape(shape)

    if reader.offset != len(data):
        raise CheckpointError(f"{path!r}: {len(data) - reader.offset} trailing bytes.")
    return config, params


def write_atomic(path: str, data: bytes) -> None:
    "Write through a temporary file, so readers never see half a file."
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def write_container(
    path: str, magic: bytes, config: Mapping[str, Any], params: List[Tuple[str, np.ndarray]]
) -> None:
    write_atomic(path, encode_container(magic, config, params))
    logger.info("Wrote %s (%d tensors)", path, len(params))


def read_container(path: str, magic: bytes) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except FileNotFoundError:
        raise CheckpointError(f"No such checkpoint: {path!r}.")
    return decode_container(data, magic, path)
