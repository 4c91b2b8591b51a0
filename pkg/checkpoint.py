"""
Parameter checkpoint codec.

Layout (all integers little-endian):

    magic    4 bytes  b"ASEG"
    version  uint8    1
    count    uint32   number of records
    record * count:
        name_len  uint16
        name      UTF-8 bytes
        ndim      uint8
        dims      ndim x uint32
        payload   prod(dims) x float64, row-major

See docs/CHECKPOINT_FORMAT.md.
"""

import logging
import struct
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

from errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"ASEG"
VERSION = 1


def encode_checkpoint(params: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<BI", VERSION, len(params))]
    for name, array in params.items():
        encoded = name.encode("utf-8")
        array = np.ascontiguousarray(array, dtype="<f8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(array.tobytes())
    return b"".join(chunks)


def decode_checkpoint(blob: bytes) -> Dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    try:
        version, count = struct.unpack_from("<BI", blob, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        offset = 9
        params: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, offset)
            offset += 4 * ndim
            size = int(np.prod(shape))
            payload = np.frombuffer(blob, dtype="<f8", count=size, offset=offset)
            offset += 8 * size
            params[name] = payload.astype(np.float64).reshape(shape)
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"truncated or corrupt checkpoint: {e}") from e
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes after {count} records")
    return params


def save_checkpoint(path: Union[str, Path], params: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(params))
    logger.info("Saved %d parameters to %s", len(params), path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return decode_checkpoint(blob)
