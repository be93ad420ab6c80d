"""
Checkpoint files: a versioned header followed by named little-endian arrays.

Layout::

    magic  b'GRASPCKP'
    uint32 version
    uint32 array count
    per array:
        uint16 name length, name (utf-8)
        uint8  dtype code (0 float32, 1 float64, 2 int64)
        uint8  ndim, uint32 x ndim dims
        raw little-endian data
"""
import logging
import os
import struct
from pathlib import Path

import numpy as np

from .exceptions import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b'GRASPCKP'
VERSION = 1
DTYPE_CODES = {0: np.dtype('<f4'), 1: np.dtype('<f8'), 2: np.dtype('<i8')}
CODE_FOR_KIND = {('f', 4): 0, ('f', 8): 1, ('i', 8): 2}


def save_checkpoint(path, arrays):
    """Write ``arrays`` (name -> ndarray) to ``path`` atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack('<II', VERSION, len(arrays))]
    for name, value in arrays.items():
        value = np.asarray(value)
        if value.dtype.kind == 'i':
            value = value.astype(np.int64)
        code = CODE_FOR_KIND.get((value.dtype.kind, value.dtype.itemsize))
        if code is None:
            raise CheckpointError(f"Cannot store array {name!r} of dtype {value.dtype}")
        encoded = name.encode('utf-8')
        chunks.append(struct.pack('<H', len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack('<BB', code, value.ndim))
        chunks.append(struct.pack(f'<{value.ndim}I', *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype=DTYPE_CODES[code]).tobytes())
    tmp_path = path.with_suffix(path.suffix + '.tmp')
    with open(tmp_path, 'wb') as handle:
        handle.write(b''.join(chunks))
    os.replace(tmp_path, path)
    logger.debug("Saved %d arrays to %s", len(arrays), path)
    return path


class _Reader:
    def __init__(self, payload, path):
        self.payload = payload
        self.offset = 0
        self.path = path

    def take(self, count):
        if self.offset + count > len(self.payload):
            raise CheckpointError(f"Checkpoint {self.path} is truncated")
        chunk = self.payload[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path):
    """Read a checkpoint into an ordered ``name -> ndarray`` dictionary."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Checkpoint {path} does not exist")
    reader = _Reader(path.read_bytes(), path)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, count = reader.unpack('<II')
    if version != VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version} in {path}")
    arrays = {}
    for _ in range(count):
        (length,) = reader.unpack('<H')
        name = reader.take(length).decode('utf-8')
        code, ndim = reader.unpack('<BB')
        if code not in DTYPE_CODES:
            raise CheckpointError(f"Unknown dtype code {code} for {name!r} in {path}")
        shape = reader.unpack(f'<{ndim}I')
        dtype = DTYPE_CODES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(reader.take(size), dtype=dtype).reshape(shape).astype(dtype.newbyteorder('='))
    if reader.offset != len(reader.payload):
        raise CheckpointError(f"Trailing bytes after {count} arrays in {path}")
    return arrays


def split_state(arrays):
    """Separate model weights from the ``optim/`` optimizer state."""
    weights = {k: v for k, v in arrays.items() if not k.startswith('optim/')}
    optimizer = {k: v for k, v in arrays.items() if k.startswith('optim/')}
    return weights, optimizer
