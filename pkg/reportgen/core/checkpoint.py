"""
Binary checkpoint format.

Layout, all integers little-endian:

    b"RCKT"  u8 version  u32 config_len  config JSON (utf-8)
    u32 tensor_count
    per tensor: u16 name_len  name (utf-8)  u8 rank  u32 extent * rank  f32 * size

Values are stored as 32-bit floats; loading widens them back to float64, so a
round trip is exact for the float32-representable part of each value.
"""
import json
import logging
import struct

import numpy as np

from errors import CheckpointError, ConfigError, MissingPathError
from reportgen.core.tensor import Tensor
from reportgen.core.transformer import ModelParams
from reportgen.models import ModelConfig

logger = logging.getLogger(__name__)

MAGIC = b"RCKT"
VERSION = 1


def encode_checkpoint(params, config):
    """Serializes parameters and the config that shapes them into bytes."""
    config_blob = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<BI", VERSION, len(config_blob)), config_blob, struct.pack("<I", len(params))]

    for name, tensor in params.items():
        name_blob = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_blob)))
        chunks.append(name_blob)
        chunks.append(struct.pack(f"<B{tensor.ndim}I", tensor.ndim, *tensor.shape))
        chunks.append(tensor.data.astype("<f4").tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.path = path
        self.offset = 0

    def fail(self, reason, offset=None):
        raise CheckpointError(reason, path=self.path, offset=self.offset if offset is None else offset)

    def take(self, count, what):
        if self.offset + count > len(self.blob):
            self.fail(f"truncated while reading {what}")
        chunk = self.blob[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(blob, path=None):
    """
    Parses checkpoint bytes.

    Returns:
        tuple[ModelParams, ModelConfig]: Parameters (requiring grad) and their config.

    Raises:
        CheckpointError: On a bad magic, unknown version, truncation, or shapes
            that disagree with the embedded config; carries the byte offset.
    """
    reader = _Reader(blob, path)
    if reader.take(len(MAGIC), "magic") != MAGIC:
        reader.fail("bad magic, expected RCKT", offset=0)
    version, config_len = reader.unpack("<BI", "header")
    if version != VERSION:
        reader.fail(f"unsupported version {version}", offset=len(MAGIC))

    config_offset = reader.offset
    try:
        config = ModelConfig.from_dict(json.loads(reader.take(config_len, "config").decode("utf-8")))
    except (ValueError, TypeError, AttributeError, ConfigError) as e:
        reader.fail(f"unreadable model config ({e})", offset=config_offset)

    (count,) = reader.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        start = reader.offset
        (name_len,) = reader.unpack("<H", "name length")
        name = reader.take(name_len, "name").decode("utf-8", errors="replace")
        (rank,) = reader.unpack("<B", "rank")
        shape = reader.unpack(f"<{rank}I", "extents")
        size = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(reader.take(4 * size, f"values of {name}"), dtype="<f4").reshape(shape)
        if name in tensors:
            reader.fail(f"tensor {name} appears twice", offset=start)
        tensors[name] = Tensor(values.astype(np.float64), requires_grad=True)

    if reader.offset != len(blob):
        reader.fail(f"{len(blob) - reader.offset} trailing bytes")

    params = ModelParams(tensors)
    try:
        params.validate(config)
    except ConfigError as e:
        raise CheckpointError(e.detail, path=path)
    return params, config


def save_checkpoint(path, params, config):
    with open(path, "wb") as handle:
        handle.write(encode_checkpoint(params, config))
    logger.debug(f"Wrote checkpoint {path} ({params.count()} parameters)")


def load_checkpoint(path):
    """
    Reads a checkpoint file written by `save_checkpoint`.

    Raises:
        MissingPathError: If the file does not exist.
        CheckpointError: If the content is malformed.
    """
    try:
        with open(path, "rb") as handle:
            blob = handle.read()
    except FileNotFoundError:
        raise MissingPathError(str(path), path=str(path))
    return decode_checkpoint(blob, path=str(path))
