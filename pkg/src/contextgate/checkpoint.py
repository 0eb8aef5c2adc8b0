"""
Binary checkpoint codec.

Layout (all integers u32 little-endian)::

    b"GCGM" | version | config length | config JSON (canonical, UTF-8)
    | record count | records...

    record: name length | name (UTF-8) | rank | dims... | float32 LE data

Records cover every trainable parameter followed by the batch-norm running statistics, in
registry order. A file is parsed completely before a model is built, so a corrupt file never
yields a partially loaded model.
"""

import logging
import struct
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from .errors import CheckpointError, CheckpointVersionError, ConfigurationError
from .model import Model, ModelConfig, build_model

logger = logging.getLogger(__name__)

MAGIC = b"GCGM"
FORMAT_VERSION = 1
_U32 = struct.Struct("<I")


def encode_checkpoint(model: Model) -> bytes:
    config = model.config.to_json().encode("utf-8")
    state = model.state_dict()
    chunks: List[bytes] = [MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(config)), config]
    chunks.append(_U32.pack(len(state)))
    for name, value in state.items():
        encoded_name = name.encode("utf-8")
        chunks += [_U32.pack(len(encoded_name)), encoded_name, _U32.pack(value.ndim)]
        chunks += [_U32.pack(dim) for dim in value.shape]
        chunks.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return b"".join(chunks)


def save_checkpoint(model: Model, path: Union[str, Path]) -> Path:
    """Write ``model`` to ``path`` (parents created); returns the path written."""
    path = Path(path)
    payload = encode_checkpoint(model)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
    except OSError as e:
        raise CheckpointError(f"Cannot write checkpoint {path}: {e}") from e
    logger.info("Saved checkpoint", extra={"path": str(path), "bytes": len(payload)})
    return path


class _Reader:
    """Cursor over a checkpoint buffer that reports the offset of any short read."""

    def __init__(self, buffer: bytes):
        self.buffer = buffer
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.buffer):
            raise CheckpointError(
                f"Truncated checkpoint: needed {size} bytes for {what}, "
                f"{len(self.buffer) - self.offset} available",
                offset=self.offset,
            )
        chunk = self.buffer[self.offset : end]
        self.offset = end
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def decode_checkpoint(buffer: bytes) -> Tuple[ModelConfig, Dict[str, np.ndarray]]:
    """Parse a checkpoint buffer into its configuration and float32 state.

    Raises:
        CheckpointVersionError: If the format version is not supported
        CheckpointError: If the buffer is truncated or malformed
    """
    reader = _Reader(buffer)
    magic = reader.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise CheckpointError(f"Not a checkpoint: magic {magic!r}", offset=0)
    version_offset = reader.offset
    version = reader.u32("format version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(version, FORMAT_VERSION, offset=version_offset)

    config_offset = reader.offset
    config_blob = reader.take(reader.u32("config length"), "config")
    try:
        config = ModelConfig.from_json(config_blob.decode("utf-8"))
    except (UnicodeDecodeError, ConfigurationError) as e:
        raise CheckpointError(f"Invalid embedded configuration: {e}", offset=config_offset) from e

    state: Dict[str, np.ndarray] = {}
    for _ in range(reader.u32("record count")):
        record_offset = reader.offset
        name_bytes = reader.take(reader.u32("name length"), "parameter name")
        try:
            name = name_bytes.decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError("Parameter name is not UTF-8", offset=record_offset) from e
        shape = tuple(reader.u32(f"{name} dimension") for _ in range(reader.u32(f"{name} rank")))
        count = int(np.prod(shape, dtype=np.int64))
        data = reader.take(4 * count, f"{name} data")
        if name in state:
            raise CheckpointError(f"Duplicate record {name!r}", offset=record_offset)
        state[name] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()

    if reader.offset != len(buffer):
        raise CheckpointError(
            f"{len(buffer) - reader.offset} trailing bytes after the last record",
            offset=reader.offset,
        )
    return config, state


def load_checkpoint(path: Union[str, Path]) -> Model:
    """Rebuild a model from a checkpoint file, in eval mode.

    Raises:
        CheckpointError: If the file is missing, corrupt, or does not match its own config
        CheckpointVersionError: If the file was written by an unsupported format version
    """
    path = Path(path)
    try:
        buffer = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    config, state = decode_checkpoint(buffer)
    model = build_model(config)
    try:
        model.load_state_dict({name: value.astype(np.float64) for name, value in state.items()})
    except ValueError as e:
        raise CheckpointError(f"Checkpoint {path} does not match its configuration: {e}") from e
    logger.info("Loaded checkpoint", extra={"path": str(path), "records": len(state)})
    return model.eval()
