"""
Checkpoint files.

Layout (little-endian):
    magic b"SVTN" | version u16 | config length u32 | config JSON (utf-8)
    | tensor count u32 | per tensor: name length u16, name, ndim u8,
      dims u32 * ndim, float64 payload
Parameters and batch-norm running statistics are both stored, so a loaded
model embeds bit-identically.
"""

import json
import logging
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from svtnet.config import ModelConfig
from svtnet.model import ModelParams, build, check_compatible

logger = logging.getLogger(__name__)

MAGIC = b"SVTN"
VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file is malformed or does not match the expected model."""
    pass


def save(params: ModelParams, path: Path) -> Path:
    """Write params (and buffers) to `path`, creating parent directories."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    config_blob = json.dumps(params.config.to_dict(), sort_keys=True).encode("utf-8")
    state = params.state()

    chunks = [MAGIC, struct.pack("<HI", VERSION, len(config_blob)), config_blob]
    chunks.append(struct.pack("<I", len(state)))
    for name, array in state.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype="<f8").tobytes())

    path.write_bytes(b"".join(chunks))
    logger.debug(
        f"Saved checkpoint {path}",
        extra={"event": "checkpoint_saved", "metadata": {"path": str(path), "tensors": len(state)}},
    )
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load(path: Path, expected: Optional[ModelConfig] = None) -> ModelParams:
    """
    Read a checkpoint written by `save`.

    Args:
        path: Checkpoint file
        expected: If given, the stored model must have this variant and descriptor dim

    Raises:
        FileNotFoundError: If the file does not exist
        CheckpointError: "bad magic", version mismatch, truncation, or schema mismatch
        ConfigError: "variant mismatch" against `expected`
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    reader = _Reader(path.read_bytes())

    if reader.take(4) != MAGIC:
        raise CheckpointError("bad magic")
    version, config_len = reader.unpack("<HI")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    try:
        config = ModelConfig.from_dict(json.loads(reader.take(config_len).decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt config block: {e}")

    if expected is not None:
        check_compatible(config, expected)

    params = build(config, seed=0)
    state = params.state()
    (count,) = reader.unpack("<I")
    seen = set()
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        try:
            name = reader.take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("corrupt tensor name")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        payload = np.frombuffer(reader.take(8 * size), dtype="<f8").reshape(shape)
        if name not in state:
            raise CheckpointError(f"unexpected tensor '{name}'")
        if state[name].shape != payload.shape:
            raise CheckpointError(
                f"tensor '{name}' has shape {payload.shape}, model expects {state[name].shape}"
            )
        state[name][...] = payload
        seen.add(name)

    missing = sorted(set(state) - seen)
    if missing:
        raise CheckpointError(f"checkpoint is missing tensors: {', '.join(missing[:5])}")
    if reader.pos != len(reader.data):
        raise CheckpointError("trailing bytes after last tensor")
    return params
