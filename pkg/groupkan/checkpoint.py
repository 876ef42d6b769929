"""Binary tensor and checkpoint formats.

Tensor blob (little-endian)::

    b"GKTN" | u32 version | u32 rank | u64 extent * rank | f64 value * prod(extents)

Checkpoint file::

    b"GKCK" | u32 version | u32 header length | header JSON (utf-8)
    then, per tensor: u32 name length | name (utf-8) | tensor blob

The header carries the model config as canonical JSON text, run metadata
and the ordered tensor names.
"""

import json
import logging
import struct
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import Field

from .common import BaseModel
from .config import GroupKanConfig
from .errors import FormatVersionError, ParseError
from .model import GroupKanNet, build

logger = logging.getLogger(__name__)

TENSOR_MAGIC = b"GKTN"
TENSOR_VERSION = 1
CHECKPOINT_MAGIC = b"GKCK"
CHECKPOINT_VERSION = 1

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array, dtype="<f8")
    extents = b"".join(_U64.pack(extent) for extent in array.shape)
    return (
        TENSOR_MAGIC
        + _U32.pack(TENSOR_VERSION)
        + _U32.pack(array.ndim)
        + extents
        + np.ascontiguousarray(array).tobytes()
    )


def _unpack(fmt: struct.Struct, data: bytes, offset: int, what: str) -> Tuple[int, int]:
    if offset + fmt.size > len(data):
        raise ParseError(f"Truncated {what}", offset)
    return fmt.unpack_from(data, offset)[0], offset + fmt.size


def decode_tensor(data: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """Decode one tensor blob at `offset`; returns the array and the offset after it."""
    if data[offset : offset + 4] != TENSOR_MAGIC:
        raise ParseError(f"Bad tensor magic {data[offset:offset + 4]!r}", offset)
    version, pos = _unpack(_U32, data, offset + 4, "tensor version")
    if version != TENSOR_VERSION:
        raise FormatVersionError(f"Unsupported tensor version {version}")
    rank, pos = _unpack(_U32, data, pos, "tensor rank")
    shape = []
    for _ in range(rank):
        extent, pos = _unpack(_U64, data, pos, "tensor extent")
        if extent < 1:
            raise ParseError("Tensor extents must be >= 1", pos - _U64.size)
        shape.append(extent)
    count = int(np.prod(shape, dtype=np.int64))
    end = pos + 8 * count
    if end > len(data):
        raise ParseError(f"Tensor payload needs {8 * count} bytes", pos)
    array = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64)
    return array.reshape(shape), end


class CheckpointMetadata(BaseModel):
    """Run facts stored next to the weights"""

    seed: int = Field(0, ge=0)
    best_epoch: Optional[int] = Field(None, ge=0)
    best_val_iou: Optional[float] = Field(None, ge=0, le=1)
    best_val_f1: Optional[float] = Field(None, ge=0, le=1)
    resolution: Optional[int] = Field(None, gt=0)
    dataset: Optional[str]


class Checkpoint(BaseModel):
    config: GroupKanConfig
    metadata: CheckpointMetadata = CheckpointMetadata()
    state: Dict[str, np.ndarray]

    class Config:
        arbitrary_types_allowed = True


def config_text(config: GroupKanConfig) -> str:
    """Canonical JSON form of the config stored in the checkpoint header."""
    return config.json(sort_keys=True)


def _architecture(config: GroupKanConfig) -> dict:
    return config.dict(exclude={"seed"})


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    names: List[str] = list(checkpoint.state)
    header = json.dumps(
        {
            "config": config_text(checkpoint.config),
            "metadata": json.loads(checkpoint.metadata.json()),
            "tensors": names,
        },
        sort_keys=True,
    ).encode("utf8")
    parts = [CHECKPOINT_MAGIC, _U32.pack(CHECKPOINT_VERSION), _U32.pack(len(header)), header]
    for name in names:
        encoded = name.encode("utf8")
        parts.extend([_U32.pack(len(encoded)), encoded, encode_tensor(checkpoint.state[name])])
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> Checkpoint:
    if data[:4] != CHECKPOINT_MAGIC:
        raise ParseError(f"Bad checkpoint magic {data[:4]!r}", 0)
    version, pos = _unpack(_U32, data, 4, "checkpoint version")
    if version != CHECKPOINT_VERSION:
        raise FormatVersionError(
            f"Checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )
    length, pos = _unpack(_U32, data, pos, "header length")
    if pos + length > len(data):
        raise ParseError("Truncated checkpoint header", pos)
    try:
        header = json.loads(data[pos : pos + length].decode("utf8"))
        config = GroupKanConfig.parse_raw(header["config"])
        metadata = CheckpointMetadata.parse_obj(header["metadata"])
        names = list(header["tensors"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"Invalid checkpoint header: {exc}", pos) from exc
    pos += length

    state: Dict[str, np.ndarray] = {}
    for expected in names:
        name_length, pos = _unpack(_U32, data, pos, "tensor name length")
        name = data[pos : pos + name_length].decode("utf8", errors="replace")
        if name != expected:
            raise ParseError(f"Expected tensor {expected!r}, found {name!r}", pos)
        state[name], pos = decode_tensor(data, pos + name_length)
    if pos != len(data):
        raise ParseError(f"{len(data) - pos} trailing bytes after the last tensor", pos)
    return Checkpoint(config=config, metadata=metadata, state=state)


def save_checkpoint(
    path: str, net: GroupKanNet, metadata: Optional[CheckpointMetadata] = None
) -> None:
    checkpoint = Checkpoint(
        config=net.config, metadata=metadata or CheckpointMetadata(), state=net.state_dict()
    )
    with open(path, "wb") as fp:
        fp.write(encode_checkpoint(checkpoint))
    logger.info("Saved checkpoint with %d tensors to %s", len(checkpoint.state), path)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fp:
        data = fp.read()
    try:
        return decode_checkpoint(data)
    except ParseError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def restore(
    checkpoint: Checkpoint, expected: Optional[GroupKanConfig] = None
) -> GroupKanNet:
    """Rebuild the network a checkpoint was saved from and load its weights.

    If `expected` is given it must describe the same architecture as the
    stored config; the initialization seed is not compared.
    """
    if expected is not None and _architecture(expected) != _architecture(checkpoint.config):
        raise FormatVersionError("Checkpoint was written with a different model config")
    net = build(checkpoint.config)
    net.load_state_dict(checkpoint.state)
    net.eval()
    return net
