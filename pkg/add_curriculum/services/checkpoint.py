"""ADDC checkpoint files.

Layout (little-endian): magic ``ADDC``, u32 version, u64 epoch, then tensors until
end of file, each as u16 name length, UTF-8 name, u8 rank, u32 dims, float32 data.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Union

import numpy as np

from add_curriculum.services.artifacts import ArtifactError

MAGIC = b"ADDC"
VERSION = 1
_HEAD = struct.Struct("<4sIQ")
_NAME_LEN = struct.Struct("<H")
_RANK = struct.Struct("<B")


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    epoch: int
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)


def text_to_tensor(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def tensor_to_text(values: np.ndarray) -> str:
    return values.astype(np.uint8).tobytes().decode("utf-8")


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    parts = [_HEAD.pack(MAGIC, VERSION, checkpoint.epoch)]
    for name, value in checkpoint.tensors.items():
        encoded = name.encode("utf-8")
        array = np.ascontiguousarray(value, dtype="<f4")
        parts.append(_NAME_LEN.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_RANK.pack(array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(array.tobytes())
    return b"".join(parts)


def decode_checkpoint(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    def need(offset: int, size: int) -> None:
        if offset + size > len(raw):
            raise CheckpointError(f"{source}: truncated at offset {offset} (needed {size} more bytes)")

    need(0, _HEAD.size)
    magic, version, epoch = _HEAD.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version} (expected {VERSION})")
    tensors: Dict[str, np.ndarray] = {}
    offset = _HEAD.size
    while offset < len(raw):
        need(offset, _NAME_LEN.size)
        (length,) = _NAME_LEN.unpack_from(raw, offset)
        offset += _NAME_LEN.size
        need(offset, length + _RANK.size)
        try:
            name = raw[offset:offset + length].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{source}: undecodable tensor name at offset {offset}") from exc
        offset += length
        (rank,) = _RANK.unpack_from(raw, offset)
        offset += _RANK.size
        need(offset, 4 * rank)
        shape = struct.unpack_from(f"<{rank}I", raw, offset)
        offset += 4 * rank
        count = int(np.prod(shape, dtype=np.int64))
        need(offset, 4 * count)
        if count:
            tensors[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
        else:
            tensors[name] = np.zeros(shape, dtype=np.float32)
        offset += 4 * count
    return Checkpoint(epoch=int(epoch), tensors=tensors)


def save_checkpoint(path: Union[str, Path], checkpoint: Checkpoint) -> None:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    scratch = target.with_suffix(target.suffix + ".tmp")
    scratch.write_bytes(encode_checkpoint(checkpoint))
    os.replace(scratch, target)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    target = Path(path)
    if not target.is_file():
        raise ArtifactError(f"checkpoint not found: {target}")
    return decode_checkpoint(target.read_bytes(), str(target))
