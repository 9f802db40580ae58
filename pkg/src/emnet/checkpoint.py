"""Binary checkpoint container.

Byte layout (all integers little-endian)::

    u32  format version (currently 1)
    repeated until EOF:
        u32      name length in bytes
        bytes    UTF-8 name, e.g. "backbone.layers.3.dwise.conv.weight"
        u32      rank
        i64*rank extents
        f32*prod(extents)  values, row-major

Rank-0 tensors have no extents and one value. Integer buffers (batch-norm
step counters) are stored as f32 and cast back on load; they stay far below
2**24 so the round trip is exact.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError

FORMAT_VERSION = 1


def save_state(path, state: dict[str, torch.Tensor]) -> None:
    buf = bytearray(struct.pack("<I", FORMAT_VERSION))
    for name, t in state.items():
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}q", *arr.shape)
        buf += np.ascontiguousarray(arr).tobytes()
    Path(path).write_bytes(bytes(buf))


def load_state(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", data, 0)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    off = 4
    out: dict[str, np.ndarray] = {}
    try:
        while off < len(data):
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", data, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}q", data, off)
            off += 8 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if off + 4 * count > len(data):
                raise CheckpointError(f"{path}: record {name!r} truncated")
            out[name] = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape).copy()
            off += 4 * count
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated record") from exc
    return out


def save_model(path, model: nn.Module) -> None:
    save_state(path, model.state_dict())


def load_model(path, model: nn.Module) -> None:
    """Load weights into ``model``; any name or shape mismatch is an error naming the parameter."""
    stored = load_state(path)
    expected = model.state_dict()
    for name, t in expected.items():
        if name not in stored:
            raise CheckpointError(f"checkpoint/architecture mismatch: missing parameter {name!r}")
        if tuple(stored[name].shape) != tuple(t.shape):
            raise CheckpointError(
                f"checkpoint/architecture mismatch at {name!r}: "
                f"stored {tuple(stored[name].shape)} vs model {tuple(t.shape)}")
    for name in stored:
        if name not in expected:
            raise CheckpointError(f"checkpoint/architecture mismatch: unexpected parameter {name!r}")
    model.load_state_dict({k: torch.from_numpy(stored[k]).to(expected[k].dtype) for k in expected})
