"""Binary model checkpoints.

Layout (all integers little-endian uint32, arrays little-endian binary32
with a uint32 length prefix):

    magic "ASRCKPT1" | version byte | input_dim | n_hidden | widths...
    | num_classes | n_flags | flags... | theta_t | theta_pre
    | n_norm_layers | (mean array, var array) per norm layer

Writes are atomic (temp file + rename). Round trips are bit-exact because
model parameters are float32-representable by construction.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .errors import ConfigError
from .model import Architecture, ModelState

MAGIC = b"ASRCKPT1"
VERSION = 1


def _pack_u32(*values: int) -> bytes:
    return struct.pack("<" + "I" * len(values), *values)


def _pack_array(x: np.ndarray) -> bytes:
    data = np.ascontiguousarray(x, dtype="<f4")
    return _pack_u32(data.size) + data.tobytes()


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise ConfigError("truncated checkpoint")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def array(self) -> np.ndarray:
        n = self.u32()
        raw = self.take(4 * n)
        return np.frombuffer(raw, dtype="<f4").astype(np.float64)


def save_checkpoint(model: ModelState, path: str) -> None:
    arch = model.arch
    parts = [MAGIC, bytes([VERSION])]
    parts.append(_pack_u32(arch.input_dim, len(arch.hidden_widths)))
    parts.append(_pack_u32(*arch.hidden_widths) if arch.hidden_widths else b"")
    parts.append(_pack_u32(arch.num_classes, len(arch.norm_after_hidden)))
    parts.append(_pack_u32(*(int(f) for f in arch.norm_after_hidden)) if arch.norm_after_hidden else b"")
    parts.append(_pack_array(model.theta_t))
    parts.append(_pack_array(model.theta_pre))
    parts.append(_pack_u32(len(model.norm_stats)))
    for mean, var in model.norm_stats:
        parts.append(_pack_array(mean))
        parts.append(_pack_array(var))
    blob = b"".join(parts)

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> ModelState:
    """Load a source checkpoint; stored stats become both current and source stats."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise ConfigError(f"not a checkpoint file: {path}")
    r = _Reader(blob)
    r.take(len(MAGIC))
    version = r.take(1)[0]
    if version != VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    input_dim = r.u32()
    n_hidden = r.u32()
    widths = tuple(r.u32() for _ in range(n_hidden))
    num_classes = r.u32()
    n_flags = r.u32()
    flags = tuple(bool(r.u32()) for _ in range(n_flags))
    arch = Architecture(input_dim, widths, num_classes, flags)
    theta_t = r.array()
    theta_pre = r.array()
    if theta_t.size != arch.param_count or theta_pre.size != arch.param_count:
        raise ConfigError("checkpoint parameter count does not match its architecture")
    n_norm = r.u32()
    if n_norm != arch.num_norm_layers:
        raise ConfigError("checkpoint norm layer count does not match its architecture")
    stats = []
    for _ in range(n_norm):
        stats.append((r.array(), r.array()))
    return ModelState(
        arch=arch,
        theta_t=theta_t,
        theta_pre=theta_pre,
        norm_stats=[(m.copy(), v.copy()) for m, v in stats],
        source_stats=stats,
        mode="frozen-stats",
    )
