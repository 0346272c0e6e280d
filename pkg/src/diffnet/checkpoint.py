"""Little-endian binary checkpoints.

Layout::

    8 bytes   magic b"DIFFNCKP"
    u32       format version
    u32 + utf8  model kind
    u64 + utf8  text blob (canonical run config plus ``state.*`` lines)
    u32       tensor count
    per tensor: u32 + utf8 name, u32 rank, rank x u64 dims,
                float64 values in row-major order

Writes go to a temporary file that is then renamed over the target.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DIFFNCKP"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    blob: str
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def meta(self) -> dict[str, str]:
        """``state.*`` entries of the blob, prefix stripped."""
        out = {}
        for line in self.blob.splitlines():
            key, _, value = line.partition(" = ")
            if key.startswith("state."):
                out[key[len("state.") :]] = value
        return out

    @property
    def config_text(self) -> str:
        return "".join(line + "\n" for line in self.blob.splitlines() if not line.startswith("state."))


def _pack_str(s: str, width: str = "<I") -> bytes:
    raw = s.encode("utf-8")
    return struct.pack(width, len(raw)) + raw


def encode(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", ckpt.version), _pack_str(ckpt.kind), _pack_str(ckpt.blob, "<Q")]
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f8")
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self, width: str = "<I") -> str:
        (n,) = self.unpack(width)
        return self.take(n).decode("utf-8")


def decode(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    kind = r.string()
    blob = r.string("<Q")
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        name = r.string()
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after last tensor")
    return Checkpoint(kind=kind, blob=blob, tensors=tensors, version=version)


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(encode(ckpt))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    return decode(Path(path).read_bytes())


def dump(ckpt: Checkpoint) -> str:
    """Human-readable listing of a checkpoint."""
    lines = [f"format_version\t{ckpt.version}", f"model_kind\t{ckpt.kind}", "--- blob ---"]
    lines.extend(ckpt.blob.splitlines())
    lines.append("--- tensors ---")
    for name in sorted(ckpt.tensors):
        arr = ckpt.tensors[name]
        shape = "x".join(str(d) for d in arr.shape) or "scalar"
        stats = f"mean={arr.mean():.6g}\tabsmax={np.abs(arr).max():.6g}" if arr.size else "empty"
        lines.append(f"{name}\t{shape}\t{stats}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Model <-> tensor mapping
# ---------------------------------------------------------------------------


def model_tensors(model) -> dict[str, np.ndarray]:
    out = {f"param/{k}": v for k, v in model.params.items()}
    for k, s in enumerate(model.bn_states):
        out[f"bn/{k}/running_mean"] = s.running_mean
        out[f"bn/{k}/running_var"] = s.running_var
    return out


def load_model_tensors(model, tensors: dict[str, np.ndarray]) -> None:
    """Copy checkpoint tensors into ``model``; shapes must match exactly."""
    expected = model_tensors(model)
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise CheckpointError(f"checkpoint lacks tensor {missing[0]!r}")
    for name, target in expected.items():
        if tensors[name].shape != target.shape:
            raise CheckpointError(f"{name}: checkpoint shape {tensors[name].shape} != model shape {target.shape}")
    for k, v in model.params.items():
        v[...] = tensors[f"param/{k}"]
    for k, s in enumerate(model.bn_states):
        s.running_mean = tensors[f"bn/{k}/running_mean"].astype(s.running_mean.dtype)
        s.running_var = tensors[f"bn/{k}/running_var"].astype(s.running_var.dtype)
    model.mark_updated()
