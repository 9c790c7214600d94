"""Binary checkpoint format.

Layout (little-endian)::

    b"LFCK"  u32 version  u32 len  <model spec utf-8>
    repeated until EOF:
        u32 name_len  <name utf-8>  u32 rank  u32 dims[rank]  f32 payload[prod(dims)]

Model weights are stored as ``param/<name>``, Adam moments as
``adam.m/<name>`` / ``adam.v/<name>``, and scalar training state as rank-0
records under ``state/``.  Integers are kept exact by splitting them into
16-bit halves.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["Checkpoint", "CheckpointError", "save_checkpoint", "load_checkpoint", "MAGIC", "VERSION"]

MAGIC = b"LFCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    spec: str
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_step: int = 0
    epoch: int = 0  # next epoch to run
    base_lr: float = 1e-3
    restarts: int = 0
    best_valid: float = float("inf")
    seed: int = 0
    version: int = VERSION

    def records(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"param/{k}", v) for k, v in self.params.items()]
        out += [(f"adam.m/{k}", v) for k, v in self.adam_m.items()]
        out += [(f"adam.v/{k}", v) for k, v in self.adam_v.items()]
        out += [
            ("state/adam_step", _split_int(self.adam_step)),
            ("state/epoch", _split_int(self.epoch)),
            ("state/restarts", _split_int(self.restarts)),
            ("state/seed", _split_int(self.seed)),
            ("state/base_lr", np.float32(self.base_lr)),
            ("state/best_valid", np.float32(self.best_valid)),
        ]
        return out

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        spec = self.spec.encode("utf-8")
        buf.write(MAGIC)
        buf.write(struct.pack("<II", self.version, len(spec)))
        buf.write(spec)
        for name, value in self.records():
            arr = np.asarray(value, dtype="<f4")
            raw = name.encode("utf-8")
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<I", arr.ndim))
            if arr.ndim:
                buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(np.ascontiguousarray(arr).tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        view = memoryview(data)
        pos = 0

        def take(n: int) -> bytes:
            nonlocal pos
            if pos + n > len(view):
                raise CheckpointError(f"truncated checkpoint at byte {pos}")
            chunk = bytes(view[pos : pos + n])
            pos += n
            return chunk

        if take(4) != MAGIC:
            raise CheckpointError("not a checkpoint (bad magic)")
        version, spec_len = struct.unpack("<II", take(8))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        spec = take(spec_len).decode("utf-8")
        ck = cls(spec=spec, params={}, version=version)
        state = {}
        while pos < len(view):
            (name_len,) = struct.unpack("<I", take(4))
            name = take(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", take(4))
            dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32).reshape(dims)
            kind, _, key = name.partition("/")
            if kind == "param":
                ck.params[key] = arr
            elif kind == "adam.m":
                ck.adam_m[key] = arr
            elif kind == "adam.v":
                ck.adam_v[key] = arr
            elif kind == "state":
                state[key] = arr
            else:
                raise CheckpointError(f"unknown record {name!r}")
        for key in ("adam_step", "epoch", "restarts", "seed"):
            if key in state:
                setattr(ck, key, _join_int(state[key]))
        if "base_lr" in state:
            ck.base_lr = float(state["base_lr"])
        if "best_valid" in state:
            ck.best_valid = float(state["best_valid"])
        return ck


def _split_int(value: int) -> np.ndarray:
    value = int(value)
    if not 0 <= value < 2**32:
        raise CheckpointError(f"integer state {value} out of range")
    return np.array([value >> 16, value & 0xFFFF], dtype=np.float32)


def _join_int(arr: np.ndarray) -> int:
    hi, lo = (int(v) for v in arr.reshape(-1))
    return (hi << 16) | lo


def save_checkpoint(path, ck: Checkpoint):
    """Write atomically (temp file + rename)."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(ck.to_bytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return Checkpoint.from_bytes(fh.read())
