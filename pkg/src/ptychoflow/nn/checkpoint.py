"""Bit-exact model checkpoints.

File layout (little-endian)::

    b"PNNC" | version u32 | spec_hash 32B | val_loss f64 | epoch u32
    | checkpoint_id u64 | input_scale f64 | adam_step u64 | spec_json_len u32 | spec_json
    | n_params u32 | n_params x tensor
    | n_moments u32 | n_moments x tensor        (names "m.<param>" / "v.<param>")
    | schedule_position u64 | crc32 of everything before it u32

    tensor = name_len u16 | name utf-8 | ndim u8 | dims u32[ndim] | f32 data
"""

from __future__ import annotations

import json
import os
import struct
import uuid
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .network import Network, NetworkSpec
from .optim import AdamState

MAGIC = b"PNNC"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed or truncated checkpoint file."""


class IncompatibleCheckpoint(CheckpointError):
    """Version or network-spec hash does not match."""


@dataclass
class ModelCheckpoint:
    spec: NetworkSpec
    params: dict[str, np.ndarray]
    adam: AdamState
    schedule_position: int = 0
    epoch: int = 0
    val_loss: float = float("inf")
    checkpoint_id: int = 0
    input_scale: float = 1.0

    @property
    def spec_hash(self) -> bytes:
        return self.spec.hash()

    @classmethod
    def from_network(cls, net: Network, adam: AdamState, **kw) -> ModelCheckpoint:
        params = {k: v.copy() for k, v in net.named_params().items()}
        adam_copy = AdamState(
            {k: v.copy() for k, v in adam.m.items()},
            {k: v.copy() for k, v in adam.v.items()},
            adam.step_count,
            adam.beta1,
            adam.beta2,
            adam.eps,
        )
        return cls(net.spec, params, adam_copy, **kw)

    def build_network(self) -> Network:
        net = Network(self.spec, seed=0)
        net.set_params(self.params)
        return net

    def to_bytes(self) -> bytes:
        return dumps(self)


def _tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode()
    a = np.ascontiguousarray(arr, dtype="<f4")
    return (
        struct.pack("<H", len(raw))
        + raw
        + struct.pack("<B", a.ndim)
        + struct.pack(f"<{a.ndim}I", *a.shape)
        + a.tobytes()
    )


def dumps(ckpt: ModelCheckpoint) -> bytes:
    spec_json = json.dumps(ckpt.spec.to_dict(), sort_keys=True).encode()
    parts = [
        MAGIC,
        struct.pack("<I", VERSION),
        ckpt.spec_hash,
        struct.pack("<dIQdQ", ckpt.val_loss, ckpt.epoch, ckpt.checkpoint_id, ckpt.input_scale, ckpt.adam.step_count),
        struct.pack("<I", len(spec_json)),
        spec_json,
        struct.pack("<I", len(ckpt.params)),
    ]
    parts += [_tensor(k, v) for k, v in ckpt.params.items()]
    moments = [(f"m.{k}", v) for k, v in ckpt.adam.m.items()] + [(f"v.{k}", v) for k, v in ckpt.adam.v.items()]
    parts.append(struct.pack("<I", len(moments)))
    parts += [_tensor(k, v) for k, v in moments]
    parts.append(struct.pack("<Q", ckpt.schedule_position))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.off + size > len(self.buf):
            raise CheckpointError("checkpoint truncated")
        out = struct.unpack_from(fmt, self.buf, self.off)
        self.off += size
        return out

    def raw(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise CheckpointError("checkpoint truncated")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def tensor(self) -> tuple[str, np.ndarray]:
        (n,) = self.take("<H")
        name = self.raw(n).decode()
        (ndim,) = self.take("<B")
        dims = self.take(f"<{ndim}I")
        count = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(self.raw(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
        return name, data


def loads(buf: bytes, expect_spec: NetworkSpec | None = None) -> ModelCheckpoint:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) != crc:
        raise CheckpointError("checkpoint truncated or corrupted (crc mismatch)")
    r = _Reader(buf[:-4])
    r.raw(4)
    (version,) = r.take("<I")
    if version != VERSION:
        raise IncompatibleCheckpoint(f"checkpoint version {version}, expected {VERSION}")
    spec_hash = r.raw(32)
    val_loss, epoch, ckpt_id, scale, adam_step = r.take("<dIQdQ")
    (n,) = r.take("<I")
    spec = NetworkSpec.from_dict(json.loads(r.raw(n)))
    if spec.hash() != spec_hash:
        raise IncompatibleCheckpoint("embedded spec does not match its hash")
    if expect_spec is not None and expect_spec.hash() != spec_hash:
        raise IncompatibleCheckpoint("checkpoint was produced for a different network spec")
    (n_params,) = r.take("<I")
    params = dict(r.tensor() for _ in range(n_params))
    (n_mom,) = r.take("<I")
    moments = dict(r.tensor() for _ in range(n_mom))
    (position,) = r.take("<Q")
    if r.off != len(r.buf):
        raise CheckpointError("trailing bytes in checkpoint")
    adam = AdamState(
        {k[2:]: v for k, v in moments.items() if k.startswith("m.")},
        {k[2:]: v for k, v in moments.items() if k.startswith("v.")},
        adam_step,
    )
    return ModelCheckpoint(spec, params, adam, position, epoch, val_loss, ckpt_id, scale)


def save_checkpoint(ckpt: ModelCheckpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.parent / f".{path.name}.{uuid.uuid4().hex}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(ckpt))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path, expect_spec: NetworkSpec | None = None) -> ModelCheckpoint:
    return loads(Path(path).read_bytes(), expect_spec)


def new_checkpoint_id() -> int:
    return uuid.uuid4().int & ((1 << 63) - 1)
