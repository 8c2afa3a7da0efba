"""Binary checkpoint files.

Layout (all integers unsigned little-endian, all reals IEEE-754 little-endian)::

    magic      8 bytes  b"PFXMCKPT"
    version    u32      currently 1
    meta_len   u32      then meta_len bytes of UTF-8 JSON (config, stage, grid)
    b"PARM"    u32 count, then per parameter:
                 name_len u32, name bytes (UTF-8),
                 dtype u8 (0 = float32, 1 = float64),
                 rank u32, dims u64 * rank,
                 values (row-major)
    b"FRZN"    u32 count, then one u8 flag per parameter in PARM order
    b"OPTM"    u8 present; when 1:
                 step u64, beta1 f64, beta2 f64, epsilon f64, weight_decay f64,
                 count u32, then per entry:
                   name_len u32, name bytes, rank u32, dims u64 * rank,
                   first moment f64 values, second moment f64 values
    b"END!"

Writes go to a temporary sibling file which is then renamed into place.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .optim import OptimizerState

MAGIC = b"PFXMCKPT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    frozen: dict[str, bool]
    optimizer: OptimizerState | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model, optimizer: OptimizerState | None = None, meta: dict | None = None):
        named = list(model.named_parameters())
        return cls(
            params={n: p.data.copy() for n, p in named},
            frozen={n: p.frozen for n, p in named},
            optimizer=optimizer,
            meta=dict(meta or {}),
        )


def _write_array_header(buf, shape) -> None:
    buf.write(struct.pack("<I", len(shape)))
    buf.write(struct.pack(f"<{len(shape)}Q", *shape))


def _write_name(buf, name: str) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def dumps(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    meta = json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<II", VERSION, len(meta)))
    buf.write(meta)

    buf.write(b"PARM")
    buf.write(struct.pack("<I", len(ckpt.params)))
    for name, arr in ckpt.params.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        _write_name(buf, name)
        buf.write(struct.pack("<B", code))
        _write_array_header(buf, arr.shape)
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())

    buf.write(b"FRZN")
    buf.write(struct.pack("<I", len(ckpt.params)))
    for name in ckpt.params:
        buf.write(struct.pack("<B", int(bool(ckpt.frozen.get(name, False)))))

    buf.write(b"OPTM")
    opt = ckpt.optimizer
    buf.write(struct.pack("<B", int(opt is not None)))
    if opt is not None:
        buf.write(struct.pack("<Q4d", opt.step, opt.beta1, opt.beta2, opt.epsilon, opt.weight_decay))
        buf.write(struct.pack("<I", len(opt.m)))
        for name, m in opt.m.items():
            v = opt.v[name]
            _write_name(buf, name)
            _write_array_header(buf, m.shape)
            buf.write(np.ascontiguousarray(m, dtype="<f8").tobytes())
            buf.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    buf.write(b"END!")
    return buf.getvalue()


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError("truncated checkpoint")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tag(self, expected: bytes) -> None:
        got = self.take(4)
        if got != expected:
            raise CheckpointError(f"expected section {expected!r}, found {got!r}")

    def name(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def shape(self) -> tuple[int, ...]:
        (rank,) = self.unpack("<I")
        return tuple(self.unpack(f"<{rank}Q")) if rank else ()

    def array(self, shape, dtype) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        data = self.take(count * dtype.itemsize)
        return np.frombuffer(data, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def loads(raw: bytes) -> Checkpoint:
    r = _Reader(raw)
    if r.take(8) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, meta_len = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(r.take(meta_len).decode("utf-8"))

    r.tag(b"PARM")
    (count,) = r.unpack("<I")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.name()
        (code,) = r.unpack("<B")
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        params[name] = r.array(r.shape(), _DTYPES[code])

    r.tag(b"FRZN")
    (nflags,) = r.unpack("<I")
    if nflags != count:
        raise CheckpointError("frozen-flag count does not match parameter count")
    frozen = {name: bool(r.unpack("<B")[0]) for name in params}

    r.tag(b"OPTM")
    (present,) = r.unpack("<B")
    opt = None
    if present:
        step, b1, b2, eps, wd = r.unpack("<Q4d")
        opt = OptimizerState(beta1=b1, beta2=b2, epsilon=eps, weight_decay=wd, step=step)
        (n,) = r.unpack("<I")
        f8 = np.dtype("<f8")
        for _ in range(n):
            name = r.name()
            shape = r.shape()
            opt.m[name] = r.array(shape, f8)
            opt.v[name] = r.array(shape, f8)
    r.tag(b"END!")
    return Checkpoint(params=params, frozen=frozen, optimizer=opt, meta=meta)


def save(ckpt: Checkpoint, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(dumps(ckpt))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load(path: str | os.PathLike) -> Checkpoint:
    return loads(Path(path).read_bytes())
