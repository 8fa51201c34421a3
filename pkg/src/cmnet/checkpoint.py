"""Binary checkpoints: parameters, optimizer moments, step counter and root seed.

Layout: magic ``CMCK``, u32 version, u64 step, u32 entry count, then per entry
u32 name length, UTF-8 name, u8 frozen flag and one tensor record. Optimizer
entries use the parameter name plus ``.m1``, ``.m2`` (moments) or ``.t``
(per-parameter update count); the root seed is stored as ``__seed__``.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, StateError
from .layers import ParamStore
from .tensor import dump_tensor, load_tensor

MAGIC = b"CMCK"
VERSION = 1
SEED_KEY = "__seed__"
_HEAD = struct.Struct("<4sIQI")


def _scalar(value: int) -> np.ndarray:
    return np.array(float(value), dtype=np.float64).reshape(1, 1, 1, 1)


def _split_seed(seed: int) -> np.ndarray:
    # a u64 does not fit a float64 mantissa, so store it as four 16-bit halves
    return np.array([(seed >> (16 * k)) & 0xFFFF for k in range(4)], dtype=np.float64).reshape(1, 4, 1, 1)


def _join_seed(arr: np.ndarray) -> int:
    parts = [int(v) for v in arr.ravel()]
    if len(parts) != 4:
        raise FormatError("bad seed entry")
    return sum(p << (16 * k) for k, p in enumerate(parts))


def encode(params: ParamStore, opt=None, step: int = 0, seed: int = 0) -> bytes:
    entries: list[tuple[str, bool, np.ndarray]] = []
    for name, p in params.items():
        entries.append((name, p.frozen, p.tensor.data))
    if opt is not None:
        for name in sorted(opt.m1):
            entries.append((f"{name}.m1", False, opt.m1[name]))
            entries.append((f"{name}.m2", False, opt.m2[name]))
            entries.append((f"{name}.t", False, _scalar(opt.t[name])))
    entries.append((SEED_KEY, False, _split_seed(seed)))
    buf = io.BytesIO()
    buf.write(_HEAD.pack(MAGIC, VERSION, step, len(entries)))
    for name, frozen, data in entries:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", int(frozen)))
        dump_tensor(data, buf)
    return buf.getvalue()


def decode(raw: bytes) -> tuple[int, list[tuple[str, bool, np.ndarray]]]:
    fp = io.BytesIO(raw)
    head = fp.read(_HEAD.size)
    if len(head) != _HEAD.size:
        raise FormatError("truncated checkpoint header")
    magic, version, step, count = _HEAD.unpack(head)
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    entries = []
    for _ in range(count):
        n = fp.read(4)
        if len(n) != 4:
            raise FormatError("truncated checkpoint entry")
        (size,) = struct.unpack("<I", n)
        name = fp.read(size)
        flag = fp.read(1)
        if len(name) != size or len(flag) != 1:
            raise FormatError("truncated checkpoint entry")
        try:
            text = name.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("entry name is not UTF-8") from None
        entries.append((text, bool(flag[0]), load_tensor(fp).data))
    if fp.read(1):
        raise FormatError("trailing bytes after checkpoint entries")
    return step, entries


def save(path, params: ParamStore, opt=None, step: int = 0, seed: int = 0) -> None:
    Path(path).write_bytes(encode(params, opt, step, seed))


def load(path, params: ParamStore, opt=None) -> tuple[int, int]:
    """Restore ``params`` (and ``opt`` if given) in place; returns (step, seed)."""
    step, entries = decode(Path(path).read_bytes())
    table = {name: (frozen, data) for name, frozen, data in entries}
    seed = _join_seed(table.pop(SEED_KEY)[1]) if SEED_KEY in table else 0
    for name in params.names():
        if name not in table:
            raise StateError(f"checkpoint lacks parameter {name!r}")
        frozen, data = table.pop(name)
        params.set_data(name, data)
        params.set_frozen_exact(name, frozen)
    if opt is not None:
        opt.m1.clear()
        opt.m2.clear()
        opt.t.clear()
        opt.step = step
    for name in sorted(table):
        base, _, suffix = name.rpartition(".")
        if suffix not in ("m1", "m2", "t") or base not in params:
            raise StateError(f"unexpected checkpoint entry {name!r}")
        if opt is None:
            continue
        data = table[name][1]
        if suffix == "t":
            opt.t[base] = int(data.ravel()[0])
        else:
            if data.shape != params[base].data.shape:
                raise StateError(f"{name}: shape {data.shape} != {params[base].data.shape}")
            getattr(opt, suffix)[base] = np.array(data)
    return step, seed

