"""Parameter storage, convolution layers and the separable ConvGRU cell."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ShapeError, UsageError
from .rng import derive_seed, make_rng
from .tensor import PRECISIONS, Tensor


def init_conv(ci: int, co: int, kh: int, kw: int, seed: int,
              precision: str = "single") -> tuple[np.ndarray, np.ndarray]:
    """Fan-in scaled uniform weights in ``+-sqrt(6 / (ci*kh*kw))``, zero bias."""
    if min(ci, co, kh, kw) < 1:
        raise ShapeError("conv dims must be >= 1")
    bound = math.sqrt(6.0 / (ci * kh * kw))
    rng = make_rng(seed, "conv")
    w = rng.uniform(-bound, bound, size=(co, ci, kh, kw)).astype(PRECISIONS[precision])
    b = np.zeros((1, co, 1, 1), dtype=PRECISIONS[precision])
    return w, b


@dataclass
class Param:
    tensor: Tensor
    frozen: bool = False


class ParamStore:
    """Named parameters with freeze flags, iterated in sorted-name order."""

    def __init__(self, precision: str = "single"):
        self.precision = precision
        self._entries: dict[str, Param] = {}

    def add(self, name: str, data: np.ndarray, frozen: bool = False) -> Tensor:
        if name in self._entries:
            raise UsageError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(data, dtype=PRECISIONS[self.precision]), requires_grad=not frozen)
        self._entries[name] = Param(t, frozen)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return sorted(self._entries)

    def items(self) -> Iterator[tuple[str, Param]]:
        for name in self.names():
            yield name, self._entries[name]

    def is_frozen(self, name: str) -> bool:
        return self._entries[name].frozen

    def set_frozen(self, prefix: str, frozen: bool) -> None:
        for name, p in self._entries.items():
            if name.startswith(prefix):
                p.frozen = frozen
                p.tensor.requires_grad = not frozen

    def set_frozen_exact(self, name: str, frozen: bool) -> None:
        p = self._entries[name]
        p.frozen = frozen
        p.tensor.requires_grad = not frozen

    def freeze(self, prefix: str) -> None:
        self.set_frozen(prefix, True)

    def unfreeze(self, prefix: str) -> None:
        self.set_frozen(prefix, False)

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, p.tensor) for n, p in self.items() if not p.frozen]

    def count(self) -> int:
        return sum(p.tensor.data.size for _, p in self.items())

    def digest(self, prefix: str = "") -> str:
        """SHA-256 over the raw bytes of every parameter under ``prefix``."""
        h = hashlib.sha256()
        for name, p in self.items():
            if name.startswith(prefix):
                h.update(name.encode())
                h.update(p.tensor.data.tobytes())
        return h.hexdigest()

    def set_data(self, name: str, data: np.ndarray) -> None:
        t = self._entries[name].tensor
        if t.data.shape != data.shape:
            raise ShapeError(f"{name}: shape {data.shape} != {t.data.shape}")
        t.data = np.array(data, dtype=t.data.dtype)


class Conv2d:
    """A convolution whose weight and bias live in a :class:`ParamStore`."""

    def __init__(self, store: ParamStore, name: str, ci: int, co: int, kernel=3,
                 stride: int = 1, pad=None, seed: int = 0, zero_init: bool = False):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.store = store
        self.name = name
        self.stride = stride
        self.pad = (kh // 2, kw // 2) if pad is None else pad
        self.ci, self.co = ci, co
        w, b = init_conv(ci, co, kh, kw, derive_seed(seed, name), store.precision)
        if zero_init:
            w[:] = 0
        store.add(f"{name}.weight", w)
        store.add(f"{name}.bias", b)

    @property
    def weight(self) -> Tensor:
        return self.store[f"{self.name}.weight"]

    @property
    def bias(self) -> Tensor:
        return self.store[f"{self.name}.bias"]

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class SepConvGRU:
    """Two chained GRU passes with 1x5 then 5x1 gate convolutions."""

    PASSES = (("h", (1, 5), (0, 2)), ("v", (5, 1), (2, 0)))

    def __init__(self, store: ParamStore, name: str, hidden: int, input_channels: int, seed: int = 0):
        self.hidden_channels = hidden
        self.input_channels = input_channels
        self.gates = {}
        for tag, k, pad in self.PASSES:
            self.gates[tag] = tuple(
                Conv2d(store, f"{name}.{tag}.conv{g}", hidden + input_channels, hidden, k, pad=pad, seed=seed)
                for g in ("z", "r", "q")
            )

    def __call__(self, h_prev: Tensor, x: Tensor) -> Tensor:
        return gru_step(self, h_prev, x)


def gru_step(cell: SepConvGRU, h_prev: Tensor, x: Tensor) -> Tensor:
    n, c, h, w = h_prev.shape
    if c != cell.hidden_channels:
        raise ShapeError(f"hidden state has {c} channels, cell expects {cell.hidden_channels}")
    if x.shape[0] != n or x.shape[2:] != (h, w):
        raise ShapeError(f"input {x.shape} does not match hidden {h_prev.shape}")
    if x.shape[1] != cell.input_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, cell expects {cell.input_channels}")
    hid = h_prev
    for tag, _, _ in SepConvGRU.PASSES:
        convz, convr, convq = cell.gates[tag]
        hx = T.concat_channels([hid, x])
        z = T.sigmoid(convz(hx))
        r = T.sigmoid(convr(hx))
        q = T.tanh(convq(T.concat_channels([T.mul(r, hid), x])))
        hid = T.add(T.mul(T.affine(z, -1.0, 1.0), hid), T.mul(z, q))
    return hid
