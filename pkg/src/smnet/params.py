"""Named parameters, SGD with momentum, and the SMN1 checkpoint format.

Checkpoint layout (all integers little-endian uint32, floats little-endian
float32)::

    b"SMN1"
    entry_count
    entry_count x (name_len, name utf-8 bytes, rows, cols, rows*cols floats)
    entry_count x (rows*cols floats)      # momentum buffers, same order

Entries whose name ends in ``running_mean`` or ``running_var`` are
normalization statistics: stored, never trained.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterator, Union

import numpy as np

from .autodiff import DTYPE, Tensor

MAGIC = b"SMN1"
_STAT_SUFFIXES = ("running_mean", "running_var")


class CheckpointError(ValueError):
    pass


def is_stat_name(name: str) -> bool:
    return name.endswith(_STAT_SUFFIXES)


class ParameterStore:
    """Ordered named tensors, each with a momentum buffer of the same shape."""

    def __init__(self):
        self._entries: "OrderedDict[str, Tensor]" = OrderedDict()
        self.momentum: dict[str, np.ndarray] = {}

    def add(self, name: str, values: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        if trainable == is_stat_name(name):
            raise ValueError(f"{name!r}: only *running_mean/*running_var entries may be non-trainable")
        t = Tensor(values, requires_grad=trainable, name=name)
        self._entries[name] = t
        self.momentum[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def items(self):
        return self._entries.items()

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(k, t) for k, t in self._entries.items() if t.requires_grad]

    def n_parameters(self) -> int:
        return sum(t.data.size for _, t in self.trainable())

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._entries.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, t in self._entries.items():
            t.data[...] = snap[k]

    # -- persistence ------------------------------------------------------

    def save(self, path: Union[str, Path]) -> None:
        chunks = [MAGIC, struct.pack("<I", len(self._entries))]
        for name, t in self._entries.items():
            raw = name.encode("utf-8")
            rows, cols = t.shape
            chunks.append(struct.pack("<I", len(raw)) + raw + struct.pack("<II", rows, cols))
            chunks.append(t.data.astype("<f4").tobytes())
        for name in self._entries:
            chunks.append(self.momentum[name].astype("<f4").tobytes())
        Path(path).write_bytes(b"".join(chunks))

    def load(self, path: Union[str, Path]) -> None:
        """Load values and buffers into this store; names and shapes must match."""
        entries, buffers = read_checkpoint(path)
        if list(entries) != list(self._entries):
            missing = sorted(set(self._entries) - set(entries))
            extra = sorted(set(entries) - set(self._entries))
            raise CheckpointError(f"checkpoint entries differ: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, arr in entries.items():
            t = self._entries[name]
            if arr.shape != t.shape:
                raise CheckpointError(
                    f"{name}: expected {t.shape[0]}x{t.shape[1]}, found {arr.shape[0]}x{arr.shape[1]}")
            t.data[...] = arr
            self.momentum[name][...] = buffers[name]


def read_checkpoint(path: Union[str, Path]) -> tuple["OrderedDict[str, np.ndarray]", dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an SMN1 checkpoint")
    (count,) = struct.unpack_from("<I", blob, 4)
    pos = 8
    entries: "OrderedDict[str, np.ndarray]" = OrderedDict()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            rows, cols = struct.unpack_from("<II", blob, pos)
            pos += 8
            n = rows * cols
            entries[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).astype(DTYPE).reshape(rows, cols)
            pos += 4 * n
        buffers = {}
        for name, arr in entries.items():
            buffers[name] = np.frombuffer(blob, dtype="<f4", count=arr.size, offset=pos).astype(DTYPE).reshape(arr.shape)
            pos += 4 * arr.size
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    return entries, buffers


def sgd_momentum_step(store: ParameterStore, lr: float, momentum: float) -> None:
    """``buf = momentum*buf + grad; param -= lr*buf``, then clear gradients."""
    pending = store.trainable()
    for name, t in pending:
        if t.grad is None:
            raise ValueError(f"sgd_momentum_step: no gradient for {name!r}")
    for name, t in pending:
        buf = store.momentum[name]
        buf *= momentum
        buf += t.grad
        t.data -= (lr * buf).astype(t.data.dtype)
        t.grad = None


def glorot_uniform(rng: np.random.Generator, din: int, dout: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (din + dout))
    return rng.uniform(-bound, bound, size=(din, dout)).astype(DTYPE)
