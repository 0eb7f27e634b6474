"""Small reverse-mode autodiff over 2-D numpy arrays.

Only the handful of operations the network needs are provided. Every
operation executed while a :class:`GradTape` is active is recorded in
execution order; :meth:`GradTape.backward` replays the record in reverse.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

DTYPE = np.float32
NORM_EPS = 1e-5
NORM_MOMENTUM = 0.1

_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class Tensor:
    """A dense 2-D matrix that can carry a gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.array(values, dtype=dtype if dtype is not None else DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeError(f"Tensor must be 2-D, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("Tensor values must be finite")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t.name = ""
        return t

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        name = f" {self.name!r}" if self.name else ""
        return f"Tensor{name}({self.rows}x{self.cols}, requires_grad={self.requires_grad})"


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class GradTape:
    """Ordered record of the operations of one forward pass.

    Tapes are thread-local: independent graphs may be built on separate
    threads. Use as a context manager, then call :meth:`backward`.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []

    def __enter__(self) -> "GradTape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def backward(self, out: Tensor, seed: Optional[np.ndarray] = None) -> None:
        """Propagate gradients from ``out`` to every leaf that requires them.

        Leaves are tensors used by recorded ops but not produced by one. Their
        gradient is added to ``.grad``; unreached leaves get zeros so every
        requires_grad leaf ends with a gradient of matching shape.
        """
        if seed is None:
            seed = np.ones_like(out.data)
        grads: dict[int, np.ndarray] = {id(out): np.asarray(seed, dtype=out.data.dtype)}
        produced = {id(rec[0]) for rec in self.records}
        leaves: dict[int, Tensor] = {}
        for res, inputs, fn in reversed(self.records):
            for t in inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves[id(t)] = t
            g = grads.pop(id(res), None)
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(t.data)
            g = g.astype(t.data.dtype, copy=False)
            t.grad = g if t.grad is None else t.grad + g
        self.records = []


def _tape() -> Optional[GradTape]:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def _result(arr: np.ndarray, inputs: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    req = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, req)
    tape = _tape()
    if req and tape is not None:
        tape.records.append((out, inputs, fn))
    return out


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


# --------------------------------------------------------------------------
# operations


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with bias broadcast over rows."""
    _check(x.cols == weight.rows, f"linear: input {x.shape} vs weight {weight.shape}")
    if bias is not None:
        _check(bias.shape == (1, weight.cols), f"linear: bias {bias.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0, keepdims=True) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, inputs, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.maximum(x.data, 0), (x,), lambda g: (g * mask,))


class RunningStats:
    """Per-feature running mean/variance used by :func:`feature_norm` in eval mode."""

    def __init__(self, mean: np.ndarray, var: np.ndarray):
        # updated in place so the arrays may live inside a ParameterStore
        self.mean = mean
        self.var = var

    @classmethod
    def fresh(cls, dim: int, dtype=DTYPE) -> "RunningStats":
        return cls(np.zeros((1, dim), dtype=dtype), np.ones((1, dim), dtype=dtype))


def _stats_momentum(stats: RunningStats) -> float:
    counts = getattr(_state, "cumulative", None)
    if counts is None:
        return NORM_MOMENTUM
    k = counts.get(id(stats), 0)
    counts[id(stats)] = k + 1
    return 1.0 / (k + 1)   # first update overwrites, later ones average


@contextlib.contextmanager
def cumulative_stats():
    """Within the block, train-mode :func:`feature_norm` replaces running stats
    by the plain average over every call instead of the momentum update."""
    prev = getattr(_state, "cumulative", None)
    _state.cumulative = {}
    try:
        yield
    finally:
        _state.cumulative = prev


def _block_sum(x: np.ndarray, starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Row sums per consecutive block, accumulated in float64."""
    if len(starts) == 1:
        return x.sum(axis=0, keepdims=True, dtype=np.float64)
    ind = sp.csr_matrix((np.ones(len(x)), np.arange(len(x)), np.append(starts, len(x))),
                        shape=(len(starts), len(x)))
    return np.asarray(ind @ x.astype(np.float64))


def feature_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats,
                 training: bool, blocks: Optional[np.ndarray] = None) -> Tensor:
    """Standardize each column over the row axis, then scale and shift.

    Train mode uses the statistics of ``x`` itself and folds them into
    ``stats`` with momentum 0.1; eval mode uses ``stats``. With ``blocks``
    (start offsets of consecutive row blocks, e.g. one per cloud) train-mode
    statistics are taken per block.
    """
    n, d = x.shape
    _check(gamma.shape == (1, d) and beta.shape == (1, d), "feature_norm: gamma/beta must be 1xD")
    xd = x.data
    if training:
        starts = np.zeros(1, dtype=np.int64) if blocks is None else np.asarray(blocks, dtype=np.int64)
        counts = np.diff(np.append(starts, n))
        if (counts < 2).any():
            raise ValueError("feature_norm in train mode needs at least 2 rows per block")

        def rep(a):
            return a if len(counts) == 1 else np.repeat(a, counts, axis=0)

        mean = _block_sum(xd, starts, counts) / counts[:, None]
        centered = xd - rep(mean.astype(xd.dtype))
        var = _block_sum(centered * centered, starts, counts) / counts[:, None]
        m = _stats_momentum(stats)
        unbiased = var * (counts / (counts - 1))[:, None]
        stats.mean[...] = (1 - m) * stats.mean + m * mean.mean(axis=0, keepdims=True)
        stats.var[...] = (1 - m) * stats.var + m * unbiased.mean(axis=0, keepdims=True)
        inv = rep((1.0 / np.sqrt(var + NORM_EPS)).astype(xd.dtype))
        xhat = centered * inv
    else:
        inv = (1.0 / np.sqrt(stats.var.astype(np.float64) + NORM_EPS)).astype(xd.dtype)
        xhat = (xd - stats.mean.astype(xd.dtype)) * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gg = (g * xhat).sum(axis=0, keepdims=True) if gamma.requires_grad else None
        gb = g.sum(axis=0, keepdims=True) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            if training:
                m1 = (_block_sum(gxhat, starts, counts) / counts[:, None]).astype(g.dtype)
                m2 = (_block_sum(gxhat * xhat, starts, counts) / counts[:, None]).astype(g.dtype)
                gx = inv * (gxhat - rep(m1) - xhat * rep(m2))
            else:
                gx = gxhat * inv
        return gx, gg, gb

    return _result(out, (x, gamma, beta), backward)


def segment_pool(x: Tensor, segment_ids, n_segments: int, mode: str = "max") -> Tensor:
    """Reduce rows sharing a segment id (``max`` or ``mean``).

    Max routes the gradient to the first row attaining the maximum.
    """
    seg = np.asarray(segment_ids, dtype=np.int64)
    _check(seg.shape == (x.rows,), "segment_pool: one segment id per row required")
    if seg.size and (seg.min() < 0 or seg.max() >= n_segments):
        raise ValueError("segment_pool: segment id out of range")
    counts = np.bincount(seg, minlength=n_segments)
    if (counts == 0).any():
        raise ValueError(f"segment_pool: empty segment {int(np.argmin(counts))}")
    if mode == "mean":
        op = sp.csr_matrix(((1.0 / counts[seg]).astype(x.data.dtype), (seg, np.arange(len(seg)))),
                           shape=(n_segments, x.rows))
        return sparse_apply(op, x)
    if mode != "max":
        raise ValueError(f"segment_pool: unknown mode {mode!r}")
    # pad every segment to the longest one by repeating its first row; a
    # repeat never beats the original under first-index tie-breaking
    order = np.argsort(seg, kind="stable")
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    width = int(counts.max())
    pad = np.repeat(order[starts][:, None], width, axis=1)
    seg_sorted = seg[order]
    pad[seg_sorted, np.arange(len(seg)) - starts[seg_sorted]] = order
    stacked = x.data[pad]                       # (S, width, D)
    arg = stacked.argmax(axis=1)                # first maximum
    src_rows = np.take_along_axis(pad, arg, axis=1)  # (S, D) source row per output entry
    out = np.take_along_axis(stacked, arg[:, None, :], axis=1)[:, 0, :]
    cols = np.broadcast_to(np.arange(x.cols), src_rows.shape)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[src_rows, cols] = g  # segments are disjoint, so no (row, col) repeats
        return (gx,)

    return _result(out, (x,), backward)


def sparse_apply(op: sp.spmatrix, x: Tensor) -> Tensor:
    """Left-multiply by a constant sparse matrix (gathers, interpolation, pooling)."""
    _check(op.shape[1] == x.rows, f"sparse_apply: operator {op.shape} vs input {x.shape}")
    op = op.tocsr()
    out = np.asarray(op @ x.data, dtype=x.data.dtype)
    return _result(out, (x,), lambda g: (np.asarray(op.T @ g, dtype=g.dtype),))


def gather_rows(x: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)
    n = x.rows

    def backward(g):
        gx = np.zeros((n, g.shape[1]), dtype=g.dtype)
        np.add.at(gx, idx, g)
        return (gx,)

    return _result(x.data[idx], (x,), backward)


def reshape(x: Tensor, rows: int, cols: int) -> Tensor:
    _check(rows * cols == x.rows * x.cols, f"reshape: {x.shape} -> ({rows}, {cols})")
    shape = x.shape
    return _result(x.data.reshape(rows, cols), (x,), lambda g: (g.reshape(shape),))


def concat_cols(*xs: Tensor) -> Tensor:
    n = xs[0].rows
    _check(all(t.rows == n for t in xs), "concat_cols: row counts differ")
    widths = np.cumsum([0] + [t.cols for t in xs])
    out = np.concatenate([t.data for t in xs], axis=1)

    def backward(g):
        return tuple(g[:, widths[i]:widths[i + 1]] for i in range(len(xs)))

    return _result(out, tuple(xs), backward)


def concat_rows(*xs: Tensor) -> Tensor:
    d = xs[0].cols
    _check(all(t.cols == d for t in xs), "concat_rows: column counts differ")
    offs = np.cumsum([0] + [t.rows for t in xs])
    out = np.concatenate([t.data for t in xs], axis=0)

    def backward(g):
        return tuple(g[offs[i]:offs[i + 1]] for i in range(len(xs)))

    return _result(out, tuple(xs), backward)


def mse_loss(pred: Tensor, truth: Tensor) -> Tensor:
    """Mean of squared differences over every entry, as a 1x1 tensor."""
    _check(pred.shape == truth.shape, f"mse_loss: {pred.shape} vs {truth.shape}")
    diff = pred.data.astype(np.float64) - truth.data.astype(np.float64)
    n = diff.size
    with np.errstate(over="ignore", invalid="ignore"):
        loss = np.array([[np.mean(diff * diff)]]).astype(pred.data.dtype)
    if not np.isfinite(loss).all():
        raise FloatingPointError("mse_loss: non-finite loss")

    def backward(g):
        gp = (2.0 / n) * diff * g
        return gp.astype(pred.data.dtype), (-gp).astype(truth.data.dtype)

    return _result(loss, (pred, truth), backward)
