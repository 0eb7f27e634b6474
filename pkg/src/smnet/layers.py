"""Network building blocks: rigid KPConv, set abstraction, feature propagation, heads.

Geometry (neighbourhoods, sampling, grouping, interpolation weights) depends
only on point coordinates, so every layer splits into a ``plan_*`` function
that turns coordinates into constant sparse operators and an ``apply``
method that runs the differentiable part. Plans for several clouds can be
stacked block-diagonally with :func:`stack_coo` so a whole batch runs as one
graph.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParameterStore, glorot_uniform
from .pointcloud import NeighborhoodIndex, ball_query_group, farthest_point_sample


# ---------------------------------------------------------------------------
# sparse operator plumbing


@dataclass
class Coo:
    """Constant sparse matrix as COO triplets."""

    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    shape: tuple

    def __post_init__(self):
        # int32 halves the memory of cached plans
        self.rows = np.asarray(self.rows, dtype=np.int32)
        self.cols = np.asarray(self.cols, dtype=np.int32)

    def tocsr(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.vals, (self.rows, self.cols)), shape=self.shape)


def stack_coo(ops: Sequence[Coo]) -> sp.csr_matrix:
    """Block-diagonal stack of per-cloud operators."""
    r_off = np.cumsum([0] + [o.shape[0] for o in ops])
    c_off = np.cumsum([0] + [o.shape[1] for o in ops])
    rows = np.concatenate([o.rows + r_off[i] for i, o in enumerate(ops)])
    cols = np.concatenate([o.cols + c_off[i] for i, o in enumerate(ops)])
    vals = np.concatenate([o.vals for o in ops])
    return sp.csr_matrix((vals, (rows, cols)), shape=(int(r_off[-1]), int(c_off[-1])))


def selection_coo(index: np.ndarray, n_src: int) -> Coo:
    idx = np.asarray(index, dtype=np.int64)
    return Coo(np.arange(len(idx)), idx, np.ones(len(idx), dtype=ad.DTYPE), (len(idx), n_src))


def mean_pool_coo(n_rows: int) -> Coo:
    return Coo(np.zeros(n_rows, dtype=np.int64), np.arange(n_rows),
               np.full(n_rows, 1.0 / n_rows, dtype=ad.DTYPE), (1, n_rows))


# ---------------------------------------------------------------------------
# dense pieces


class Linear:
    def __init__(self, store: ParameterStore, name: str, din: int, dout: int, rng: np.random.Generator):
        self.w = store.add(f"{name}.weight", glorot_uniform(rng, din, dout))
        self.b = store.add(f"{name}.bias", np.zeros((1, dout), dtype=ad.DTYPE))
        self.din, self.dout = din, dout

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.w, self.b)


class Norm:
    def __init__(self, store: ParameterStore, name: str, dim: int):
        self.gamma = store.add(f"{name}.gamma", np.ones((1, dim), dtype=ad.DTYPE))
        self.beta = store.add(f"{name}.beta", np.zeros((1, dim), dtype=ad.DTYPE))
        mean = store.add(f"{name}.running_mean", np.zeros((1, dim), dtype=ad.DTYPE), trainable=False)
        var = store.add(f"{name}.running_var", np.ones((1, dim), dtype=ad.DTYPE), trainable=False)
        self.stats = ad.RunningStats(mean.data, var.data)

    def __call__(self, x: Tensor, training: bool, blocks=None) -> Tensor:
        return ad.feature_norm(x, self.gamma, self.beta, self.stats, training, blocks)


class SharedMLP:
    """Per-row ``linear -> norm -> relu`` stack."""

    def __init__(self, store: ParameterStore, name: str, din: int, widths: Sequence[int],
                 rng: np.random.Generator):
        self.layers = []
        for i, w in enumerate(widths):
            self.layers.append((Linear(store, f"{name}.{i}", din, w, rng), Norm(store, f"{name}.{i}.norm", w)))
            din = w
        self.dout = din

    def __call__(self, x: Tensor, training: bool, blocks=None) -> Tensor:
        for lin, norm in self.layers:
            x = ad.relu(norm(lin(x), training, blocks))
        return x


# ---------------------------------------------------------------------------
# kernel point convolution


def kpconv_correlation(y, kernel_point, sigma: float) -> float:
    """Linear influence ``max(0, 1 - |y - x_k| / sigma)``."""
    d = np.linalg.norm(np.asarray(y, float) - np.asarray(kernel_point, float))
    return max(0.0, 1.0 - d / sigma)


def init_kernel_points(k: int, radius: float = 1.0, seed: int = 0, iterations: int = 1000) -> np.ndarray:
    """One point at the origin, the rest spread by repulsion inside the ball."""
    if k < 1:
        raise ValueError("need at least one kernel point")
    pts = np.zeros((k, 3))
    if k == 1:
        return pts
    rng = np.random.default_rng(seed)
    free = rng.normal(size=(k - 1, 3))
    free *= (rng.uniform(0.3, 0.9, size=(k - 1, 1)) / np.linalg.norm(free, axis=1, keepdims=True))
    pts[1:] = free
    step0 = 0.05
    for it in range(iterations):
        diff = pts[:, None, :] - pts[None, :, :]
        d2 = (diff * diff).sum(-1) + np.eye(k)
        force = (diff / d2[..., None] ** 1.5).sum(axis=1)  # inverse-square repulsion
        force -= 0.5 * pts  # weak pull to the centre keeps the ball filled
        step = step0 * (1 - it / iterations) + 1e-3
        norms = np.linalg.norm(force[1:], axis=1, keepdims=True)
        pts[1:] += step * force[1:] / np.maximum(norms, 1e-12) * np.minimum(norms, 1.0)
        r = np.linalg.norm(pts[1:], axis=1, keepdims=True)
        pts[1:] *= np.minimum(1.0, 1.0 / np.maximum(r, 1e-12))
    return pts * radius


@dataclass
class KernelPointSet:
    radius: float
    sigma: float
    points: np.ndarray  # (K, 3), all within radius

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if len(self.points) < 1:
            raise ValueError("need at least one kernel point")
        if (np.linalg.norm(self.points, axis=1) > self.radius * (1 + 1e-9)).any():
            raise ValueError("kernel points must lie inside the kernel radius")

    @property
    def k(self) -> int:
        return len(self.points)

    @classmethod
    def make(cls, k: int, radius: float, sigma: float, seed: int = 0) -> "KernelPointSet":
        return cls(radius, sigma, init_kernel_points(k, radius, seed))


def plan_kpconv(query: np.ndarray, support: np.ndarray, kernel: KernelPointSet,
                index: Optional[NeighborhoodIndex] = None, density_norm: bool = False) -> Coo:
    """Operator ``A`` with ``A[q*K + k, i] = h(x_i - x_q, kernel_k)`` for neighbours i of q.

    With ``density_norm`` each query's rows are divided by its neighbour count,
    so the output no longer scales with local sampling density.
    """
    index = index or NeighborhoodIndex(support)
    groups = index.radius_query(query, kernel.radius)
    counts = np.array([len(g) for g in groups], dtype=np.int64)
    q_idx = np.repeat(np.arange(len(query)), counts)
    s_idx = np.concatenate(groups) if groups else np.zeros(0, dtype=np.int64)
    y = support[s_idx] - query[q_idx]
    dist = np.sqrt(((y[:, None, :] - kernel.points[None]) ** 2).sum(-1))
    h = np.maximum(0.0, 1.0 - dist / kernel.sigma)
    if density_norm:
        h = h / np.maximum(counts[q_idx], 1)[:, None]
    pair, kk = np.nonzero(h)
    k = kernel.k
    return Coo(q_idx[pair] * k + kk, s_idx[pair], h[pair, kk].astype(ad.DTYPE),
               (len(query) * k, len(support)))


class KPConv:
    """Rigid kernel point convolution: ``out(x) = sum_i sum_k h(y_i, x_k) f_i W_k``."""

    def __init__(self, store: ParameterStore, name: str, kernel: KernelPointSet, din: int, dout: int,
                 rng: np.random.Generator):
        self.kernel = kernel
        self.din, self.dout = din, dout
        # W_k stacked row-wise: rows k*din:(k+1)*din hold W_k
        w = np.concatenate([glorot_uniform(rng, din, dout) for _ in range(kernel.k)], axis=0)
        self.w = store.add(f"{name}.weight", w)

    def apply(self, op: sp.spmatrix, n_query: int, features: Tensor) -> Tensor:
        agg = ad.sparse_apply(op, features)  # (n_query*K, din)
        agg = ad.reshape(agg, n_query, self.kernel.k * self.din)
        return ad.linear(agg, self.w)


def kpconv_forward(points: np.ndarray, features: Tensor, kernel: KernelPointSet, weight: Tensor,
                   index: Optional[NeighborhoodIndex] = None, query: Optional[np.ndarray] = None) -> Tensor:
    """Single-cloud convenience wrapper; ``weight`` is (K*Din, Dout)."""
    points = np.asarray(points, dtype=np.float64)
    query = points if query is None else np.asarray(query, dtype=np.float64)
    op = plan_kpconv(query, points, kernel, index).tocsr()
    agg = ad.reshape(ad.sparse_apply(op, features), len(query), kernel.k * features.cols)
    return ad.linear(agg, weight)


# ---------------------------------------------------------------------------
# PointNet++ pieces


@dataclass(frozen=True)
class SetAbstractionConfig:
    n_centroids: int
    radius: float
    max_group: int
    mlp_widths: tuple

    def __post_init__(self):
        if self.n_centroids < 1 or not self.mlp_widths:
            raise ValueError("set abstraction needs n_centroids >= 1 and a non-empty MLP")


@dataclass
class SAPlan:
    centroids: np.ndarray      # indices into the input points
    gather: Coo                # (M, N) picks group members
    segments: np.ndarray       # (M,) group id of each member row
    rel_coords: np.ndarray     # (M, 3) member minus centroid


def plan_set_abstraction(points: np.ndarray, cfg: SetAbstractionConfig, start_index: int = 0,
                         index: Optional[NeighborhoodIndex] = None) -> SAPlan:
    n_c = min(cfg.n_centroids, len(points))
    cent = farthest_point_sample(points, n_c, start_index)
    groups = ball_query_group(points, cent, cfg.radius, cfg.max_group, index)
    members = np.concatenate(groups)
    segs = np.repeat(np.arange(n_c), [len(g) for g in groups])
    rel = (points[members] - points[cent][segs]).astype(ad.DTYPE)
    return SAPlan(cent, selection_coo(members, len(points)), segs, rel)


class SetAbstraction:
    """FPS centroids, ball-query groups, shared MLP on ``[y_i, f_i]``, max per group."""

    def __init__(self, store: ParameterStore, name: str, cfg: SetAbstractionConfig, din: int,
                 rng: np.random.Generator):
        self.cfg = cfg
        self.mlp = SharedMLP(store, name, din + 3, cfg.mlp_widths, rng)
        self.dout = self.mlp.dout

    def apply(self, gather: sp.spmatrix, rel_coords: np.ndarray, segments: np.ndarray, n_groups: int,
              features: Tensor, training: bool, blocks=None) -> Tensor:
        grouped = ad.sparse_apply(gather, features)
        rows = ad.concat_cols(Tensor._wrap(rel_coords, False), grouped)
        return ad.segment_pool(self.mlp(rows, training, blocks), segments, n_groups, "max")


def set_abstraction(points: np.ndarray, features: Tensor, layer: SetAbstraction, training: bool = False,
                    start_index: int = 0) -> tuple[np.ndarray, Tensor]:
    """Single-cloud set abstraction: returns (centroid coordinates, centroid features)."""
    plan = plan_set_abstraction(points, layer.cfg, start_index)
    out = layer.apply(plan.gather.tocsr(), plan.rel_coords, plan.segments, len(plan.centroids),
                      features, training)
    return points[plan.centroids], out


def interpolation_coo(coarse: np.ndarray, fine: np.ndarray, k: int = 3, eps: float = 1e-8) -> Coo:
    """Inverse-squared-distance weights over the ``k`` nearest coarse points; rows sum to 1."""
    index = NeighborhoodIndex(coarse)
    dist, idx = index.knn(fine, k)
    w = 1.0 / (dist * dist + eps)
    w /= w.sum(axis=1, keepdims=True)
    kk = idx.shape[1]
    return Coo(np.repeat(np.arange(len(fine)), kk), idx.reshape(-1), w.reshape(-1).astype(ad.DTYPE),
               (len(fine), len(coarse)))


class FeaturePropagation:
    """Interpolate coarse features onto fine points, concat skip features, shared MLP."""

    def __init__(self, store: ParameterStore, name: str, d_coarse: int, d_skip: int, widths: Sequence[int],
                 rng: np.random.Generator):
        self.mlp = SharedMLP(store, name, d_coarse + d_skip, widths, rng)
        self.dout = self.mlp.dout

    def apply(self, interp: sp.spmatrix, coarse_features: Tensor, skip: Optional[Tensor], training: bool,
              blocks=None) -> Tensor:
        up = ad.sparse_apply(interp, coarse_features)
        x = up if skip is None else ad.concat_cols(up, skip)
        return self.mlp(x, training, blocks)


def feature_propagation(coarse_points: np.ndarray, coarse_features: Tensor, fine_points: np.ndarray,
                        skip_features: Optional[Tensor], layer: FeaturePropagation,
                        training: bool = False) -> Tensor:
    op = interpolation_coo(coarse_points, fine_points).tocsr()
    return layer.apply(op, coarse_features, skip_features, training)


def global_average_pool(features: Tensor) -> Tensor:
    """Column means as a 1xD tensor."""
    return ad.segment_pool(features, np.zeros(features.rows, dtype=np.int64), 1, "mean")


class FCHead:
    """``linear [-> norm] -> relu`` per hidden width, then a linear output layer with no activation.

    Averaging hundreds of point features leaves pooled vectors that differ
    little between clouds; normalizing the hidden layers rescales those
    differences so the head does not collapse onto the mean target.
    """

    def __init__(self, store: ParameterStore, name: str, din: int, widths: Sequence[int], out_dim: int,
                 rng: np.random.Generator, norm: bool = True):
        if not widths:
            raise ValueError("fc head needs at least one hidden width")
        self.hidden = []
        self.norms = []
        for i, w in enumerate(widths):
            self.hidden.append(Linear(store, f"{name}.{i}", din, w, rng))
            self.norms.append(Norm(store, f"{name}.{i}.norm", w) if norm else None)
            din = w
        self.out = Linear(store, f"{name}.out", din, out_dim, rng)
        self.out_dim = out_dim

    def __call__(self, pooled: Tensor, training: bool = False) -> Tensor:
        x = pooled
        for lin, norm in zip(self.hidden, self.norms):
            x = lin(x)
            if norm is not None:
                x = norm(x, training)
            x = ad.relu(x)
        return self.out(x)


def fc_head(pooled: Tensor, head: FCHead, training: bool = False) -> Tensor:
    return head(pooled, training)
