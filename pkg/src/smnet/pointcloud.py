"""Point clouds, preprocessing, spatial queries and farthest point sampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree


class PointCloudError(ValueError):
    pass


@dataclass(frozen=True)
class PointCloud:
    """An ordered (N, 3) set of points, optionally with pre-deformation positions."""

    points: np.ndarray
    reference_points: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(pts).all():
            raise PointCloudError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.reference_points is not None:
            ref = np.asarray(self.reference_points, dtype=np.float64).reshape(-1, 3)
            if ref.shape != pts.shape:
                raise PointCloudError(f"reference has {len(ref)} points, cloud has {len(pts)}")
            if not np.isfinite(ref).all():
                raise PointCloudError("reference coordinates must be finite")
            object.__setattr__(self, "reference_points", ref)

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, index) -> "PointCloud":
        idx = np.asarray(index, dtype=np.int64)
        ref = None if self.reference_points is None else self.reference_points[idx]
        return PointCloud(self.points[idx], ref)


# ---------------------------------------------------------------------------
# voxel grids


def voxel_keys(points: np.ndarray, cell_size: float) -> np.ndarray:
    """Integer cell index of every point on a grid aligned with the origin."""
    if not cell_size > 0:
        raise PointCloudError("cell_size must be positive")
    return np.floor(np.asarray(points) / cell_size).astype(np.int64)


@dataclass
class VoxelGrid:
    cell_size: float
    origin: tuple = (0.0, 0.0, 0.0)
    cells: dict = field(default_factory=dict)  # (i, j, k) -> array of member indices

    @classmethod
    def build(cls, points: np.ndarray, cell_size: float) -> "VoxelGrid":
        keys = voxel_keys(points, cell_size)
        uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        order = np.argsort(inverse, kind="stable")
        bounds = np.cumsum(np.bincount(inverse, minlength=len(uniq)))[:-1]
        members = np.split(order, bounds)
        return cls(cell_size, (0.0, 0.0, 0.0), {tuple(k): m for k, m in zip(uniq.tolist(), members)})


_FACE_NEIGHBORS = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]])


def interior_mask(points: np.ndarray, cell_size: float) -> np.ndarray:
    """True for points whose voxel has all six face-neighbour voxels occupied."""
    keys = voxel_keys(points, cell_size)
    occupied = {tuple(k) for k in keys.tolist()}
    mask = np.ones(len(keys), dtype=bool)
    for off in _FACE_NEIGHBORS:
        nb = keys + off
        mask &= np.fromiter((tuple(k) in occupied for k in nb.tolist()), dtype=bool, count=len(nb))
    return mask


def remove_interior_points(cloud: PointCloud, cell_size: float) -> PointCloud:
    """Keep points in occupied voxels that touch at least one empty voxel."""
    if len(cloud) == 0:
        raise PointCloudError("empty cloud")
    keep = ~interior_mask(cloud.points, cell_size)
    if not keep.any():
        raise PointCloudError(f"cell size {cell_size} classifies every point as interior")
    return cloud.subset(np.flatnonzero(keep))


def voxel_average_downsample(cloud: PointCloud, cell_size: float) -> PointCloud:
    """Replace the members of each occupied voxel by their mean.

    Output points are ordered by voxel index (lexicographic).
    """
    if len(cloud) == 0:
        return cloud
    keys = voxel_keys(cloud.points, cell_size)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)

    def mean_of(arr):
        out = np.zeros((len(counts), 3))
        for c in range(3):
            out[:, c] = np.bincount(inverse, weights=arr[:, c], minlength=len(counts))
        return out / counts[:, None]

    ref = None if cloud.reference_points is None else mean_of(cloud.reference_points)
    return PointCloud(mean_of(cloud.points), ref)


def random_downsample(cloud: PointCloud, n_target: int, seed: int) -> PointCloud:
    """Uniform subset of ``n_target`` points without replacement, original order kept."""
    if n_target > len(cloud):
        raise PointCloudError(f"cannot keep {n_target} of {len(cloud)} points")
    if n_target < 0:
        raise PointCloudError("n_target must be non-negative")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(cloud), size=n_target, replace=False))
    return cloud.subset(idx)


# ---------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class TransformRecord:
    """``normalized = scale * (rotation @ (p - translation))``."""

    translation: np.ndarray
    rotation: np.ndarray
    scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * ((np.asarray(points) - self.translation) @ self.rotation.T)

    def invert(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) / self.scale) @ self.rotation + self.translation

    def to_dict(self) -> dict:
        return {"translation": self.translation.tolist(), "rotation": self.rotation.tolist(),
                "scale": float(self.scale)}

    @classmethod
    def from_dict(cls, d: dict) -> "TransformRecord":
        return cls(np.asarray(d["translation"], float), np.asarray(d["rotation"], float), float(d["scale"]))


def _bbox_volume(points: np.ndarray) -> float:
    ext = points.max(axis=0) - points.min(axis=0)
    return float(np.prod(np.maximum(ext, 1e-12)))


def alignment_rotation(reference: np.ndarray) -> np.ndarray:
    """Rotation that makes the reference's principal axes coordinate-parallel.

    Principal axes are snapped to the nearest coordinate axis so an already
    aligned reference yields the identity; the candidate is only used when it
    actually shrinks the reference bounding box.
    """
    centered = reference - reference.mean(axis=0)
    _, vecs = np.linalg.eigh(centered.T @ centered)
    rot = np.zeros((3, 3))
    free = [0, 1, 2]
    for v in vecs.T[::-1]:
        axis = max(free, key=lambda a: abs(v[a]))
        free.remove(axis)
        rot[axis] = v if v[axis] >= 0 else -v
    if np.linalg.det(rot) < 0:
        rot[2] = -rot[2]
    if _bbox_volume(centered @ rot.T) < _bbox_volume(centered) * (1 - 1e-9):
        return rot
    return np.eye(3)


def center_and_normalize(cloud: PointCloud, align: bool = True) -> tuple[PointCloud, TransformRecord]:
    """Center on the bounding box, align to the reference, scale longest extent to 1."""
    pts = cloud.points
    if len(pts) < 2 or np.all(pts == pts[0]):
        raise PointCloudError("normalization needs at least two distinct points")
    rot = np.eye(3)
    if align and cloud.reference_points is not None:
        rot = alignment_rotation(cloud.reference_points)
    rotated = pts @ rot.T
    lo, hi = rotated.min(axis=0), rotated.max(axis=0)
    extent = float((hi - lo).max())
    if extent <= 0:
        raise PointCloudError("zero extent")
    center_rot = (lo + hi) / 2
    translation = center_rot @ rot  # back in input coordinates
    rec = TransformRecord(translation, rot, 1.0 / extent)
    out = rec.apply(pts)
    # pin the longest axis onto +-0.5 exactly despite rounding
    np.clip(out, -0.5, 0.5, out=out)
    a = int(np.argmax(hi - lo))
    out[np.argmin(rotated[:, a]), a] = -0.5
    out[np.argmax(rotated[:, a]), a] = 0.5
    ref = None if cloud.reference_points is None else rec.apply(cloud.reference_points)
    return PointCloud(out, ref), rec


def is_normalized(points: np.ndarray, tol: float = 1e-6) -> bool:
    pts = np.asarray(points)
    if len(pts) < 2:
        return False
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    ext = hi - lo
    a = int(np.argmax(ext))
    return (abs(ext[a] - 1.0) <= tol and np.all(np.abs(lo + hi) <= tol)
            and np.all(pts >= -0.5 - tol) and np.all(pts <= 0.5 + tol))


# ---------------------------------------------------------------------------
# neighbourhoods


def pairwise_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distances; the one formula every query and oracle shares."""
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


class NeighborhoodIndex:
    """Read-only radius / k-nearest queries over a fixed point set."""

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=np.float64)
        self._tree = cKDTree(self.points)

    def __len__(self) -> int:
        return len(self.points)

    def radius_query(self, query: np.ndarray, radius: float) -> list[np.ndarray]:
        """Indices within ``radius`` of each query point, nearest first (ties by index)."""
        query = np.atleast_2d(np.asarray(query, dtype=np.float64))
        cand = self._tree.query_ball_point(query, radius * (1 + 1e-9) + 1e-12)
        out = []
        for q, c in zip(query, cand):
            c = np.asarray(c, dtype=np.int64)
            d = pairwise_distance(q[None], self.points[c])[0]
            keep = d <= radius
            c, d = c[keep], d[keep]
            order = np.lexsort((c, d))
            out.append(c[order])
        return out

    def knn(self, query: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        query = np.atleast_2d(np.asarray(query, dtype=np.float64))
        k = min(k, len(self.points))
        dist, idx = self._tree.query(query, k=k)
        return dist.reshape(len(query), k), idx.reshape(len(query), k)


def farthest_point_sample(points: np.ndarray, n_samples: int, start_index: int = 0,
                          seed: Optional[int] = None) -> np.ndarray:
    """Greedy max-min subset selection.

    Starts from ``start_index`` (or a seeded random point when ``seed`` is
    given) and repeatedly adds the unselected point farthest from the
    selected set; ties go to the lowest index.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if not 1 <= n_samples <= n:
        raise PointCloudError(f"n_samples={n_samples} outside [1, {n}]")
    if seed is not None:
        start_index = int(np.random.default_rng(seed).integers(n))
    if not 0 <= start_index < n:
        raise PointCloudError(f"start_index {start_index} outside [0, {n})")
    chosen = np.empty(n_samples, dtype=np.int64)
    chosen[0] = start_index
    diff = pts - pts[start_index]
    d = (diff * diff).sum(axis=1)
    d[start_index] = -1.0
    for i in range(1, n_samples):
        nxt = int(np.argmax(d))
        chosen[i] = nxt
        diff = pts - pts[nxt]
        np.minimum(d, (diff * diff).sum(axis=1), out=d)
        d[nxt] = -1.0
    return chosen


def ball_query_group(points: np.ndarray, centroids, radius: float, max_group: int,
                     index: Optional[NeighborhoodIndex] = None) -> list[np.ndarray]:
    """Up to ``max_group`` nearest points within ``radius`` of each centroid.

    Groups are ragged and never empty: a centroid with no neighbours forms a
    group of itself.
    """
    if not radius > 0:
        raise PointCloudError("radius must be positive")
    if max_group < 1:
        raise PointCloudError("max_group must be >= 1")
    index = index or NeighborhoodIndex(points)
    centroids = np.asarray(centroids, dtype=np.int64)
    groups = index.radius_query(index.points[centroids], radius)
    out = []
    for c, g in zip(centroids, groups):
        g = g[:max_group]
        if len(g) == 0:
            g = np.array([c])
        out.append(g)
    return out
