"""Shape-similarity, regression and surface-complexity metrics, plus error maps."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .pointcloud import PointCloud


class MetricError(ValueError):
    pass


def _pts(a) -> np.ndarray:
    pts = a.points if isinstance(a, PointCloud) else np.asarray(a, dtype=np.float64)
    pts = pts.reshape(-1, 3)
    if len(pts) == 0:
        raise MetricError("empty point cloud")
    return pts


def nearest_distances(a, b) -> np.ndarray:
    """For every point of ``a``, the Euclidean distance to its nearest point of ``b``."""
    pa, pb = _pts(a), _pts(b)
    _, idx = cKDTree(pb).query(pa, k=1)
    diff = pa - pb[idx]
    # recomputed so the value is the plain Euclidean formula, whatever the tree did
    return np.sqrt((diff * diff).sum(axis=1))


@dataclass
class NearestDistanceProfile:
    distances: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.distances.mean())

    @classmethod
    def between(cls, a, b) -> "NearestDistanceProfile":
        return cls(nearest_distances(a, b))


def chamfer_distance(a, b) -> float:
    """Mean squared nearest distance A->B plus B->A."""
    dab = nearest_distances(a, b)
    dba = nearest_distances(b, a)
    return float(np.mean(dab * dab) + np.mean(dba * dba))


def distance_stddev(a, b) -> float:
    """Population standard deviation of the A->B nearest distances."""
    d = nearest_distances(a, b)
    return float(np.sqrt(np.mean((d - d.mean()) ** 2)))


def hausdorff_distance(a, b) -> float:
    return float(max(nearest_distances(a, b).max(), nearest_distances(b, a).max()))


def regression_metrics(pred, truth, per_dimension_r2: bool = False) -> tuple[float, float, float]:
    """(MSE, MAE, R^2) pooled over every entry.

    R^2 = 1 - SS_res / SS_tot with SS_tot taken about each column's mean.
    With ``per_dimension_r2`` the R^2 of each column is averaged instead
    (constant columns are skipped).
    """
    p = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    t = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    if p.shape != t.shape:
        raise MetricError(f"prediction shape {p.shape} != truth shape {t.shape}")
    if len(t) < 2:
        raise MetricError("R^2 needs at least two rows")
    err = p - t
    mse = float(np.mean(err * err))
    mae = float(np.mean(np.abs(err)))
    ss_res = (err * err).sum(axis=0)
    ss_tot = ((t - t.mean(axis=0)) ** 2).sum(axis=0)
    if per_dimension_r2:
        ok = ss_tot > 0
        if not ok.any():
            raise MetricError("R^2 undefined: every truth column is constant")
        r2 = float(np.mean(1 - ss_res[ok] / ss_tot[ok]))
    else:
        if ss_tot.sum() == 0:
            raise MetricError("R^2 undefined: truth has zero variance")
        r2 = float(1 - ss_res.sum() / ss_tot.sum())
    return mse, mae, r2


def per_dimension_error(pred, truth) -> np.ndarray:
    """Mean absolute error of each output dimension."""
    p, t = np.atleast_2d(pred), np.atleast_2d(truth)
    return np.abs(p - t).mean(axis=0)


def max_normalized(values: dict) -> dict:
    """Scale a dict of non-negative metrics so the largest is 1 (for bar charts)."""
    top = max(values.values()) if values else 0.0
    return {k: (v / top if top > 0 else 0.0) for k, v in values.items()}


# ---------------------------------------------------------------------------
# error maps

ERRMAP_RES = 30
# face name -> (outward axis, sign, in-plane column axis, in-plane row axis)
CUBE_FACE_FRAMES = {
    "top": (2, 1, 0, 1),
    "bottom": (2, -1, 0, 1),
    "+x": (0, 1, 1, 2),
    "-x": (0, -1, 1, 2),
    "+y": (1, 1, 0, 2),
    "-y": (1, -1, 0, 2),
}
# unfolded cross, top face in the upper row: (row, col) blocks of a 3x4 sheet
CROSS_POSITION = {"top": (0, 1), "-x": (1, 0), "-y": (1, 1), "+x": (1, 2), "+y": (1, 3), "bottom": (2, 1)}


@dataclass
class ErrorMap:
    layout: str                     # "plate" or "cube"
    faces: dict                     # face name -> (res, res) mean error, NaN where empty
    counts: dict                    # face name -> (res, res) occupancy

    @property
    def total_count(self) -> int:
        return int(sum(c.sum() for c in self.counts.values()))

    def unfolded(self) -> np.ndarray:
        """Cube faces laid out as a 3x4 cross (plate: the single grid)."""
        if self.layout == "plate":
            return self.faces["plate"]
        res = next(iter(self.faces.values())).shape[0]
        sheet = np.full((3 * res, 4 * res), np.nan)
        for name, (r, c) in CROSS_POSITION.items():
            sheet[r * res:(r + 1) * res, c * res:(c + 1) * res] = self.faces[name]
        return sheet

    def write_csv(self, out_dir, prefix: str = "errmap_face_") -> list[Path]:
        paths = []
        for name, grid in self.faces.items():
            safe = name.replace("+", "pos").replace("-", "neg")
            path = Path(out_dir) / f"{prefix}{safe}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow([name])
                for row in grid:
                    w.writerow(["" if np.isnan(v) else f"{v:.9g}" for v in row])
            paths.append(path)
        return paths


def _cells(coords: np.ndarray, lo: float, hi: float, res: int) -> np.ndarray:
    t = (coords - lo) / (hi - lo)
    return np.clip(np.floor(t * res).astype(int), 0, res - 1)


def build_error_map(reference, errors, layout: str = "plate", res: int = ERRMAP_RES,
                    bounds=None, signed: bool = False, tol: float = 1e-6) -> ErrorMap:
    """Average per-point errors into ``res x res`` cells using pre-deformation positions.

    Plate: one grid over the x-y extent of ``bounds`` (default: the reference
    bounding box). Cube: each point is assigned to the face its reference
    position lies on (largest normalized coordinate), then gridded over that
    face. Errors are averaged as absolute values unless ``signed``.
    """
    ref = _pts(reference)
    err = np.asarray(errors, dtype=np.float64).reshape(-1)
    if len(err) != len(ref):
        raise MetricError(f"{len(err)} errors for {len(ref)} reference points")
    if not signed:
        err = np.abs(err)
    if bounds is None:
        lo, hi = ref.min(axis=0), ref.max(axis=0)
    else:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
        outside = np.any((ref < lo - tol) | (ref > hi + tol), axis=1)
        if outside.any():
            i = int(np.flatnonzero(outside)[0])
            raise MetricError(f"reference point {i} {ref[i].tolist()} lies outside the map bounds")
    ext = np.where(hi - lo > 0, hi - lo, 1.0)
    faces, counts = {}, {}
    if layout == "plate":
        groups = {"plate": (np.arange(len(ref)), 0, 1)}
    elif layout == "cube":
        centre = (lo + hi) / 2
        rel = (ref - centre) / (ext / 2)
        axis = np.argmax(np.abs(rel), axis=1)
        sign = np.sign(rel[np.arange(len(rel)), axis])
        groups = {}
        for name, (ax, sg, cu, cv) in CUBE_FACE_FRAMES.items():
            groups[name] = (np.flatnonzero((axis == ax) & (sign == sg)), cu, cv)
    else:
        raise MetricError(f"unknown error-map layout {layout!r}")
    for name, (idx, cu, cv) in groups.items():
        grid_sum = np.zeros((res, res))
        grid_n = np.zeros((res, res), dtype=np.int64)
        if len(idx):
            r = _cells(ref[idx, cv], lo[cv], hi[cv], res)
            c = _cells(ref[idx, cu], lo[cu], hi[cu], res)
            np.add.at(grid_sum, (r, c), err[idx])
            np.add.at(grid_n, (r, c), 1)
        with np.errstate(invalid="ignore", divide="ignore"):
            faces[name] = np.where(grid_n > 0, grid_sum / np.maximum(grid_n, 1), np.nan)
        counts[name] = grid_n
    return ErrorMap(layout, faces, counts)


# ---------------------------------------------------------------------------
# surface complexity


@dataclass
class HeightGrid:
    heights: np.ndarray   # (n, n) z values; rows follow y, columns follow x
    spacing: float = 1.0

    def __post_init__(self):
        h = np.asarray(self.heights, dtype=np.float64)
        if h.ndim != 2 or h.shape[0] != h.shape[1]:
            raise MetricError("height grid must be square")
        if h.shape[0] < 3:
            raise MetricError("height grid needs n >= 3")
        if not np.isfinite(h).all():
            raise MetricError("height grid contains non-finite values")
        if not self.spacing > 0:
            raise MetricError("grid spacing must be positive")
        self.heights = h

    def normals(self) -> np.ndarray:
        """Unit normals (-dz/dx, -dz/dy, 1)/norm; central differences inside, one-sided at borders."""
        gy, gx = np.gradient(self.heights, self.spacing, edge_order=1)
        n = np.stack([-gx, -gy, np.ones_like(gx)], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    @classmethod
    def from_function(cls, fn, n: int, half_width: float = 1.0) -> "HeightGrid":
        xs = np.linspace(-half_width, half_width, n)
        x, y = np.meshgrid(xs, xs)
        return cls(fn(x, y), spacing=xs[1] - xs[0])


def _angles(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.arccos(np.clip((a * b).sum(axis=-1), -1.0, 1.0))


def surface_complexity(grid: HeightGrid) -> float:
    """Population variance (rad^2) of angles between each normal and its +x and +y neighbours."""
    n = grid.normals()
    ax = _angles(n[:, :-1], n[:, 1:])
    ay = _angles(n[:-1, :], n[1:, :])
    theta = np.concatenate([ax.ravel(), ay.ravel()])
    return float(np.var(theta))


ANALYTIC_SURFACES = ("plane", "dome", "saddle", "wavy")


def analytic_surface(name: str, n: int = 64, amplitude: float = 1.0) -> HeightGrid:
    """Built-in surfaces: plane, dome (x^2+y^2), saddle (x^2-y^2), wavy:k (k periods across)."""
    kind, _, arg = name.partition(":")
    if kind == "plane":
        fn = lambda x, y: np.zeros_like(x) + amplitude
    elif kind == "dome":
        fn = lambda x, y: amplitude * (x ** 2 + y ** 2)
    elif kind == "saddle":
        fn = lambda x, y: amplitude * (x ** 2 - y ** 2)
    elif kind == "wavy":
        k = float(arg or 1)
        fn = lambda x, y: 0.1 * amplitude * np.sin(k * np.pi * x) * np.sin(k * np.pi * y)
    else:
        raise MetricError(f"unknown analytic surface {name!r}; choose from {ANALYTIC_SURFACES}")
    return HeightGrid.from_function(fn, n)


def regrid_heights(uv: np.ndarray, h: np.ndarray, n: int) -> HeightGrid:
    """Mean height per cell of an ``n x n`` grid over the points' in-plane bounding box."""
    lo, hi = uv.min(axis=0), uv.max(axis=0)
    if np.any(hi - lo <= 0):
        raise MetricError("degenerate face extent")
    c = _cells(uv[:, 0], lo[0], hi[0], n)
    r = _cells(uv[:, 1], lo[1], hi[1], n)
    s = np.zeros((n, n))
    k = np.zeros((n, n))
    np.add.at(s, (r, c), h)
    np.add.at(k, (r, c), 1)
    if (k == 0).any():
        raise MetricError(f"{int((k == 0).sum())} empty cells at grid n={n}; use a coarser grid")
    return HeightGrid(s / k, spacing=float((hi - lo).max()) / n)


def complexity_from_cloud(cloud, faces: str = "plate", n: int = 16) -> float:
    """Re-grid each face's heights and average the per-face surface complexity."""
    pts = _pts(cloud)
    if faces == "plate":
        return surface_complexity(regrid_heights(pts[:, :2], pts[:, 2], n))
    if faces != "cube":
        raise MetricError(f"unknown face layout {faces!r}")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    centre, half = (lo + hi) / 2, (hi - lo) / 2
    rel = (pts - centre) / np.where(half > 0, half, 1)
    axis = np.argmax(np.abs(rel), axis=1)
    sign = np.sign(rel[np.arange(len(rel)), axis])
    values = []
    for name, (ax, sg, cu, cv) in CUBE_FACE_FRAMES.items():
        sel = (axis == ax) & (sign == sg)
        if not sel.any():
            raise MetricError(f"face {name} has no points")
        p = pts[sel]
        values.append(surface_complexity(regrid_heights(p[:, [cu, cv]], sg * p[:, ax], n)))
    return float(np.mean(values))
