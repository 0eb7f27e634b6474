"""Analytic surrogate forward models: control vector -> deformed surface cloud.

Each actuator cell carries a radial bump kernel; a sample point moves along
its face normal by ``anchor(p) * a * sum_i u_i K_i(p)``. The three
mechanisms differ only in kernel width and in how much the controls are
smeared across neighbouring cells before use, which orders their coupling
thermal < ionic < pneumatic. Everything is linear in the control vector.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .cloud_io import write_pcd1
from .pointcloud import PointCloud

MECHANISMS = ("thermal", "ionic", "pneumatic")
TOPOLOGIES = ("plate", "cube")
CELLS_PER_SIDE = 6
BODY_SIZE = 6.0  # one unit per actuator cell
MANIFEST_FORMAT = "smnet-manifest/1"

# cube faces in export order: (name, outward normal, in-plane u axis, in-plane v axis)
CUBE_FACES = (
    ("top", (0, 0, 1), (1, 0, 0), (0, 1, 0)),
    ("bottom", (0, 0, -1), (1, 0, 0), (0, 1, 0)),
    ("+x", (1, 0, 0), (0, 1, 0), (0, 0, 1)),
    ("-x", (-1, 0, 0), (0, 1, 0), (0, 0, 1)),
    ("+y", (0, 1, 0), (1, 0, 0), (0, 0, 1)),
    ("-y", (0, -1, 0), (1, 0, 0), (0, 0, 1)),
)
PLATE_FACE = ("plate", (0, 0, 1), (1, 0, 0), (0, 1, 0))


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class ActuatorLayout:
    """Actuator cells on the undeformed surface and their control indices."""

    topology: str
    shared_cells: bool
    face_names: tuple
    face_normals: np.ndarray     # (F, 3)
    face_axes: np.ndarray        # (F, 2, 3) in-plane unit axes
    cell_centers: np.ndarray     # (F*36, 3)
    cell_face: np.ndarray        # (F*36,) face index of each cell
    control_index: np.ndarray    # (F*36,) control driving each cell
    control_positions: np.ndarray  # (control_dim, 3)
    half_size: float = BODY_SIZE / 2

    @property
    def control_dim(self) -> int:
        return len(self.control_positions)

    @property
    def n_faces(self) -> int:
        return len(self.face_names)

    def describe(self) -> dict:
        return {"topology": self.topology, "shared_cells": self.shared_cells,
                "control_dim": self.control_dim, "faces": list(self.face_names),
                "cells_per_side": CELLS_PER_SIDE, "body_size": BODY_SIZE}


def default_shared_cells(mechanism: str, topology: str) -> bool:
    """Ionic cubes drive every face cell separately (216); thermal and pneumatic cubes share edge voxels (152)."""
    return topology == "cube" and mechanism != "ionic"


def make_layout(topology: str = "plate", shared_cells: Optional[bool] = None) -> ActuatorLayout:
    """Build the 6x6 plate (36 controls) or the cube (216 per-face / 152 shared, the default)."""
    if topology not in TOPOLOGIES:
        raise SimulationError(f"unknown topology {topology!r}")
    faces = (PLATE_FACE,) if topology == "plate" else CUBE_FACES
    h = BODY_SIZE / 2
    offs = np.arange(CELLS_PER_SIDE) - (CELLS_PER_SIDE - 1) / 2
    centers, cell_face = [], []
    normals = np.array([f[1] for f in faces], dtype=float)
    axes = np.array([[f[2], f[3]] for f in faces], dtype=float)
    plane = 0.0 if topology == "plate" else h
    for fi in range(len(faces)):
        n, (eu, ev) = normals[fi], axes[fi]
        for a in offs:
            for b in offs:
                centers.append(plane * n + a * eu + b * ev)
                cell_face.append(fi)
    centers = np.array(centers)
    cell_face = np.array(cell_face)
    if topology == "plate":
        shared_cells = False
    elif shared_cells is None:
        shared_cells = True
    if shared_cells:
        # a surface unit cube behind the face cell; edge/corner cubes are shared by faces
        voxels = np.floor(centers - 0.5 * normals[cell_face] + h).astype(int)
        uniq, control_index = np.unique(voxels, axis=0, return_inverse=True)
        control_index = control_index.reshape(-1)
        positions = uniq + 0.5 - h
    else:
        control_index = np.arange(len(centers))
        positions = centers.copy()
    return ActuatorLayout(topology, bool(shared_cells), tuple(f[0] for f in faces), normals, axes,
                          centers, cell_face, control_index, positions)


def default_anchor(mechanism: str, topology: str) -> str:
    """Boundary rule per mechanism: thermal and the ionic plate hold the centre,
    the ionic and pneumatic cubes hold the eight vertices."""
    if mechanism == "thermal" or (mechanism == "ionic" and topology == "plate"):
        return "center-fixed"
    return "corners-fixed"


@dataclass(frozen=True)
class SurrogateSpec:
    mechanism: str = "thermal"
    amplitude: float = 0.15 * BODY_SIZE
    influence_radius: float = 0.5
    coupling_width: float = 1.0
    anchor: str = "center-fixed"
    anchor_width: float = 0.5
    density: int = 24

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise SimulationError(f"unknown mechanism {self.mechanism!r}")
        if self.anchor not in ("corners-fixed", "center-fixed"):
            raise SimulationError(f"unknown anchor rule {self.anchor!r}")
        if not (self.amplitude > 0 and self.influence_radius > 0 and self.coupling_width > 0):
            raise SimulationError("amplitude, influence_radius and coupling_width must be positive")
        if self.density < 1:
            raise SimulationError("density must be >= 1")

    @classmethod
    def for_mechanism(cls, mechanism: str, topology: str = "plate", **kw) -> "SurrogateSpec":
        kw.setdefault("anchor", default_anchor(mechanism, topology))
        return cls(mechanism=mechanism, **kw)

    @property
    def kernel_radius(self) -> float:
        return {"thermal": 1.0, "ionic": 1.5, "pneumatic": 2.0}[self.mechanism] * self.influence_radius

    def to_dict(self) -> dict:
        return asdict(self)


def spec_hash(spec: SurrogateSpec, layout: ActuatorLayout) -> str:
    blob = json.dumps({"spec": spec.to_dict(), "layout": layout.describe()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def anchor_points(spec: SurrogateSpec, layout: ActuatorLayout) -> np.ndarray:
    h = layout.half_size
    if spec.anchor == "center-fixed":
        return np.zeros((1, 3))
    if layout.topology == "plate":
        return np.array([[sx * h, sy * h, 0.0] for sx in (-1, 1) for sy in (-1, 1)])
    return np.array([[sx * h, sy * h, sz * h] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])


def anchor_weight(points: np.ndarray, spec: SurrogateSpec, layout: ActuatorLayout) -> np.ndarray:
    """0 exactly at anchor points, rising smoothly to 1 away from them."""
    anchors = anchor_points(spec, layout)
    d2 = ((points[:, None, :] - anchors[None]) ** 2).sum(-1).min(axis=1)
    return -np.expm1(-d2 / (2 * spec.anchor_width ** 2))


def smoothing_matrix(spec: SurrogateSpec, layout: ActuatorLayout) -> np.ndarray:
    """Row-normalized neighbour averaging over control positions (identity unless pneumatic)."""
    c = layout.control_dim
    if spec.mechanism != "pneumatic":
        return np.eye(c)
    pos = layout.control_positions
    d2 = ((pos[:, None, :] - pos[None]) ** 2).sum(-1)
    w = np.exp(-d2 / (2 * spec.coupling_width ** 2))
    w[d2 > (2 * spec.coupling_width) ** 2] = 0.0
    return w / w.sum(axis=1, keepdims=True)


def _bump(r: np.ndarray, radius: float, signed: bool) -> np.ndarray:
    t = r / radius
    k = np.where(t < 1, 0.5 * (1 + np.cos(np.pi * np.minimum(t, 1))), 0.0)
    if signed:
        # bending profile: lifts the centre, pulls the rim the other way
        k = k * (1 - 2 * t * t)
    return k


def sample_surface(layout: ActuatorLayout, density: int, rng: np.random.Generator,
                   spec: Optional[SurrogateSpec] = None) -> tuple[np.ndarray, np.ndarray]:
    """Jittered ``density x density`` samples per face, plus on-surface anchor points.

    Returns (points, face index per point).
    """
    h = layout.half_size
    step = 2 * h / density
    grid = (np.arange(density) * step - h)
    pts, faces = [], []
    plane = 0.0 if layout.topology == "plate" else h
    for fi in range(layout.n_faces):
        n, (eu, ev) = layout.face_normals[fi], layout.face_axes[fi]
        ju = rng.uniform(0, step, size=(density, density))
        jv = rng.uniform(0, step, size=(density, density))
        uu = grid[:, None] + ju
        vv = grid[None, :] + jv
        p = plane * n + uu.reshape(-1, 1) * eu + vv.reshape(-1, 1) * ev
        pts.append(p)
        faces.append(np.full(len(p), fi))
    if spec is not None:
        anchors = anchor_points(spec, layout)
        on_surface = np.abs(np.abs(anchors).max(axis=1) - plane) < 1e-12 if layout.topology == "cube" \
            else np.abs(anchors[:, 2]) < 1e-12
        for a in anchors[on_surface]:
            # attribute the anchor to the first face it lies on
            fi = int(np.flatnonzero(np.abs(layout.face_normals @ a - plane) < 1e-12)[0])
            pts.append(a[None])
            faces.append(np.array([fi]))
    return np.concatenate(pts), np.concatenate(faces)


def response_matrix(spec: SurrogateSpec, layout: ActuatorLayout, points: np.ndarray,
                    faces: np.ndarray) -> np.ndarray:
    """(n_points, control_dim) map from controls to normal displacement; the surrogate is linear."""
    d = np.sqrt(((points[:, None, :] - layout.cell_centers[None]) ** 2).sum(-1))
    k = _bump(d, spec.kernel_radius, signed=spec.mechanism == "ionic")
    # cells only act on their own face, except for the strongly coupled mechanism
    if spec.mechanism != "pneumatic":
        k = k * (faces[:, None] == layout.cell_face[None])
    k /= np.maximum(1.0, np.abs(k).sum(axis=1))[:, None]
    cell_from_control = smoothing_matrix(spec, layout)[layout.control_index]
    scale = spec.amplitude * anchor_weight(points, spec, layout)
    return scale[:, None] * (k @ cell_from_control)


def displacement_field(control: np.ndarray, spec: SurrogateSpec, layout: ActuatorLayout,
                       points: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Signed normal displacement of every sample point."""
    return response_matrix(spec, layout, points, faces) @ control


def surface_coordinates(points: np.ndarray, layout: ActuatorLayout) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split deformed surface points into (reference points, face index, normal displacement).

    Every point is attributed to the face whose outward coordinate is largest;
    points displaced past a cube edge may be misattributed.
    """
    pts = np.asarray(points, dtype=np.float64)
    if layout.topology == "plate":
        faces = np.zeros(len(pts), dtype=int)
        disp = pts[:, 2].copy()
    else:
        h = layout.half_size
        faces = np.argmax(pts @ layout.face_normals.T, axis=1)
        disp = (pts * layout.face_normals[faces]).sum(axis=1) - h
    ref = pts - disp[:, None] * layout.face_normals[faces]
    return ref, faces, disp


def least_squares_control(points: np.ndarray, spec: SurrogateSpec, layout: ActuatorLayout,
                          rcond: Optional[float] = None) -> np.ndarray:
    """Control that best explains a deformed cloud given in simulator coordinates.

    Exploits linearity: displacement = R(reference) @ control, solved by least squares.
    """
    ref, faces, disp = surface_coordinates(points, layout)
    basis = response_matrix(spec, layout, ref, faces)
    return np.linalg.lstsq(basis, disp, rcond=rcond)[0]


def _check_control(control, layout: ActuatorLayout) -> np.ndarray:
    u = np.asarray(control, dtype=np.float64).reshape(-1)
    if len(u) != layout.control_dim:
        raise SimulationError(f"control has {len(u)} entries, layout needs {layout.control_dim}")
    bad = np.flatnonzero(~((u >= -1) & (u <= 1)))
    if len(bad):
        raise SimulationError(f"control[{bad[0]}] = {u[bad[0]]} outside [-1, 1]")
    return u


def simulate(control, spec: SurrogateSpec, layout: ActuatorLayout, density: Optional[int] = None,
             seed: int = 0) -> PointCloud:
    """Deformed surface cloud for ``control``; reference_points hold the undeformed samples."""
    u = _check_control(control, layout)
    density = spec.density if density is None else density
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    ref, faces = sample_surface(layout, density, rng, spec)
    disp = displacement_field(u, spec, layout, ref, faces)
    pts = ref + disp[:, None] * layout.face_normals[faces]
    return PointCloud(pts, ref)


def sample_faces(layout: ActuatorLayout, density: int, seed: int, spec: SurrogateSpec) -> np.ndarray:
    """Face index of each sample simulate() produces for this seed."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    return sample_surface(layout, density, rng, spec)[1]


def linearity_probe(spec: SurrogateSpec, layout: ActuatorLayout, seed: int = 0,
                    density: int = 12) -> dict:
    """Check superposition on random controls and the stencil's row sums."""
    rng = np.random.default_rng(seed)
    u1 = rng.uniform(-0.5, 0.5, layout.control_dim)
    u2 = rng.uniform(-0.5, 0.5, layout.control_dim)
    base = simulate(np.zeros(layout.control_dim), spec, layout, density, seed).points
    a = simulate(u1, spec, layout, density, seed).points
    b = simulate(u2, spec, layout, density, seed).points
    ab = simulate(u1 + u2, spec, layout, density, seed).points
    err = float(np.abs(ab - (a + b - base)).max())
    rows = smoothing_matrix(spec, layout).sum(axis=1)
    return {"mechanism": spec.mechanism, "superposition_max_error": err,
            "superposition_ok": err <= 1e-6,
            "stencil_row_sum_min": float(rows.min()), "stencil_row_sum_max": float(rows.max()),
            "stencil_ok": bool(np.all(np.abs(rows - 1) <= 1e-9))}


# ---------------------------------------------------------------------------
# datasets


def sample_seed(master_seed: int, sample_id: int) -> int:
    digest = hashlib.sha256(f"{int(master_seed)}:{int(sample_id)}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2 ** 63 - 1)


def draw_control(seed: int, dim: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    return rng.uniform(-1.0, 1.0, dim)


def default_split(n_samples: int, n_test: Optional[int] = None) -> tuple[list, list]:
    """Last ``n_test`` ids are the test split (default 2%, at least 1 when n >= 2)."""
    if n_test is None:
        n_test = int(round(0.02 * n_samples))
        if n_samples >= 2:
            n_test = max(1, n_test)
    if not 0 <= n_test <= n_samples:
        raise SimulationError(f"n_test={n_test} invalid for {n_samples} samples")
    ids = list(range(n_samples))
    return ids[: n_samples - n_test], ids[n_samples - n_test:]


def generate_dataset(n_samples: int, spec: SurrogateSpec, layout: ActuatorLayout,
                     density: Optional[int], master_seed: int, out_dir, n_test: Optional[int] = None,
                     threads: Optional[int] = None) -> dict:
    """Simulate ``n_samples`` random controls and write clouds plus ``manifest.json``."""
    out = Path(out_dir)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    density = spec.density if density is None else density
    if threads is None:
        threads = int(os.environ.get("SMNET_THREADS", "1") or 1)

    def one(i: int) -> dict:
        seed = sample_seed(master_seed, i)
        u = draw_control(seed, layout.control_dim)
        rel = f"clouds/{i:06d}.pcd"
        try:
            write_pcd1(out / rel, simulate(u, spec, layout, density, seed).points)
        except OSError as exc:
            raise OSError(f"sample {i}: {exc}") from exc
        return {"id": i, "seed": seed, "control": u.tolist(), "file": rel}

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            samples = list(pool.map(one, range(n_samples)))
    else:
        samples = [one(i) for i in range(n_samples)]
    train, test = default_split(n_samples, n_test)
    manifest = {
        "format": MANIFEST_FORMAT,
        "stage": "raw",
        "spec": spec.to_dict(),
        "spec_hash": spec_hash(spec, layout),
        "layout": layout.describe(),
        "density": density,
        "master_seed": int(master_seed),
        "control_distribution": "uniform[-1,1] per entry (assumed; FEA trial distribution unstated)",
        "samples": samples,
        "split": {"train": train, "test": test},
    }
    write_manifest(out / "manifest.json", manifest)
    return manifest


def write_manifest(path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    if manifest.get("format") != MANIFEST_FORMAT:
        raise SimulationError(f"{path}: not a {MANIFEST_FORMAT} manifest")
    ids = [s["id"] for s in manifest["samples"]]
    if len(set(ids)) != len(ids):
        raise SimulationError(f"{path}: duplicate sample ids")
    manifest["_root"] = str(path.parent)
    return manifest


def manifest_spec(manifest: dict) -> tuple[SurrogateSpec, ActuatorLayout]:
    lay = manifest["layout"]
    return SurrogateSpec(**manifest["spec"]), make_layout(lay["topology"], lay["shared_cells"])
