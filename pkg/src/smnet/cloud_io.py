"""Readers and writers for ASCII XYZ, ASCII PLY 1.0 and the binary PCD1 format.

PCD1: ``b"PCD1"``, point count as little-endian uint64, then that many
little-endian float32 (x, y, z) triples.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

from .pointcloud import PointCloud

PCD_MAGIC = b"PCD1"
PathLike = Union[str, Path]


class CloudFormatError(ValueError):
    pass


def write_pcd1(path: PathLike, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype="<f4").reshape(-1, 3)
    Path(path).write_bytes(PCD_MAGIC + struct.pack("<Q", len(pts)) + pts.tobytes())


def read_pcd1(path: PathLike) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != PCD_MAGIC:
        raise CloudFormatError(f"{path}: missing PCD1 magic")
    (n,) = struct.unpack_from("<Q", blob, 4)
    if len(blob) != 12 + 12 * n:
        raise CloudFormatError(f"{path}: expected {n} points, file size is {len(blob)} bytes")
    return np.frombuffer(blob, dtype="<f4", offset=12).reshape(n, 3).astype(np.float64)


def write_xyz(path: PathLike, points: np.ndarray) -> None:
    np.savetxt(path, np.asarray(points).reshape(-1, 3), fmt="%.9g")


def read_xyz(path: PathLike) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.replace(",", " ").split()
            if len(parts) < 3:
                raise CloudFormatError(f"{path}:{lineno}: expected 'x y z'")
            try:
                rows.append([float(v) for v in parts[:3]])
            except ValueError as exc:
                raise CloudFormatError(f"{path}:{lineno}: {exc}") from None
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


def write_ply(path: PathLike, points: np.ndarray) -> None:
    pts = np.asarray(points).reshape(-1, 3)
    header = ("ply\nformat ascii 1.0\n"
              f"element vertex {len(pts)}\n"
              "property float x\nproperty float y\nproperty float z\nend_header\n")
    with open(path, "w") as fh:
        fh.write(header)
        np.savetxt(fh, pts, fmt="%.9g")


def read_ply(path: PathLike) -> np.ndarray:
    """ASCII PLY reader; extra vertex properties and other elements are ignored."""
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise CloudFormatError(f"{path}: not a PLY file")
        elements = []  # (name, count, [property names])
        fmt = None
        for line in fh:
            tok = line.split()
            if not tok or tok[0] in ("comment", "obj_info"):
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                elements.append((tok[1], int(tok[2]), []))
            elif tok[0] == "property":
                if not elements:
                    raise CloudFormatError(f"{path}: property before element")
                elements[-1][2].append(tok[-1])
            elif tok[0] == "end_header":
                break
        else:
            raise CloudFormatError(f"{path}: missing end_header")
        if fmt != "ascii":
            raise CloudFormatError(f"{path}: only ASCII PLY is supported (format {fmt})")
        points = None
        for name, count, props in elements:
            lines = [fh.readline() for _ in range(count)]
            if name != "vertex":
                continue
            try:
                cols = [props.index(c) for c in ("x", "y", "z")]
            except ValueError:
                raise CloudFormatError(f"{path}: vertex element lacks x/y/z") from None
            data = np.array([ln.split() for ln in lines], dtype=np.float64).reshape(count, len(props))
            points = data[:, cols]
        if points is None:
            raise CloudFormatError(f"{path}: no vertex element")
        return points


def read_cloud(path: PathLike) -> PointCloud:
    """Read any supported format, sniffing PCD1 by magic and the rest by suffix."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"point cloud file not found: {path}")
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == PCD_MAGIC:
        pts = read_pcd1(path)
    elif head[:3] == b"ply":
        pts = read_ply(path)
    else:
        pts = read_xyz(path)
    return PointCloud(pts)


def write_cloud(path: PathLike, points: np.ndarray) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        write_ply(path, points)
    elif suffix in (".xyz", ".txt"):
        write_xyz(path, points)
    else:
        write_pcd1(path, points)
