"""The cleaning chain applied to every cloud before it reaches the network.

interior removal -> voxel average -> random downsample to N -> center/normalize
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .pointcloud import (PointCloud, PointCloudError, TransformRecord, center_and_normalize,
                         is_normalized, random_downsample, remove_interior_points,
                         voxel_average_downsample)


class InsufficientPointsError(PointCloudError):
    def __init__(self, have: int, need: int):
        super().__init__(f"only {have} points remain after cleaning but {need} are needed; "
                         f"use a smaller --n-points or a denser input")
        self.have, self.need = have, need


@dataclass(frozen=True)
class PreprocessParams:
    n_points: int
    cell_size: float
    interior_cell: Optional[float] = None   # defaults to cell_size
    align: bool = True

    def __post_init__(self):
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")

    def to_dict(self) -> dict:
        return {"n_points": self.n_points, "cell_size": self.cell_size,
                "interior_cell": self.interior_cell, "align": self.align}


IDENTITY = TransformRecord(np.zeros(3), np.eye(3), 1.0)


def clean(cloud: PointCloud, cell_size: float, interior_cell: Optional[float] = None) -> PointCloud:
    """Interior removal followed by voxel averaging."""
    cloud = remove_interior_points(cloud, interior_cell or cell_size)
    return voxel_average_downsample(cloud, cell_size)


def already_processed(cloud: PointCloud, n_points: int) -> bool:
    return len(cloud) == n_points and is_normalized(cloud.points)


def preprocess_cloud(cloud: PointCloud, params: PreprocessParams,
                     seed: int = 0) -> tuple[PointCloud, TransformRecord]:
    """Run the full chain; clouds that already went through it pass unchanged.

    The pass-through makes the chain idempotent: voxel averaging at a raw
    cell size would otherwise collapse an already-normalized cloud.
    """
    if already_processed(cloud, params.n_points):
        return cloud, IDENTITY
    cleaned = clean(cloud, params.cell_size, params.interior_cell)
    if len(cleaned) < params.n_points:
        raise InsufficientPointsError(len(cleaned), params.n_points)
    sampled = random_downsample(cleaned, params.n_points, seed)
    return center_and_normalize(sampled, align=params.align)
