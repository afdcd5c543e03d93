"""Desk-scale RGB+LiDAR fusion pipeline for absolute multi-person 3D pose estimation.

Two-stage detector: a region proposal stage over a ground-plane anchor grid
(scored from image and bird's-eye-view LiDAR features), followed by an
anchor-pose classification + per-joint regression stage.  3D outputs are
trained with 2D pose labels only, via a projection loss.
"""

__version__ = "0.1.0"

from .geometry import (
    CameraIntrinsics,
    Plane,
    PointCloud,
    Skeleton2D,
    Skeleton3D,
)

__all__ = [
    "CameraIntrinsics",
    "Plane",
    "PointCloud",
    "Skeleton2D",
    "Skeleton3D",
]
