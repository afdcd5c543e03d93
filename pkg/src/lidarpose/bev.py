"""Six-channel bird's-eye-view rasterization of LiDAR point clouds.

Channel layout (fixed so tests are bit-reproducible):
  0..3  max-height slices: the vertical slab [y_min, y_max] is split into 4
        equal bins; each channel stores, per cell, the maximum height of the
        points falling in that bin, normalized to [0, 1] within the slab
        (height above the slab bottom, i.e. (y_max - y) / (y_max - y_min),
        since up is -y).
  4     density: min(1, log(N + 1) / log(16)) for N points in the cell.
  5     max intensity, clamped to [0, 1].

Raster orientation: rows increase with z, columns increase with x.  Cells are
half-open [lo, hi) along both axes, with the last cell closed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud

NUM_CHANNELS = 6
_HEIGHT_SLICES = 4
_DENSITY_SATURATION = 16.0


@dataclass(frozen=True)
class AreaExtents:
    """Axis-aligned area of interest: x/z ground ranges plus a vertical slab."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    z_min: float
    z_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max and self.z_min < self.z_max):
            raise ValueError(f"degenerate extents: {self}")


@dataclass
class BevGrid:
    """Rasterized BEV: channels (6, H, W), H along z, W along x."""

    channels: np.ndarray
    resolution: float
    extents: AreaExtents

    @property
    def shape(self) -> tuple[int, int]:
        return self.channels.shape[1], self.channels.shape[2]


def grid_size(extents: AreaExtents, resolution: float) -> tuple[int, int]:
    """(rows, cols) of the raster covering the extents at the given resolution."""
    if resolution <= 0:
        raise ValueError(f"resolution must be positive, got {resolution}")
    rows = int(np.ceil((extents.z_max - extents.z_min) / resolution - 1e-9))
    cols = int(np.ceil((extents.x_max - extents.x_min) / resolution - 1e-9))
    return max(rows, 1), max(cols, 1)


def _cell_index(values: np.ndarray, lo: float, n: int, resolution: float) -> np.ndarray:
    idx = np.floor((values - lo) / resolution).astype(np.int64)
    # last cell is closed: points exactly at the high edge fall into it
    return np.clip(idx, 0, n - 1)


def encode_bev(cloud: PointCloud, extents: AreaExtents, resolution: float) -> BevGrid:
    """Rasterize a point cloud into the six-channel BEV grid.

    Points outside the extents (including the vertical slab) are discarded.
    An empty cloud yields an all-zero grid.
    """
    rows, cols = grid_size(extents, resolution)
    channels = np.zeros((NUM_CHANNELS, rows, cols))
    if len(cloud) == 0:
        return BevGrid(channels, resolution, extents)

    xyz = cloud.xyz
    keep = (
        (xyz[:, 0] >= extents.x_min) & (xyz[:, 0] <= extents.x_max)
        & (xyz[:, 1] >= extents.y_min) & (xyz[:, 1] <= extents.y_max)
        & (xyz[:, 2] >= extents.z_min) & (xyz[:, 2] <= extents.z_max)
    )
    xyz = xyz[keep]
    intensity = np.clip(cloud.intensity[keep], 0.0, 1.0)
    if len(xyz) == 0:
        return BevGrid(channels, resolution, extents)

    col = _cell_index(xyz[:, 0], extents.x_min, cols, resolution)
    row = _cell_index(xyz[:, 2], extents.z_min, rows, resolution)
    flat = row * cols + col

    slab = extents.y_max - extents.y_min
    height = (extents.y_max - xyz[:, 1]) / slab  # in [0, 1], up is -y
    slice_idx = np.clip((height * _HEIGHT_SLICES).astype(np.int64), 0, _HEIGHT_SLICES - 1)

    for s in range(_HEIGHT_SLICES):
        mask = slice_idx == s
        if np.any(mask):
            plane = channels[s].reshape(-1)
            np.maximum.at(plane, flat[mask], height[mask])

    counts = np.bincount(flat, minlength=rows * cols).reshape(rows, cols)
    channels[4] = np.minimum(1.0, np.log(counts + 1.0) / np.log(_DENSITY_SATURATION))

    inten_plane = channels[5].reshape(-1)
    np.maximum.at(inten_plane, flat, intensity)
    return BevGrid(channels, resolution, extents)


def project_box_to_bev(
    box_min: np.ndarray, box_max: np.ndarray, extents: AreaExtents, resolution: float
) -> np.ndarray:
    """Drop the vertical axis of a 3D axis-aligned box and map to raster coords.

    box_min/box_max are (x, y, z) corners.  Returns (col0, row0, col1, row1)
    in continuous BEV pixel coordinates.  Raises ValueError if the box's
    ground footprint lies fully outside the extents.
    """
    box_min = np.asarray(box_min, dtype=np.float64)
    box_max = np.asarray(box_max, dtype=np.float64)
    if box_max[0] < extents.x_min or box_min[0] > extents.x_max \
            or box_max[2] < extents.z_min or box_min[2] > extents.z_max:
        raise ValueError("box footprint fully outside BEV extents")
    c0 = (box_min[0] - extents.x_min) / resolution
    c1 = (box_max[0] - extents.x_min) / resolution
    r0 = (box_min[2] - extents.z_min) / resolution
    r1 = (box_max[2] - extents.z_min) / resolution
    return np.array([c0, r0, c1, r1])
