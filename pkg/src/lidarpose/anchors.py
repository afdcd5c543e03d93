"""3D anchor boxes and canonical anchor poses.

The region proposal stage scores a dense lattice of axis-aligned 3D boxes
placed on the ground plane.  The pose stage classifies each kept region into
one of K = 8 canonical full-body poses (plus background) and regresses
per-joint offsets from the selected pose.

Canonical poses live in a unit frame: 2D joints (u, v) in [0, 1]^2 with v = 1
at the feet, 3D joints origin-centered with vertical extent exactly [-0.5,
+0.5] (y down).  The 2D and 3D coordinates of the shipped poses are coupled by
u = 0.5 + 2.25 * x and v = 0.5 + y so that fitting the 2D pose into a box's
image footprint agrees with projecting the fitted 3D pose, for boxes with the
default width/height aspect.  Alternate pose sets can be swapped in via the
data file (pose_id, joint_id, x, y, z, u, v).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .bev import AreaExtents
from .geometry import CameraIntrinsics, NUM_JOINTS, Plane, Skeleton2D, Skeleton3D

NUM_ANCHOR_POSES = 8

ANCHOR_POSE_NAMES = (
    "stand",
    "walk_left",
    "walk_right",
    "wide_stance",
    "arms_raised",
    "crouch",
    "lean",
    "wave",
)

# Pedestrian box template (width, height, length) in meters.
TEMPLATE_SIZE = (0.8, 1.8, 0.8)


@dataclass(frozen=True)
class AnchorBox3D:
    """Axis-aligned 3D box (no yaw): center (x, y, z), size (w, h, l) meters."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]

    def __post_init__(self):
        if len(self.center) != 3 or len(self.size) != 3:
            raise ValueError("center and size must be 3-vectors")
        if not all(np.isfinite(self.center)) or not all(np.isfinite(self.size)):
            raise ValueError("box has non-finite entries")
        if min(self.size) <= 0:
            raise ValueError(f"box size must be positive, got {self.size}")

    @property
    def corners_min(self) -> np.ndarray:
        c, s = np.asarray(self.center), np.asarray(self.size)
        return c - s / 2.0

    @property
    def corners_max(self) -> np.ndarray:
        c, s = np.asarray(self.center), np.asarray(self.size)
        return c + s / 2.0


class AnchorPoseSet:
    """Read-only set of K canonical poses in the unit frame.

    poses_3d[k] is a (J, 3) array, poses_2d[k] a (J, 2) array, both float64.
    Instances are immutable after construction and safe to share across
    threads.
    """

    def __init__(self, poses_3d: np.ndarray, poses_2d: np.ndarray):
        poses_3d = np.asarray(poses_3d, dtype=np.float64)
        poses_2d = np.asarray(poses_2d, dtype=np.float64)
        if poses_3d.shape != (NUM_ANCHOR_POSES, NUM_JOINTS, 3):
            raise ValueError(
                f"expected {NUM_ANCHOR_POSES} 3D poses of {NUM_JOINTS} joints, "
                f"got shape {poses_3d.shape}"
            )
        if poses_2d.shape != (NUM_ANCHOR_POSES, NUM_JOINTS, 2):
            raise ValueError(
                f"expected {NUM_ANCHOR_POSES} 2D poses of {NUM_JOINTS} joints, "
                f"got shape {poses_2d.shape}"
            )
        if not np.all(np.isfinite(poses_3d)) or not np.all(np.isfinite(poses_2d)):
            raise ValueError("anchor poses contain non-finite values")
        if np.any(poses_2d < 0.0) or np.any(poses_2d > 1.0):
            raise ValueError("canonical 2D poses must lie in the unit square")
        self._poses_3d = poses_3d
        self._poses_3d.flags.writeable = False
        self._poses_2d = poses_2d
        self._poses_2d.flags.writeable = False

    def __len__(self) -> int:
        return NUM_ANCHOR_POSES

    @property
    def poses_3d(self) -> np.ndarray:
        return self._poses_3d

    @property
    def poses_2d(self) -> np.ndarray:
        return self._poses_2d


def load_anchor_poses(path=None) -> AnchorPoseSet:
    """Load canonical poses from a CSV data file (default: packaged set).

    Rows are (pose_id, joint_id, x, y, z, u, v); a header row is skipped.
    Validates that exactly K * J records are present with every (pose, joint)
    pair covered once.
    """
    if path is None:
        ref = resources.files("lidarpose").joinpath("data/anchor_poses.csv")
        text = ref.read_text()
    else:
        with open(path) as f:
            text = f.read()
    poses_3d = np.full((NUM_ANCHOR_POSES, NUM_JOINTS, 3), np.nan)
    poses_2d = np.full((NUM_ANCHOR_POSES, NUM_JOINTS, 2), np.nan)
    seen = set()
    rows = list(csv.reader(text.splitlines()))
    if rows and rows[0][:2] == ["pose_id", "joint_id"]:
        rows = rows[1:]
    for row in rows:
        if not row:
            continue
        if len(row) != 7:
            raise ValueError(f"expected 7 fields per record, got {row}")
        pid, jid = int(row[0]), int(row[1])
        if not (0 <= pid < NUM_ANCHOR_POSES) or not (0 <= jid < NUM_JOINTS):
            raise ValueError(f"pose_id/joint_id out of range: ({pid}, {jid})")
        if (pid, jid) in seen:
            raise ValueError(f"duplicate record for pose {pid} joint {jid}")
        seen.add((pid, jid))
        x, y, z, u, v = (float(s) for s in row[2:])
        poses_3d[pid, jid] = (x, y, z)
        poses_2d[pid, jid] = (u, v)
    if len(seen) != NUM_ANCHOR_POSES * NUM_JOINTS:
        raise ValueError(
            f"expected {NUM_ANCHOR_POSES}x{NUM_JOINTS} records, got {len(seen)}"
        )
    return AnchorPoseSet(poses_3d, poses_2d)


def generate_anchor_grid(
    plane: Plane,
    extents: AreaExtents,
    stride: float,
    template_size: tuple[float, float, float] = TEMPLATE_SIZE,
) -> list[AnchorBox3D]:
    """Place one template-sized box at every (x, z) lattice point.

    The lattice starts at (x_min, z_min) with the given spacing and includes
    the far edge when it lands on a lattice point, so the count per axis is
    floor(extent / stride) + 1.  Each center's y is solved from the plane
    equation n . (r - r0) = 0.
    """
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    # 1e-9 slack so extents that are exact multiples of the stride keep their
    # far-edge lattice point despite float division.
    nx = int(np.floor((extents.x_max - extents.x_min) / stride + 1e-9)) + 1
    nz = int(np.floor((extents.z_max - extents.z_min) / stride + 1e-9)) + 1
    xs = extents.x_min + stride * np.arange(nx)
    zs = extents.z_min + stride * np.arange(nz)
    size = (float(template_size[0]), float(template_size[1]), float(template_size[2]))
    anchors = []
    for z in zs:
        for x in xs:
            y = plane.height_at(float(x), float(z))
            anchors.append(AnchorBox3D(center=(float(x), y, float(z)), size=size))
    return anchors


def fit_anchor_pose_to_roi(poses: AnchorPoseSet, k: int, roi) -> Skeleton2D:
    """Scale canonical 2D pose k by the roi size, anchored at its top-left.

    roi is (x0, y0, x1, y1) in pixels.  Canonical v = 1 maps to y1, so the
    lowest joints land on the roi's bottom edge.
    """
    x0, y0, x1, y1 = (float(c) for c in roi)
    if not np.isfinite([x0, y0, x1, y1]).all():
        raise ValueError("roi has non-finite coordinates")
    w, h = x1 - x0, y1 - y0
    if w <= 0 or h <= 0:
        raise ValueError(f"degenerate roi {roi}: width and height must be positive")
    canon = poses.poses_2d[k]
    joints = np.empty_like(canon)
    joints[:, 0] = x0 + canon[:, 0] * w
    joints[:, 1] = y0 + canon[:, 1] * h
    return Skeleton2D(joints)


def fit_anchor_pose_3d(poses: AnchorPoseSet, k: int, box: AnchorBox3D) -> Skeleton3D:
    """Scale canonical 3D pose k to the box height and center it in the box.

    The canonical vertical extent is [-0.5, +0.5], so the scaled pose spans
    exactly the box height with the lowest joints on the bottom face.
    """
    canon = poses.poses_3d[k]
    center = np.asarray(box.center, dtype=np.float64)
    return Skeleton3D(center[None, :] + box.size[1] * canon)


def project_box_to_image(cam: CameraIntrinsics, box: AnchorBox3D) -> np.ndarray:
    """Image footprint (x0, y0, x1, y1) of the box's central cross-section.

    Projects the front-parallel rectangle through the box center: corners
    (cx +- w/2, cy +- h/2) at depth cz.  Raises if the box center is not in
    front of the camera.
    """
    cx, cy, cz = box.center
    w, h, _ = box.size
    if cz <= 0:
        raise ValueError(f"box center depth must be positive, got {cz}")
    x0 = cam.fx * (cx - w / 2.0) / cz + cam.cx
    x1 = cam.fx * (cx + w / 2.0) / cz + cam.cx
    y0 = cam.fy * (cy - h / 2.0) / cz + cam.cy
    y1 = cam.fy * (cy + h / 2.0) / cz + cam.cy
    return np.array([x0, y0, x1, y1])
