"""Camera model, pinhole projection, ground plane fitting and LR-flip transforms.

COORDINATE CONVENTIONS
======================
Camera frame (right-handed, standard computer vision):
  - x: right, y: down (up is -y), z: forward (depth)
  - origin at the camera optical center
Image frame:
  - u: right (pixels), v: down (pixels), origin at the top-left corner

Point clouds are given in the camera frame (no extrinsic calibration here).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# 13-joint skeleton ordering used across the whole pipeline.  The order is a
# dataset-manifest constant: loaders validate against it rather than assuming.
JOINT_NAMES = (
    "head",
    "l_shoulder", "r_shoulder",
    "l_elbow", "r_elbow",
    "l_wrist", "r_wrist",
    "l_hip", "r_hip",
    "l_knee", "r_knee",
    "l_ankle", "r_ankle",
)
NUM_JOINTS = len(JOINT_NAMES)

# Symmetric (left, right) index pairs, swapped under a left-right flip.
LR_PAIRS = ((1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12))

HEAD = 0
L_SHOULDER, R_SHOULDER = 1, 2


class BehindCameraError(ValueError):
    """Raised when a point with non-positive depth is projected."""


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera: focal lengths, principal point and image size (pixels)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside image "
                f"{self.width}x{self.height}"
            )


@dataclass(frozen=True)
class Plane:
    """Plane in point-normal form: n . (r - r0) = 0, with unit normal n."""

    n: tuple[float, float, float]
    r0: tuple[float, float, float]

    def __post_init__(self):
        norm = float(np.linalg.norm(self.n))
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"plane normal must be unit length, got |n|={norm}")

    def height_at(self, x: float, z: float) -> float:
        """Solve the plane equation for y at a given (x, z).

        Requires a normal with a nonzero y component.
        """
        nx, ny, nz = self.n
        if ny == 0.0:
            raise ValueError("plane normal has zero y component; height is undefined")
        x0, y0, z0 = self.r0
        # n . (r - r0) = 0  =>  y = y0 - (nx*(x-x0) + nz*(z-z0)) / ny
        return y0 - (nx * (x - x0) + nz * (z - z0)) / ny


def _check_joints(joints: np.ndarray, dim: int) -> np.ndarray:
    joints = np.asarray(joints, dtype=np.float64)
    if joints.shape != (NUM_JOINTS, dim):
        raise ValueError(f"expected ({NUM_JOINTS}, {dim}) joints, got {joints.shape}")
    if not np.all(np.isfinite(joints)):
        raise ValueError("joint coordinates must be finite")
    return joints


def _check_visibility(visibility) -> np.ndarray:
    if visibility is None:
        return np.ones(NUM_JOINTS, dtype=bool)
    visibility = np.asarray(visibility, dtype=bool)
    if visibility.shape != (NUM_JOINTS,):
        raise ValueError(f"expected ({NUM_JOINTS},) visibility, got {visibility.shape}")
    return visibility


class Skeleton3D:
    """13 ordered joints in meters (camera frame) with per-joint visibility."""

    __slots__ = ("joints", "visibility")

    def __init__(self, joints, visibility=None):
        self.joints = _check_joints(joints, 3)
        self.visibility = _check_visibility(visibility)

    def copy(self) -> "Skeleton3D":
        return Skeleton3D(self.joints.copy(), self.visibility.copy())


class Skeleton2D:
    """13 ordered joints in pixels with per-joint visibility."""

    __slots__ = ("joints", "visibility")

    def __init__(self, joints, visibility=None):
        self.joints = _check_joints(joints, 2)
        self.visibility = _check_visibility(visibility)

    def copy(self) -> "Skeleton2D":
        return Skeleton2D(self.joints.copy(), self.visibility.copy())


class PointCloud:
    """Set of 3D points with per-point intensity, in the camera frame."""

    __slots__ = ("xyz", "intensity")

    def __init__(self, xyz, intensity=None):
        self.xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        if intensity is None:
            intensity = np.zeros(len(self.xyz))
        self.intensity = np.asarray(intensity, dtype=np.float64).reshape(-1)
        if len(self.intensity) != len(self.xyz):
            raise ValueError(
                f"intensity length {len(self.intensity)} != point count {len(self.xyz)}"
            )

    def __len__(self) -> int:
        return len(self.xyz)


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

def project_point(cam: CameraIntrinsics, p) -> np.ndarray:
    """Project a camera-frame 3D point to pixel coordinates.

    Returns (fx*x/z + cx, fy*y/z + cy).  Raises BehindCameraError for z <= 0.
    """
    p = np.asarray(p, dtype=np.float64)
    x, y, z = p
    if z <= 0:
        raise BehindCameraError(f"point has non-positive depth z={z}")
    return np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])


def project_point_jacobian(cam: CameraIntrinsics, p) -> np.ndarray:
    """2x3 Jacobian of project_point with respect to (x, y, z).

    d(u,v)/d(x,y,z) = [[fx/z, 0,    -fx*x/z^2],
                       [0,    fy/z, -fy*y/z^2]]
    """
    x, y, z = np.asarray(p, dtype=np.float64)
    if z <= 0:
        raise BehindCameraError(f"point has non-positive depth z={z}")
    return np.array([
        [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
        [0.0, cam.fy / z, -cam.fy * y / (z * z)],
    ])


def project_skeleton(cam: CameraIntrinsics, s: Skeleton3D) -> Skeleton2D:
    """Project every joint of a 3D skeleton; visibility is copied through."""
    z = s.joints[:, 2]
    behind = np.nonzero(z <= 0)[0]
    if len(behind):
        raise BehindCameraError(
            f"joint {behind[0]} ({JOINT_NAMES[behind[0]]}) is behind the camera (z={z[behind[0]]})"
        )
    uv = np.empty((NUM_JOINTS, 2))
    uv[:, 0] = cam.fx * s.joints[:, 0] / z + cam.cx
    uv[:, 1] = cam.fy * s.joints[:, 1] / z + cam.cy
    return Skeleton2D(uv, s.visibility.copy())


# ---------------------------------------------------------------------------
# Ground plane
# ---------------------------------------------------------------------------

GROUND_NORMAL = (0.0, -1.0, 0.0)  # up is -y, so the ground normal points up


def fit_ground_plane(
    cloud: PointCloud,
    seed: int,
    iterations: int = 64,
    inlier_threshold: float = 0.05,
    offset: float = 1.8,
) -> Plane:
    """Fit a horizontal ground plane to a point cloud by consensus over heights.

    The normal is pinned to (0, -1, 0), so RANSAC degenerates to a 1-DoF
    search: candidate heights are drawn from the y coordinates of `iterations`
    randomly sampled points, the candidate with the most inliers
    (|y - h| <= inlier_threshold) wins, and the final height is the mean of
    its inliers.  `offset` is then added (positive = downward, toward the
    ground).  Deterministic for a fixed seed.

    Raises ValueError for clouds with fewer than 3 points.
    """
    if len(cloud) < 3:
        raise ValueError(f"ground plane fit needs >= 3 points, got {len(cloud)}")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    ys = cloud.xyz[:, 1]
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(ys), size=iterations)
    candidates = ys[idx]
    # Inlier counts for all candidates at once: |ys - h| <= threshold.
    counts = np.count_nonzero(
        np.abs(ys[None, :] - candidates[:, None]) <= inlier_threshold, axis=1
    )
    best = int(np.argmax(counts))  # ties: first candidate wins (deterministic)
    inliers = ys[np.abs(ys - candidates[best]) <= inlier_threshold]
    height = float(np.mean(inliers)) + offset
    return Plane(n=GROUND_NORMAL, r0=(0.0, height, 0.0))


# ---------------------------------------------------------------------------
# Left-right flips (augmentation)
# ---------------------------------------------------------------------------

def flip_pose_2d(s: Skeleton2D, image_width: float, swap_labels: bool = True) -> Skeleton2D:
    """Mirror a 2D pose horizontally: x -> w - x.

    With swap_labels (default), symmetric left/right joints exchange indices
    so the flipped labels stay anatomically consistent; swap_labels=False
    keeps the raw coordinate formula only.
    """
    joints = s.joints.copy()
    joints[:, 0] = image_width - joints[:, 0]
    visibility = s.visibility.copy()
    if swap_labels:
        joints, visibility = _swap_lr(joints, visibility)
    return Skeleton2D(joints, visibility)


def flip_pose_3d(s: Skeleton3D, swap_labels: bool = True) -> Skeleton3D:
    """Mirror a 3D pose across the x=0 plane: x -> -x."""
    joints = s.joints.copy()
    joints[:, 0] = -joints[:, 0]
    visibility = s.visibility.copy()
    if swap_labels:
        joints, visibility = _swap_lr(joints, visibility)
    return Skeleton3D(joints, visibility)


def _swap_lr(joints: np.ndarray, visibility: np.ndarray):
    for left, right in LR_PAIRS:
        joints[[left, right]] = joints[[right, left]]
        visibility[[left, right]] = visibility[[right, left]]
    return joints, visibility


def flip_cloud(cloud: PointCloud) -> PointCloud:
    """Mirror a point cloud along the x-axis; intensity and order preserved."""
    xyz = cloud.xyz.copy()
    xyz[:, 0] = -xyz[:, 0]
    return PointCloud(xyz, cloud.intensity.copy())
