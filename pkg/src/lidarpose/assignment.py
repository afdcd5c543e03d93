"""Box IoU, RoI-to-ground-truth assignment and anchor matching.

Second-stage RoIs are matched to ground truth by IoU: below 0.3 against every
ground-truth box means background, otherwise the RoI takes the box with the
highest IoU.  Foreground RoIs additionally get an anchor-pose class target:
the canonical pose that, fitted into the matched ground-truth 2D box, has the
smallest summed per-joint Euclidean distance to the ground-truth 2D pose.

First-stage anchors are labeled positive/negative with the usual two-threshold
scheme (0.5 / 0.3) and sampled into a fixed-size minibatch for the objectness
and box-regression losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchors import AnchorBox3D, AnchorPoseSet, fit_anchor_pose_to_roi, project_box_to_image
from .bev import AreaExtents, project_box_to_bev
from .geometry import CameraIntrinsics, Skeleton2D

BACKGROUND_IOU_THRESHOLD = 0.3
RPN_POSITIVE_IOU = 0.5
RPN_NEGATIVE_IOU = 0.3
RPN_BATCH_SIZE = 64


def iou_2d(a, b) -> float:
    """Intersection over union of two (x0, y0, x1, y1) boxes; 0 if union is 0."""
    ax0, ay0, ax1, ay1 = (float(v) for v in a)
    bx0, by0, bx1, by1 = (float(v) for v in b)
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        inter = 0.0
    else:
        inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_bev(a: AnchorBox3D, b: AnchorBox3D, extents: AreaExtents, resolution: float) -> float:
    """IoU of two 3D boxes' ground footprints (the vertical axis is dropped)."""
    fa = project_box_to_bev(a.corners_min, a.corners_max, extents, resolution)
    fb = project_box_to_bev(b.corners_min, b.corners_max, extents, resolution)
    return iou_2d((fa[0], fa[1], fa[2], fa[3]), (fb[0], fb[1], fb[2], fb[3]))


@dataclass(frozen=True)
class AssignmentResult:
    """Per-RoI second-stage targets.

    gt_index: matched ground-truth index, -1 for background.
    fg_mask: True where the RoI is foreground.
    class_target: 0 for background, k+1 for anchor pose k.
    max_iou: best IoU against any ground truth (0 when there is none).
    """

    gt_index: np.ndarray
    fg_mask: np.ndarray
    class_target: np.ndarray
    max_iou: np.ndarray

    def __post_init__(self):
        n = len(self.gt_index)
        if not (len(self.fg_mask) == len(self.class_target) == len(self.max_iou) == n):
            raise ValueError("assignment fields must have equal length")
        if np.any(self.class_target[~self.fg_mask] != 0):
            raise ValueError("background RoIs must have class target 0")

    @property
    def num_foreground(self) -> int:
        return int(np.sum(self.fg_mask))


def _anchor_class_for(
    poses: AnchorPoseSet, gt_box_2d, gt_pose: Skeleton2D
) -> int:
    """Anchor pose index minimizing summed joint distance after box fitting."""
    dists = np.empty(len(poses))
    for k in range(len(poses)):
        fitted = fit_anchor_pose_to_roi(poses, k, gt_box_2d)
        dists[k] = np.sum(np.linalg.norm(fitted.joints - gt_pose.joints, axis=1))
    return int(np.argmin(dists))


def assign_targets(
    rois,
    gt_boxes,
    gt_poses_2d,
    anchor_poses: AnchorPoseSet,
    mode: str = "image",
    *,
    cam: CameraIntrinsics | None = None,
    extents: AreaExtents | None = None,
    resolution: float | None = None,
) -> AssignmentResult:
    """Match RoIs to ground truth and pick per-RoI anchor-pose class targets.

    mode "image": rois and gt_boxes are (x0, y0, x1, y1) pixel boxes and IoU
    is computed in the image plane.  mode "bev": rois and gt_boxes are
    AnchorBox3D and IoU is computed between ground footprints (extents and
    resolution required); `cam` is then required to project each matched box
    to the image for pose fitting.

    A RoI whose IoU with every ground truth is below 0.3 is background.
    """
    n = len(rois)
    m = len(gt_boxes)
    gt_index = np.full(n, -1, dtype=np.int64)
    class_target = np.zeros(n, dtype=np.int64)
    max_iou = np.zeros(n, dtype=np.float64)
    if mode not in ("image", "bev"):
        raise ValueError(f"unknown assignment mode {mode!r}")
    if mode == "bev":
        if extents is None or resolution is None or cam is None:
            raise ValueError("bev mode requires extents, resolution and cam")
        gt_boxes_2d = [project_box_to_image(cam, b) for b in gt_boxes]
    else:
        gt_boxes_2d = [np.asarray(b, dtype=np.float64) for b in gt_boxes]

    if m > 0:
        for i in range(n):
            ious = np.empty(m)
            for j in range(m):
                if mode == "bev":
                    ious[j] = iou_bev(rois[i], gt_boxes[j], extents, resolution)
                else:
                    ious[j] = iou_2d(rois[i], gt_boxes[j])
            best = int(np.argmax(ious))
            max_iou[i] = ious[best]
            if ious[best] >= BACKGROUND_IOU_THRESHOLD:
                gt_index[i] = best
    fg_mask = gt_index >= 0
    for i in np.flatnonzero(fg_mask):
        j = gt_index[i]
        k = _anchor_class_for(anchor_poses, gt_boxes_2d[j], gt_poses_2d[j])
        class_target[i] = k + 1
    return AssignmentResult(gt_index, fg_mask, class_target, max_iou)


def encode_box_deltas_2d(anchor, gt) -> np.ndarray:
    """Normalized (dx, dy, dw, dh) offsets from a 2D anchor box to a target."""
    ax0, ay0, ax1, ay1 = (float(v) for v in anchor)
    gx0, gy0, gx1, gy1 = (float(v) for v in gt)
    aw, ah = ax1 - ax0, ay1 - ay0
    gw, gh = gx1 - gx0, gy1 - gy0
    if min(aw, ah, gw, gh) <= 0:
        raise ValueError("boxes must have positive extents")
    return np.array([
        ((gx0 + gx1) / 2 - (ax0 + ax1) / 2) / aw,
        ((gy0 + gy1) / 2 - (ay0 + ay1) / 2) / ah,
        np.log(gw / aw),
        np.log(gh / ah),
    ])


def decode_box_deltas_2d(anchor, deltas) -> np.ndarray:
    """Inverse of encode_box_deltas_2d; returns (x0, y0, x1, y1)."""
    ax0, ay0, ax1, ay1 = (float(v) for v in anchor)
    aw, ah = ax1 - ax0, ay1 - ay0
    cx = (ax0 + ax1) / 2 + deltas[0] * aw
    cy = (ay0 + ay1) / 2 + deltas[1] * ah
    w = aw * np.exp(deltas[2])
    h = ah * np.exp(deltas[3])
    return np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])


def encode_box_deltas_3d(anchor: AnchorBox3D, gt: AnchorBox3D) -> np.ndarray:
    """Normalized (dx, dy, dz, dw, dh, dl) offsets between 3D boxes."""
    ac, as_ = np.asarray(anchor.center), np.asarray(anchor.size)
    gc, gs = np.asarray(gt.center), np.asarray(gt.size)
    # Center offsets are normalized by the matching anchor extents (w, h, l).
    norm = np.array([as_[0], as_[1], as_[2]])
    return np.concatenate([(gc - ac) / norm, np.log(gs / as_)])


def decode_box_deltas_3d(anchor: AnchorBox3D, deltas) -> AnchorBox3D:
    """Inverse of encode_box_deltas_3d."""
    deltas = np.asarray(deltas, dtype=np.float64)
    ac, as_ = np.asarray(anchor.center), np.asarray(anchor.size)
    center = ac + deltas[:3] * as_
    size = as_ * np.exp(deltas[3:])
    return AnchorBox3D(center=tuple(center), size=tuple(size))


@dataclass(frozen=True)
class RpnAssignment:
    """Per-anchor first-stage labels.

    labels: 1 positive, 0 negative, -1 ignored (IoU between the thresholds).
    gt_index: matched ground truth for positives, -1 otherwise.
    target_deltas: encoded regression targets, zeros for non-positives.
    """

    labels: np.ndarray
    gt_index: np.ndarray
    target_deltas: np.ndarray


def assign_rpn_anchors(
    anchors,
    gt_boxes,
    mode: str = "image",
    *,
    extents: AreaExtents | None = None,
    resolution: float | None = None,
    positive_iou: float = RPN_POSITIVE_IOU,
    negative_iou: float = RPN_NEGATIVE_IOU,
) -> RpnAssignment:
    """Label anchors positive (IoU >= 0.5), negative (< 0.3) or ignored.

    The anchor with the highest IoU for each ground truth is also positive,
    so every object gets at least one match.  Works on 2D pixel boxes
    (mode "image") or AnchorBox3D footprints (mode "bev").
    """
    n = len(anchors)
    m = len(gt_boxes)
    dim = 4 if mode == "image" else 6
    labels = np.zeros(n, dtype=np.int64)
    gt_index = np.full(n, -1, dtype=np.int64)
    deltas = np.zeros((n, dim), dtype=np.float64)
    if mode not in ("image", "bev"):
        raise ValueError(f"unknown assignment mode {mode!r}")
    if m == 0:
        return RpnAssignment(labels, gt_index, deltas)

    ious = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            if mode == "bev":
                ious[i, j] = iou_bev(anchors[i], gt_boxes[j], extents, resolution)
            else:
                ious[i, j] = iou_2d(anchors[i], gt_boxes[j])
    best_gt = np.argmax(ious, axis=1)
    best_iou = ious[np.arange(n), best_gt]
    # Anchors start negative; the in-between band is ignored.
    labels[(best_iou >= negative_iou) & (best_iou < positive_iou)] = -1
    labels[best_iou >= positive_iou] = 1
    # Force a positive for each gt's best anchor (ties keep the first).
    for j in range(m):
        i = int(np.argmax(ious[:, j]))
        if ious[i, j] > 0.0:
            labels[i] = 1
            best_gt[i] = j
    pos = labels == 1
    gt_index[pos] = best_gt[pos]
    for i in np.flatnonzero(pos):
        j = best_gt[i]
        if mode == "bev":
            deltas[i] = encode_box_deltas_3d(anchors[i], gt_boxes[j])
        else:
            deltas[i] = encode_box_deltas_2d(anchors[i], gt_boxes[j])
    return RpnAssignment(labels, gt_index, deltas)


def sample_rpn_minibatch(
    assignment: RpnAssignment, rng: np.random.Generator, batch_size: int = RPN_BATCH_SIZE
) -> np.ndarray:
    """Pick a training subset: positives capped at half the batch, rest negatives.

    Returns a boolean mask over anchors.  Sampling order is deterministic for
    a given generator state.
    """
    pos_idx = np.flatnonzero(assignment.labels == 1)
    neg_idx = np.flatnonzero(assignment.labels == 0)
    n_pos = min(len(pos_idx), batch_size // 2)
    if len(pos_idx) > n_pos:
        pos_idx = rng.choice(pos_idx, size=n_pos, replace=False)
    n_neg = min(len(neg_idx), batch_size - n_pos)
    if len(neg_idx) > n_neg:
        neg_idx = rng.choice(neg_idx, size=n_neg, replace=False)
    mask = np.zeros(len(assignment.labels), dtype=bool)
    mask[pos_idx] = True
    mask[neg_idx] = True
    return mask
