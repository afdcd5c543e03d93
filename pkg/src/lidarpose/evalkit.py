"""Pose-proposal integration and the metric suite.

Overlapping detections are greedily grouped by descending best-class score
and averaged into final poses.  Predictions are matched to ground truth per
scene (greedy by confidence, IoU of the 2D pose bounding boxes), then four
metrics summarize quality: 2D MPJPE in pixels, PCKh@0.5, and the two halves
of the absolute 3D localization error, CDE (depth) and XYE (orthogonal).
CDE and XYE decompose the center error exactly: cde^2 + xye^2 equals the
squared 3D center distance.

The 13-joint skeleton has no neck, so the PCKh head segment is the distance
from the head joint to the shoulder midpoint; ground truths with a zero head
segment are skipped and counted.

File formats are comma-separated text with 6-decimal fixed-point values so
golden-file comparisons are stable: one record per final pose, and one
(metric, value, count) row per aggregate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchors import AnchorBox3D
from .assignment import iou_2d
from .geometry import HEAD, L_SHOULDER, R_SHOULDER, NUM_JOINTS, Skeleton2D, Skeleton3D

DEFAULT_INTEGRATION_IOU = 0.5
DEFAULT_SCORE_FLOOR = 0.1
MATCH_IOU = 0.3
PCKH_ALPHA = 0.5


@dataclass(frozen=True)
class FinalPose:
    """One integrated prediction; confidence is the group's score mass, capped at 1."""

    pose_2d: Skeleton2D
    pose_3d: Skeleton3D
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")


@dataclass(frozen=True)
class MetricReport:
    """Aggregate metrics plus the sample counts behind them.

    mpjpe_2d, cde and xye are matched-only means; pckh counts unmatched
    ground-truth joints as incorrect.  n_skipped_head counts ground truths
    excluded from PCKh for having a zero-length head segment.
    """

    mpjpe_2d: float
    pckh: float
    cde: float
    xye: float
    n_gt: int
    n_pred: int
    n_matched: int
    n_skipped_head: int

    def __post_init__(self):
        for name in ("mpjpe_2d", "pckh", "cde", "xye"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if self.pckh > 1.0:
            raise ValueError(f"pckh must be <= 1, got {self.pckh}")


def pose_bbox_2d(joints2d: np.ndarray) -> np.ndarray:
    lo = np.min(joints2d, axis=0)
    hi = np.max(joints2d, axis=0)
    return np.array([lo[0], lo[1], hi[0], hi[1]])


def integrate_proposals(
    detections,
    iou_threshold: float = DEFAULT_INTEGRATION_IOU,
    score_floor: float = DEFAULT_SCORE_FLOOR,
) -> list[FinalPose]:
    """Group overlapping detections and average each group into a final pose.

    Detections are visited by descending best-class score (ties keep input
    order); one joins the first existing group whose leader box overlaps it
    with IoU >= iou_threshold, else starts a group.  The group pose is the
    score-weighted mean of member poses (2D and 3D separately); confidence
    is the summed score mass capped at 1.  Groups whose mass is below
    score_floor are dropped.
    """
    if not detections:
        return []
    scores = np.array([d.best_score for d in detections])
    order = np.argsort(-scores, kind="stable")
    leaders: list[int] = []
    members: list[list[int]] = []
    for i in order:
        box = detections[i].box_2d
        for g, lead in enumerate(leaders):
            if iou_2d(box, detections[lead].box_2d) >= iou_threshold:
                members[g].append(int(i))
                break
        else:
            leaders.append(int(i))
            members.append([int(i)])
    finals = []
    for group in members:
        mass = float(np.sum(scores[group]))
        if mass < score_floor:
            continue
        w = scores[group] / mass
        p2 = np.zeros((NUM_JOINTS, 2))
        p3 = np.zeros((NUM_JOINTS, 3))
        for weight, i in zip(w, group):
            p2 += weight * detections[i].best_pose_2d
            p3 += weight * detections[i].best_pose_3d
        finals.append(
            FinalPose(
                pose_2d=Skeleton2D(p2),
                pose_3d=Skeleton3D(p3),
                confidence=min(mass, 1.0),
            )
        )
    return finals


def match_predictions(predictions: list[FinalPose], gt_skels_2d, iou_threshold: float = MATCH_IOU):
    """Greedy matching by descending confidence on 2D pose-bbox IoU.

    Returns (pairs, unmatched_pred, unmatched_gt) with pairs as (pred index,
    gt index) tuples.  Each ground truth is used at most once.
    """
    pred_boxes = [pose_bbox_2d(p.pose_2d.joints) for p in predictions]
    gt_boxes = [pose_bbox_2d(g.joints) for g in gt_skels_2d]
    order = np.argsort(-np.array([p.confidence for p in predictions]), kind="stable")
    taken = np.zeros(len(gt_boxes), dtype=bool)
    pairs = []
    for i in order:
        best_j, best_iou = -1, 0.0
        for j in range(len(gt_boxes)):
            if taken[j]:
                continue
            v = iou_2d(pred_boxes[i], gt_boxes[j])
            if v > best_iou:
                best_j, best_iou = j, v
        if best_j >= 0 and best_iou >= iou_threshold:
            taken[best_j] = True
            pairs.append((int(i), best_j))
    unmatched_pred = [i for i in range(len(predictions)) if i not in {p for p, _ in pairs}]
    unmatched_gt = [j for j in range(len(gt_boxes)) if not taken[j]]
    return pairs, unmatched_pred, unmatched_gt


def mpjpe_2d(pred_joints: np.ndarray, gt_joints: np.ndarray, visibility=None) -> float:
    """Mean Euclidean error over visible joints of one matched pair."""
    err = np.linalg.norm(pred_joints - gt_joints, axis=-1)
    if visibility is not None:
        vis = np.asarray(visibility, dtype=bool)
        if not np.any(vis):
            return 0.0
        err = err[vis]
    return float(np.mean(err))


def head_segment_length(gt_joints2d: np.ndarray) -> float:
    mid = (gt_joints2d[L_SHOULDER] + gt_joints2d[R_SHOULDER]) / 2.0
    return float(np.linalg.norm(gt_joints2d[HEAD] - mid))


def _pred_box_center_3d(pose3d: np.ndarray) -> np.ndarray:
    return (np.min(pose3d, axis=0) + np.max(pose3d, axis=0)) / 2.0


def cde(pred_pose_3d: np.ndarray, gt_box_3d: AnchorBox3D) -> float:
    """Depth error: |z| distance between pose-AABB center and gt box center."""
    return float(abs(_pred_box_center_3d(pred_pose_3d)[2] - gt_box_3d.center[2]))


def xye(pred_pose_3d: np.ndarray, gt_box_3d: AnchorBox3D) -> float:
    """Depth-orthogonal error: (x, y) center distance of the same boxes."""
    c = _pred_box_center_3d(pred_pose_3d)
    dx = c[0] - gt_box_3d.center[0]
    dy = c[1] - gt_box_3d.center[1]
    return float(np.sqrt(dx * dx + dy * dy))


def compute_metrics(per_scene, alpha: float = PCKH_ALPHA) -> MetricReport:
    """Aggregate metrics over (predictions, gt_instances) pairs, one per scene.

    gt instances need skel_2d (with visibility), skel_3d and box_3d fields.
    Sums accumulate in scene order, so the result is bitwise reproducible.
    """
    err_sum, err_n = 0.0, 0
    pckh_correct, pckh_total = 0, 0
    cde_sum, xye_sum = 0.0, 0.0
    n_gt = n_pred = n_matched = n_skipped = 0
    for predictions, gts in per_scene:
        n_gt += len(gts)
        n_pred += len(predictions)
        pairs, _, unmatched_gt = match_predictions(predictions, [g.skel_2d for g in gts])
        n_matched += len(pairs)
        for i, j in pairs:
            pred = predictions[i]
            gt = gts[j]
            vis = gt.skel_2d.visibility > 0
            d = np.linalg.norm(pred.pose_2d.joints - gt.skel_2d.joints, axis=-1)
            err_sum += float(np.sum(d[vis]))
            err_n += int(np.sum(vis))
            seg = head_segment_length(gt.skel_2d.joints)
            if seg <= 0.0:
                n_skipped += 1
            else:
                pckh_correct += int(np.sum(d[vis] < alpha * seg))
                pckh_total += int(np.sum(vis))
            cde_sum += cde(pred.pose_3d.joints, gt.box_3d)
            xye_sum += xye(pred.pose_3d.joints, gt.box_3d)
        for j in unmatched_gt:
            gt = gts[j]
            seg = head_segment_length(gt.skel_2d.joints)
            if seg <= 0.0:
                n_skipped += 1
            else:
                pckh_total += int(np.sum(gt.skel_2d.visibility > 0))
    return MetricReport(
        mpjpe_2d=err_sum / err_n if err_n else 0.0,
        pckh=pckh_correct / pckh_total if pckh_total else 0.0,
        cde=cde_sum / n_matched if n_matched else 0.0,
        xye=xye_sum / n_matched if n_matched else 0.0,
        n_gt=n_gt,
        n_pred=n_pred,
        n_matched=n_matched,
        n_skipped_head=n_skipped,
    )


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def prediction_header() -> str:
    cols = ["scene_id", "confidence"]
    cols += [f"{ax}{j}" for j in range(NUM_JOINTS) for ax in ("u", "v")]
    cols += [f"{ax}{j}" for j in range(NUM_JOINTS) for ax in ("x", "y", "z")]
    return ",".join(cols)


def format_prediction(scene_id: int, pose: FinalPose) -> str:
    vals = [str(scene_id), f"{pose.confidence:.6f}"]
    vals += [f"{v:.6f}" for v in pose.pose_2d.joints.reshape(-1)]
    vals += [f"{v:.6f}" for v in pose.pose_3d.joints.reshape(-1)]
    return ",".join(vals)


def write_predictions(path, scene_predictions) -> None:
    """scene_predictions: iterable of (scene_id, list[FinalPose])."""
    lines = [prediction_header()]
    for scene_id, poses in scene_predictions:
        for pose in poses:
            lines.append(format_prediction(scene_id, pose))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_report(path, report: MetricReport) -> None:
    rows = [
        ("mpjpe_2d", report.mpjpe_2d, report.n_matched),
        ("pckh", report.pckh, report.n_gt - report.n_skipped_head),
        ("cde", report.cde, report.n_matched),
        ("xye", report.xye, report.n_matched),
        ("n_gt", float(report.n_gt), report.n_gt),
        ("n_pred", float(report.n_pred), report.n_pred),
        ("n_matched", float(report.n_matched), report.n_matched),
        ("n_skipped_head", float(report.n_skipped_head), report.n_skipped_head),
    ]
    lines = ["metric,value,count"]
    lines += [f"{name},{value:.6f},{count}" for name, value, count in rows]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def format_table_row(label: str, report: MetricReport) -> str:
    """One aligned summary line: MPJPE | PCKh | CDE | XYE."""
    return (
        f"{label:24s} mpjpe2d={report.mpjpe_2d:8.3f}px  pckh={report.pckh:6.3f}  "
        f"cde={report.cde:7.3f}m  xye={report.xye:7.3f}m  "
        f"(gt={report.n_gt} pred={report.n_pred} matched={report.n_matched})"
    )
