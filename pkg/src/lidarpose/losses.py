"""Training losses with analytic gradients.

The total objective is an unweighted sum of four parts: first-stage
objectness + box regression, anchor-pose classification, 2D pose regression,
and 3D pose regression.  There is no 3D ground truth anywhere: the 3D term
projects predicted joints through the camera and compares against the same 2D
labels, so gradients reach 3D coordinates only through the projection
Jacobian.  Consequence: sliding a predicted pose along its projection rays
leaves the loss unchanged, which is exactly the depth ambiguity the LiDAR
stream exists to resolve.

Every loss returns (value, gradient(s)) as plain numpy so finite-difference
checks stay trivial; the network layer wires them into its tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import BehindCameraError, CameraIntrinsics

SMOOTH_L1_BETA = 1.0


def smooth_l1(x, beta: float = SMOOTH_L1_BETA):
    """Elementwise smooth L1: 0.5 x^2 / beta inside |x| < beta, |x| - beta/2 outside."""
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    return np.where(ax < beta, 0.5 * x * x / beta, ax - 0.5 * beta)


def smooth_l1_grad(x, beta: float = SMOOTH_L1_BETA):
    """Derivative of smooth_l1; lies in [-1, 1] (x/beta inside, sign(x) outside)."""
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.abs(x) < beta, x / beta, np.sign(x))


def loss_2d(pred, targets, fg_mask, beta: float = SMOOTH_L1_BETA):
    """Foreground-averaged smooth L1 between 2D poses.

    pred, targets: (N, J, 2); fg_mask: (N,).  Each RoI contributes the mean
    over its J*2 coordinates; the total is the mean over foreground RoIs.
    Returns (value, grad wrt pred); both are zero when nothing is foreground.
    """
    pred = np.asarray(pred, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    fg_mask = np.asarray(fg_mask, dtype=bool)
    grad = np.zeros_like(pred)
    n_fg = int(np.sum(fg_mask))
    if n_fg == 0:
        return 0.0, grad
    diff = pred[fg_mask] - targets[fg_mask]
    per_coord = smooth_l1(diff, beta)
    denom = n_fg * diff[0].size
    value = float(np.sum(per_coord) / denom)
    grad[fg_mask] = smooth_l1_grad(diff, beta) / denom
    return value, grad


def project_joints(cam: CameraIntrinsics, joints3d: np.ndarray) -> np.ndarray:
    """Pinhole-project (..., 3) points to (..., 2) pixels; z must be positive."""
    joints3d = np.asarray(joints3d, dtype=np.float64)
    z = joints3d[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("cannot project joints at non-positive depth")
    out = np.empty(joints3d.shape[:-1] + (2,))
    out[..., 0] = cam.fx * joints3d[..., 0] / z + cam.cx
    out[..., 1] = cam.fy * joints3d[..., 1] / z + cam.cy
    return out


def loss_3d(pred3d, targets_2d, cam: CameraIntrinsics, fg_mask, beta: float = SMOOTH_L1_BETA):
    """Weakly supervised 3D loss: project predictions, smooth L1 against 2D labels.

    pred3d: (N, J, 3); targets_2d: (N, J, 2).  The backward pass chains the
    per-coordinate smooth-L1 gradient through the 2x3 projection Jacobian.
    Raises BehindCameraError if any foreground joint has non-positive depth.
    """
    pred3d = np.asarray(pred3d, dtype=np.float64)
    targets_2d = np.asarray(targets_2d, dtype=np.float64)
    fg_mask = np.asarray(fg_mask, dtype=bool)
    grad = np.zeros_like(pred3d)
    n_fg = int(np.sum(fg_mask))
    if n_fg == 0:
        return 0.0, grad
    fg = pred3d[fg_mask]
    proj = project_joints(cam, fg)
    diff = proj - targets_2d[fg_mask]
    denom = n_fg * diff[0].size
    value = float(np.sum(smooth_l1(diff, beta)) / denom)
    g2d = smooth_l1_grad(diff, beta) / denom
    x, y, z = fg[..., 0], fg[..., 1], fg[..., 2]
    gu, gv = g2d[..., 0], g2d[..., 1]
    g3d = np.empty_like(fg)
    g3d[..., 0] = cam.fx / z * gu
    g3d[..., 1] = cam.fy / z * gv
    g3d[..., 2] = -(cam.fx * x * gu + cam.fy * y * gv) / (z * z)
    grad[fg_mask] = g3d
    return value, grad


def loss_cls(scores, class_targets):
    """Mean softmax cross-entropy over all RoIs; class 0 is background.

    scores: (N, K+1) logits; class_targets: (N,) ints in [0, K].
    Returns (value, grad wrt scores).
    """
    scores = np.asarray(scores, dtype=np.float64)
    class_targets = np.asarray(class_targets, dtype=np.int64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("classification logits must be finite")
    n = scores.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(scores)
    shifted = scores - np.max(scores, axis=1, keepdims=True)
    exp = np.exp(shifted)
    softmax = exp / np.sum(exp, axis=1, keepdims=True)
    log_probs = shifted - np.log(np.sum(exp, axis=1, keepdims=True))
    value = float(-np.sum(log_probs[np.arange(n), class_targets]) / n)
    grad = softmax.copy()
    grad[np.arange(n), class_targets] -= 1.0
    grad /= n
    return value, grad


def loss_rpn(objectness, box_deltas, assignment, sample_mask=None, beta: float = SMOOTH_L1_BETA):
    """First-stage loss: mean binary cross-entropy objectness over the sampled
    anchors plus per-coordinate mean smooth L1 on positive anchors' deltas.

    objectness: (A,) logits; box_deltas: (A, D) predicted offsets;
    assignment: RpnAssignment (labels 1/0/-1, target_deltas).  sample_mask
    restricts both terms to a minibatch; by default all non-ignored anchors
    count.  Returns (obj_value, reg_value, grad_objectness, grad_deltas).
    """
    objectness = np.asarray(objectness, dtype=np.float64)
    box_deltas = np.asarray(box_deltas, dtype=np.float64)
    labels = assignment.labels
    if sample_mask is None:
        sample_mask = labels >= 0
    sample_mask = np.asarray(sample_mask, dtype=bool) & (labels >= 0)

    grad_obj = np.zeros_like(objectness)
    grad_deltas = np.zeros_like(box_deltas)
    n_s = int(np.sum(sample_mask))
    if n_s == 0:
        return 0.0, 0.0, grad_obj, grad_deltas

    o = objectness[sample_mask]
    y = labels[sample_mask].astype(np.float64)
    # Numerically stable BCE-with-logits and its gradient sigmoid(o) - y.
    bce = np.maximum(o, 0.0) - o * y + np.log1p(np.exp(-np.abs(o)))
    obj_value = float(np.sum(bce) / n_s)
    with np.errstate(over="ignore"):  # exp overflow saturates to the exact limit 0
        grad_obj[sample_mask] = (1.0 / (1.0 + np.exp(-o)) - y) / n_s

    pos_mask = sample_mask & (labels == 1)
    n_pos = int(np.sum(pos_mask))
    if n_pos == 0:
        return obj_value, 0.0, grad_obj, grad_deltas
    diff = box_deltas[pos_mask] - assignment.target_deltas[pos_mask]
    denom = n_pos * diff.shape[1]
    reg_value = float(np.sum(smooth_l1(diff, beta)) / denom)
    grad_deltas[pos_mask] = smooth_l1_grad(diff, beta) / denom
    return obj_value, reg_value, grad_obj, grad_deltas


@dataclass(frozen=True)
class LossReport:
    """The five loss components and their unweighted sum."""

    l_rpn_obj: float
    l_rpn_reg: float
    l_cls: float
    l_2d: float
    l_3d: float
    l_total: float = field(init=False)

    def __post_init__(self):
        parts = (self.l_rpn_obj, self.l_rpn_reg, self.l_cls, self.l_2d, self.l_3d)
        for p in parts:
            if not np.isfinite(p) or p < 0:
                raise ValueError(f"loss components must be finite and non-negative: {parts}")
        total = self.l_rpn_obj + self.l_rpn_reg + self.l_cls + self.l_2d + self.l_3d
        object.__setattr__(self, "l_total", float(total))
