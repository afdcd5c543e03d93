"""Weakly supervised training loop.

Supervision per scene: 3D person boxes (first stage only) and 2D poses.  No
3D pose labels anywhere.  The second stage decodes its pose deltas on top of
anchor poses fitted into the matched ground-truth boxes, so the targets stay
clean even while the proposals are still bad; at inference the same deltas
are applied to the predicted RoIs instead.

Each optimizer step backpropagates one batch through a single reverse sweep
seeded at four roots: RPN objectness, RPN regression, classification scores
and pose deltas.  Checkpoints capture parameters, optimizer moments, the RNG
state and the loss history, so a resumed run is bitwise identical to an
uninterrupted one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchors import AnchorBox3D, fit_anchor_pose_3d, fit_anchor_pose_to_roi
from .assignment import assign_rpn_anchors, assign_targets, sample_rpn_minibatch
from .autodiff import NonFiniteError, backward_from
from .bev import AreaExtents
from .blobio import read_blob, write_blob
from .geometry import (
    BehindCameraError,
    CameraIntrinsics,
    PointCloud,
    Skeleton2D,
    flip_cloud,
    flip_pose_2d,
)
from .losses import LossReport, loss_cls, loss_rpn, loss_2d, loss_3d
from .model import ModelConfig, PoseNet, PreparedScene, prepare_scene

DIVERGENCE_LIMIT = 1e6

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
RMSPROP_ALPHA = 0.99
RMSPROP_EPS = 1e-8

# Loss-history row layout: step, lr, then the five components and their sum.
HISTORY_COLUMNS = ("step", "lr", "l_rpn_obj", "l_rpn_reg", "l_cls", "l_2d", "l_3d", "l_total")


class TrainingDivergedError(RuntimeError):
    """Raised when a step produces a non-finite or absurdly large loss."""


class Optimizer:
    """Adam or RMSProp over a fixed set of named parameters.

    Moments are stored per parameter name so they survive a checkpoint round
    trip.  apply() with lr = 0 leaves parameter values bitwise unchanged
    (moments still advance).
    """

    def __init__(self, kind: str, params: dict):
        if kind not in ("adam", "rmsprop"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.t = 0
        self.v = {name: np.zeros_like(p.value) for name, p in params.items()}
        self.m = (
            {name: np.zeros_like(p.value) for name, p in params.items()}
            if kind == "adam"
            else {}
        )

    def apply(self, params: dict, lr: float) -> None:
        self.t += 1
        for name, p in params.items():
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise TrainingDivergedError(f"non-finite gradient for {name}")
            v = self.v[name]
            if self.kind == "adam":
                m = self.m[name]
                m *= ADAM_BETA1
                m += (1.0 - ADAM_BETA1) * g
                v *= ADAM_BETA2
                v += (1.0 - ADAM_BETA2) * g * g
                m_hat = m / (1.0 - ADAM_BETA1 ** self.t)
                v_hat = v / (1.0 - ADAM_BETA2 ** self.t)
                p.value -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
            else:
                v *= RMSPROP_ALPHA
                v += (1.0 - RMSPROP_ALPHA) * g * g
                p.value -= lr * g / (np.sqrt(v) + RMSPROP_EPS)

    def to_arrays(self) -> dict[str, np.ndarray]:
        arrays = {
            "opt/kind": np.frombuffer(self.kind.encode("ascii"), dtype=np.uint8).copy(),
            "opt/t": np.array([self.t], dtype=np.int64),
        }
        for name, v in self.v.items():
            arrays[f"opt/v/{name}"] = v
        for name, m in self.m.items():
            arrays[f"opt/m/{name}"] = m
        return arrays

    def from_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        kind = bytes(arrays["opt/kind"]).decode("ascii")
        if kind != self.kind:
            raise ValueError(f"checkpoint optimizer is {kind!r}, expected {self.kind!r}")
        self.t = int(arrays["opt/t"][0])
        for name in self.v:
            self.v[name] = arrays[f"opt/v/{name}"].copy()
        for name in self.m:
            self.m[name] = arrays[f"opt/m/{name}"].copy()


@dataclass
class TrainScene:
    """One training example with its per-scene precomputation.

    The RPN assignment depends only on the (fixed) anchor lattice and ground
    truth, so it is computed once here rather than every step.  `flipped`
    holds the mirrored variant when augmentation is on.
    """

    prepared: PreparedScene
    gt_boxes_3d: list
    gt_boxes_2d: np.ndarray
    gt_skels_2d: list
    rpn: object
    flipped: "TrainScene | None" = None


def _as_skeletons(gt_poses_2d) -> list:
    skels = []
    for p in gt_poses_2d:
        skels.append(p if isinstance(p, Skeleton2D) else Skeleton2D(np.asarray(p, dtype=np.float64)))
    return skels


def prepare_train_scene(
    config: ModelConfig,
    cam: CameraIntrinsics,
    image: np.ndarray,
    cloud: PointCloud | None,
    gt_boxes_3d,
    gt_boxes_2d,
    gt_poses_2d,
    with_flip: bool | None = None,
) -> TrainScene:
    """Encode one scene and precompute its first-stage anchor labels."""
    if with_flip is None:
        with_flip = config.flip_augment
    prepared = prepare_scene(config, cam, image, cloud)
    gt_boxes_2d = np.asarray(gt_boxes_2d, dtype=np.float64).reshape(-1, 4)
    skels = _as_skeletons(gt_poses_2d)
    if config.mode == "rgb+lidar":
        rpn = assign_rpn_anchors(
            prepared.anchors, list(gt_boxes_3d), mode="bev",
            extents=prepared.extents, resolution=prepared.resolution,
        )
    else:
        rpn = assign_rpn_anchors(prepared.anchor_boxes_2d, gt_boxes_2d, mode="image")
    scene = TrainScene(
        prepared=prepared,
        gt_boxes_3d=list(gt_boxes_3d),
        gt_boxes_2d=gt_boxes_2d,
        gt_skels_2d=skels,
        rpn=rpn,
    )
    if with_flip:
        w = float(cam.width)
        image_f = np.ascontiguousarray(np.asarray(image)[:, ::-1])
        cloud_f = flip_cloud(cloud) if cloud is not None else None
        boxes3_f = [
            AnchorBox3D(center=(-b.center[0], b.center[1], b.center[2]), size=b.size)
            for b in gt_boxes_3d
        ]
        if len(gt_boxes_2d):
            boxes2_f = np.stack(
                [w - gt_boxes_2d[:, 2], gt_boxes_2d[:, 1], w - gt_boxes_2d[:, 0], gt_boxes_2d[:, 3]],
                axis=1,
            )
        else:
            boxes2_f = gt_boxes_2d
        skels_f = [flip_pose_2d(s, w) for s in skels]
        scene.flipped = prepare_train_scene(
            config, cam, image_f, cloud_f, boxes3_f, boxes2_f, skels_f, with_flip=False
        )
    return scene


def _scene_losses(model: PoseNet, ts: TrainScene, rng, beta: float):
    """Forward one scene, compute all loss terms and their seed gradients."""
    cfg = model.config
    fusion = cfg.mode == "rgb+lidar"
    extra = ts.gt_boxes_3d if fusion else ts.gt_boxes_2d
    _, acts = model.forward(ts.prepared, extra_rois=extra)

    mask = sample_rpn_minibatch(ts.rpn, rng)
    l_obj, l_reg, g_obj, g_reg = loss_rpn(
        acts["objectness"].value, acts["rpn_reg"].value, ts.rpn,
        sample_mask=mask, beta=beta,
    )

    if fusion:
        asn = assign_targets(
            acts["rois_3d"], ts.gt_boxes_3d, ts.gt_skels_2d, model.poses,
            mode="bev", cam=ts.prepared.cam,
            extents=ts.prepared.extents, resolution=ts.prepared.resolution,
        )
    else:
        asn = assign_targets(
            acts["rois_2d"], ts.gt_boxes_2d, ts.gt_skels_2d, model.poses, mode="image"
        )
    scores = acts["scores"]
    deltas = acts["pose_deltas"]
    l_c, g_cls = loss_cls(scores.value, asn.class_target)

    n = len(asn.class_target)
    j = cfg.num_joints
    pred2d = np.zeros((n, j, 2))
    pred3d = np.full((n, j, 3), (0.0, 0.0, 1.0))  # safe depth for masked-out rows
    targets = np.zeros((n, j, 2))
    scale2d = np.ones((n, 2))
    for i in np.flatnonzero(asn.fg_mask):
        m = asn.gt_index[i]
        cls = asn.class_target[i]
        box2 = ts.gt_boxes_2d[m]
        scale2d[i] = (box2[2] - box2[0], box2[3] - box2[1])
        base2 = fit_anchor_pose_to_roi(model.poses, cls - 1, box2).joints
        base3 = fit_anchor_pose_3d(model.poses, cls - 1, ts.gt_boxes_3d[m]).joints
        pred2d[i] = base2 + deltas.value[i, cls, :, 0:2] * scale2d[i]
        pred3d[i] = base3 + deltas.value[i, cls, :, 2:5]
        targets[i] = ts.gt_skels_2d[m].joints
    l_2, g_2 = loss_2d(pred2d, targets, asn.fg_mask, beta=beta)
    l_3, g_3 = loss_3d(pred3d, targets, ts.prepared.cam, asn.fg_mask, beta=beta)

    g_deltas = np.zeros_like(deltas.value)
    for i in np.flatnonzero(asn.fg_mask):
        cls = asn.class_target[i]
        g_deltas[i, cls, :, 0:2] = g_2[i] * scale2d[i]
        g_deltas[i, cls, :, 2:5] = g_3[i]

    parts = np.array([l_obj, l_reg, l_c, l_2, l_3])
    roots = [
        (acts["objectness"], g_obj),
        (acts["rpn_reg"], g_reg),
        (scores, g_cls),
        (deltas, g_deltas),
    ]
    return parts, roots


def train_step(
    model: PoseNet,
    batch: list[TrainScene],
    optimizer: Optimizer,
    lr: float,
    rng: np.random.Generator,
    beta: float = 1.0,
) -> LossReport:
    """One optimizer step over a batch; returns the batch-mean loss report.

    Raises TrainingDivergedError if any component is non-finite or the total
    exceeds DIVERGENCE_LIMIT.
    """
    if not batch:
        raise ValueError("empty batch")
    b = len(batch)
    sums = np.zeros(5)
    roots = []
    for ts in batch:
        try:
            parts, scene_roots = _scene_losses(model, ts, rng, beta)
        except NonFiniteError as exc:
            # An overflow inside the forward pass is a divergence too; keep
            # the op name from the tape as the diagnostic.
            raise TrainingDivergedError(f"non-finite activation: {exc}") from exc
        except BehindCameraError as exc:
            # Exploding pose deltas can push decoded joints to negative depth
            # before any activation overflows.
            raise TrainingDivergedError(f"joints left the view frustum: {exc}") from exc
        if not np.all(np.isfinite(parts)) or float(np.sum(parts)) > DIVERGENCE_LIMIT:
            raise TrainingDivergedError(f"loss diverged: {parts}")
        sums += parts
        roots.extend((t, g / b) for t, g in scene_roots)
    backward_from(roots)
    optimizer.apply(model.params, lr)
    means = sums / b
    return LossReport(*(float(v) for v in means))


def learning_rate_at(config: ModelConfig, epoch: int) -> float:
    """Step decay: multiply by lr_decay after every lr_decay_every epochs."""
    if config.lr_decay == 1.0:
        return config.learning_rate
    return config.learning_rate * config.lr_decay ** (epoch // config.lr_decay_every)


def _pack_rng_state(rng: np.random.Generator) -> np.ndarray:
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise ValueError(f"unsupported generator {st['bit_generator']}")
    mask = (1 << 64) - 1
    s = st["state"]["state"]
    inc = st["state"]["inc"]
    vals = [s & mask, (s >> 64) & mask, inc & mask, (inc >> 64) & mask,
            st["has_uint32"], st["uinteger"]]
    return np.array(vals, dtype=np.uint64)


def _unpack_rng_state(arr: np.ndarray) -> np.random.Generator:
    vals = [int(v) for v in arr]
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": vals[0] | (vals[1] << 64), "inc": vals[2] | (vals[3] << 64)},
        "has_uint32": vals[4],
        "uinteger": vals[5],
    }
    return rng


def save_checkpoint(path, model: PoseNet, optimizer: Optimizer, rng, epoch: int, history) -> None:
    """Write everything needed to resume bitwise: params, moments, RNG, history."""
    arrays = {}
    for name, p in model.params.items():
        arrays[f"param/{name}"] = p.value
    arrays.update(optimizer.to_arrays())
    arrays["rng"] = _pack_rng_state(rng)
    arrays["epoch"] = np.array([epoch], dtype=np.int64)
    hist = np.array(history, dtype=np.float64).reshape(len(history), len(HISTORY_COLUMNS))
    arrays["history"] = hist
    write_blob(path, arrays)


def load_checkpoint(path, model: PoseNet, optimizer: Optimizer):
    """Restore a checkpoint; returns (epoch, history, rng)."""
    arrays = read_blob(path)
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    model.load_state_arrays(params)
    optimizer.from_arrays(arrays)
    rng = _unpack_rng_state(arrays["rng"])
    epoch = int(arrays["epoch"][0])
    history = [tuple(float(v) for v in row) for row in arrays["history"]]
    return epoch, history, rng


def fit(
    model: PoseNet,
    scenes: list[TrainScene],
    *,
    checkpoint_path=None,
    checkpoint_every: int = 0,
    resume_from=None,
    stop_after_epoch: int | None = None,
    best_path=None,
    log_fn=None,
) -> list[tuple]:
    """Run the configured number of epochs; returns the loss history.

    History rows follow HISTORY_COLUMNS.  A single RNG stream (seeded from
    the config) drives epoch shuffling, flip decisions and RPN sampling in a
    fixed order, which is what makes resumed runs bitwise reproducible.
    stop_after_epoch trains only up to that epoch (exclusive), checkpointing
    at the boundary, so interrupted runs can be simulated deterministically.
    best_path, if given, receives a checkpoint at every epoch whose mean
    l_total is the lowest so far.
    """
    cfg = model.config
    if not scenes:
        raise ValueError("no training scenes")
    optimizer = Optimizer(cfg.optimizer, model.params)
    rng = np.random.default_rng(cfg.seed + 1)
    history: list[tuple] = []
    start_epoch = 0
    if resume_from is not None:
        start_epoch, history, rng = load_checkpoint(resume_from, model, optimizer)
    last_epoch = cfg.epochs if stop_after_epoch is None else min(stop_after_epoch, cfg.epochs)
    step = len(history)
    best_total = np.inf
    for epoch in range(start_epoch, last_epoch):
        lr = learning_rate_at(cfg, epoch)
        order = rng.permutation(len(scenes))
        epoch_total = 0.0
        epoch_steps = 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = []
            for idx in order[lo:lo + cfg.batch_size]:
                ts = scenes[idx]
                if cfg.flip_augment and ts.flipped is not None and rng.random() < 0.5:
                    ts = ts.flipped
                batch.append(ts)
            report = train_step(model, batch, optimizer, lr, rng, beta=cfg.smooth_l1_beta)
            step += 1
            row = (float(step), lr, report.l_rpn_obj, report.l_rpn_reg,
                   report.l_cls, report.l_2d, report.l_3d, report.l_total)
            history.append(row)
            epoch_total += report.l_total
            epoch_steps += 1
            if log_fn is not None:
                log_fn(step, lr, report)
        done = epoch + 1
        if checkpoint_path is not None and (
            done == last_epoch or (checkpoint_every > 0 and done % checkpoint_every == 0)
        ):
            save_checkpoint(checkpoint_path, model, optimizer, rng, done, history)
        if best_path is not None and epoch_steps and epoch_total / epoch_steps < best_total:
            best_total = epoch_total / epoch_steps
            save_checkpoint(best_path, model, optimizer, rng, done, history)
    return history
