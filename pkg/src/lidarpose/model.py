"""Two-stage multi-person pose network at desk scale.

Stage 1 scores a lattice of ground-plane 3D anchor boxes: both feature maps
are reduced to one channel by a 1x1 convolution, a small crop is taken per
anchor from each view, the views are averaged, and a shared fully connected
head emits objectness plus box offsets.  Surviving proposals (NMS + top-N)
feed stage 2, which crops full-channel features per RoI (align or pool),
fuses RGB and BEV crops (concat or mean), and predicts (K+1) anchor-pose
logits plus 5*J*(K+1) pose deltas: 2 image-plane values and 3 metric values
per joint per class.

In "rgb" mode the LiDAR stream is absent: anchors come from a fixed nominal
ground plane, first-stage regression is in image space, and each RoI's 3D box
is back-projected assuming a nominal pedestrian height.  That assumption is
the monocular scale ambiguity made explicit: depth errors scale with how far
a person's true height is from nominal.

Feature maps are 1/8 resolution (three stride-2 convolutions), so box
coordinates are divided by 8 when cropping.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .anchors import (
    AnchorBox3D,
    AnchorPoseSet,
    NUM_ANCHOR_POSES,
    TEMPLATE_SIZE,
    generate_anchor_grid,
    load_anchor_poses,
    project_box_to_image,
)
from .autodiff import Tensor
from .bev import AreaExtents, BevGrid, encode_bev, project_box_to_bev
from .geometry import (
    CameraIntrinsics,
    GROUND_NORMAL,
    NUM_JOINTS,
    Plane,
    PointCloud,
    fit_ground_plane,
)

FEATURE_STRIDE = 8


@dataclass(frozen=True)
class ModelConfig:
    """Architecture plus training recipe; serialized next to every run."""

    mode: str = "rgb+lidar"        # "rgb+lidar" or "rgb"
    fusion: str = "concat"         # "concat" or "mean"
    roi_op: str = "align"          # "align" or "pool"
    channels: int = 16
    norm_groups: int = 4
    head_hidden: int = 64
    stage1_hidden: int = 16
    stage1_crop: int = 3
    roi_size: int = 4
    num_anchor_poses: int = NUM_ANCHOR_POSES
    num_joints: int = NUM_JOINTS
    # Anchor lattice and BEV rasterization.
    area_extents: tuple = (-6.0, 6.0, -1.0, 3.0, 4.0, 24.0)
    anchor_stride: float = 0.4
    bev_resolution: float = 0.25
    ground_offset: float = 1.8
    nominal_height: float = 1.7
    # Proposal filtering.
    nms_threshold: float = 0.7
    top_n: int = 32
    pre_nms_top_n: int = 256
    # Training recipe.
    optimizer: str = "adam"        # "adam" or "rmsprop"
    learning_rate: float = 5e-5
    batch_size: int = 1
    epochs: int = 50
    lr_decay: float = 1.0
    lr_decay_every: int = 50
    flip_augment: bool = True
    smooth_l1_beta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("rgb+lidar", "rgb"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.fusion not in ("concat", "mean"):
            raise ValueError(f"unknown fusion {self.fusion!r}")
        if self.roi_op not in ("align", "pool"):
            raise ValueError(f"unknown roi op {self.roi_op!r}")
        if self.optimizer not in ("adam", "rmsprop"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.num_joints != NUM_JOINTS:
            raise ValueError(f"joint count is fixed at {NUM_JOINTS}")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.channels <= 0 or self.channels % self.norm_groups != 0:
            raise ValueError("channels must be positive and divisible by norm_groups")

    @property
    def extents(self) -> AreaExtents:
        return AreaExtents(*self.area_extents)


def fusion_recipe(**overrides) -> ModelConfig:
    """Full-length fusion recipe: Adam, lr 5e-5, batch 1, 50 epochs, no decay."""
    base = ModelConfig(
        mode="rgb+lidar", optimizer="adam", learning_rate=5e-5, batch_size=1,
        epochs=50, lr_decay=1.0,
    )
    return replace(base, **overrides) if overrides else base


def rgb_baseline_recipe(**overrides) -> ModelConfig:
    """Full-length RGB recipe: RMSProp, lr 1e-3, batch 4, 170 epochs, 0.8 decay / 50."""
    base = ModelConfig(
        mode="rgb", optimizer="rmsprop", learning_rate=1e-3, batch_size=4,
        epochs=170, lr_decay=0.8, lr_decay_every=50,
    )
    return replace(base, **overrides) if overrides else base


def desk_recipe(mode: str = "rgb+lidar", **overrides) -> ModelConfig:
    """Short recipe sized for CPU minutes; identical across input modes so
    comparisons isolate the input modality."""
    base = ModelConfig(
        mode=mode, optimizer="adam", learning_rate=1e-3, batch_size=1,
        epochs=12, lr_decay=1.0,
    )
    return replace(base, **overrides) if overrides else base


@dataclass
class Detection:
    """One second-stage detection with per-class decoded poses.

    deltas has shape (K+1, J, 5): per class, per joint, (du, dv) in
    roi-normalized image units then (dx, dy, dz) in meters.  poses_2d[k] and
    poses_3d[k] are the decoded poses for anchor class k (class index k+1 in
    the score vector; index 0 is background and has no pose).
    """

    box_2d: np.ndarray
    box_3d: AnchorBox3D | None
    scores: np.ndarray
    probs: np.ndarray
    deltas: np.ndarray
    poses_2d: np.ndarray
    poses_3d: np.ndarray

    def __post_init__(self):
        k1, j, five = self.deltas.shape
        if five != 5 or j != NUM_JOINTS or k1 != NUM_ANCHOR_POSES + 1:
            raise ValueError(f"deltas must be (K+1, J, 5), got {self.deltas.shape}")

    @property
    def best_class(self) -> int:
        """Highest-probability non-background class index (1..K)."""
        return 1 + int(np.argmax(self.probs[1:]))

    @property
    def best_score(self) -> float:
        return float(self.probs[self.best_class])

    @property
    def best_pose_2d(self) -> np.ndarray:
        return self.poses_2d[self.best_class - 1]

    @property
    def best_pose_3d(self) -> np.ndarray:
        return self.poses_3d[self.best_class - 1]


def nms(boxes: np.ndarray, scores: np.ndarray, threshold: float) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices, best first.

    Boxes overlapping a kept box with IoU > threshold are suppressed.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    x0, y0, x1, y1 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    areas = np.maximum(x1 - x0, 0.0) * np.maximum(y1 - y0, 0.0)
    keep = []
    while order.size > 0:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        iw = np.maximum(
            np.minimum(x1[i], x1[rest]) - np.maximum(x0[i], x0[rest]), 0.0
        )
        ih = np.maximum(
            np.minimum(y1[i], y1[rest]) - np.maximum(y0[i], y0[rest]), 0.0
        )
        inter = iw * ih
        union = areas[i] + areas[rest] - inter
        iou = np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)
        order = rest[iou <= threshold]
    return np.array(keep, dtype=np.int64)


def decode_poses(
    deltas: np.ndarray,
    anchor_poses: AnchorPoseSet,
    roi_2d,
    box_3d: AnchorBox3D,
) -> tuple[np.ndarray, np.ndarray]:
    """Apply per-class deltas to anchor poses fitted into a RoI.

    deltas: (K+1, J, 5).  Returns (poses_2d (K, J, 2), poses_3d (K, J, 3)).
    2D deltas are roi-normalized (a du of 0.1 on a 100 px wide roi moves the
    joint 10 px); 3D deltas are meters.
    """
    x0, y0, x1, y1 = (float(v) for v in roi_2d)
    w, h = x1 - x0, y1 - y0
    if w <= 0 or h <= 0:
        raise ValueError(f"degenerate roi {roi_2d}")
    fitted2d = np.array([x0, y0]) + anchor_poses.poses_2d * np.array([w, h])
    poses_2d = fitted2d + deltas[1:, :, 0:2] * np.array([w, h])
    center = np.asarray(box_3d.center)
    fitted3d = center + box_3d.size[1] * anchor_poses.poses_3d
    poses_3d = fitted3d + deltas[1:, :, 2:5]
    return poses_2d, poses_3d


@dataclass
class PreparedScene:
    """Per-scene precomputation shared by every forward pass.

    Holds the float image, the encoded BEV grid (fusion mode), the anchor
    lattice with its image footprints, and the fitted ground plane.
    """

    cam: CameraIntrinsics
    rgb: np.ndarray                      # (3, H, W) float64 in [0, 1]
    bev: BevGrid | None
    anchors: list                        # AnchorBox3D (fusion) or None (rgb)
    anchor_boxes_2d: np.ndarray          # (A, 4) image px
    anchor_footprints: np.ndarray | None # (A, 4) BEV px (fusion only)
    plane: Plane
    extents: AreaExtents
    resolution: float


def nominal_ground_plane(config: ModelConfig) -> Plane:
    return Plane(n=GROUND_NORMAL, r0=(0.0, config.ground_offset, 0.0))


def _anchor_center_plane(ground: Plane, template_height: float) -> Plane:
    """Shift a ground plane up by half a box so anchor centers sit mid-body."""
    x0, y0, z0 = ground.r0
    return Plane(n=ground.n, r0=(x0, y0 - template_height / 2.0, z0))


def prepare_scene(
    config: ModelConfig,
    cam: CameraIntrinsics,
    image: np.ndarray,
    cloud: PointCloud | None,
) -> PreparedScene:
    """Encode inputs and lay out the anchor lattice for one scene.

    Fusion mode fits the ground plane to the cloud (fixed seed, so repeated
    preparation is bitwise identical); rgb mode assumes the nominal plane.
    """
    image = np.asarray(image)
    rgb = np.transpose(image, (2, 0, 1)).astype(np.float64) / 255.0
    extents = config.extents
    if config.mode == "rgb+lidar":
        if cloud is None:
            raise ValueError("rgb+lidar mode requires a point cloud")
        # The cloud contains actual ground returns, so the consensus height is
        # already the ground; the sensor-mount offset stays disabled here and
        # only feeds the rgb-mode nominal plane.
        plane = fit_ground_plane(cloud, seed=config.seed, offset=0.0)
        bev = encode_bev(cloud, extents, config.bev_resolution)
    else:
        plane = nominal_ground_plane(config)
        bev = None
    anchors = generate_anchor_grid(
        _anchor_center_plane(plane, TEMPLATE_SIZE[1]),
        extents,
        config.anchor_stride,
        TEMPLATE_SIZE,
    )
    boxes_2d = np.empty((len(anchors), 4))
    for i, a in enumerate(anchors):
        boxes_2d[i] = project_box_to_image(cam, a)
    # Keep anchors whose image footprint intersects the frame; others can
    # never be matched or scored meaningfully.
    visible = (
        (boxes_2d[:, 2] > 0)
        & (boxes_2d[:, 0] < cam.width)
        & (boxes_2d[:, 3] > 0)
        & (boxes_2d[:, 1] < cam.height)
    )
    anchors = [a for a, v in zip(anchors, visible) if v]
    boxes_2d = boxes_2d[visible]
    if config.mode == "rgb+lidar":
        footprints = np.empty((len(anchors), 4))
        for i, a in enumerate(anchors):
            footprints[i] = project_box_to_bev(
                a.corners_min, a.corners_max, extents, config.bev_resolution
            )
    else:
        footprints = None
    return PreparedScene(
        cam=cam,
        rgb=rgb,
        bev=bev,
        anchors=anchors,
        anchor_boxes_2d=boxes_2d,
        anchor_footprints=footprints,
        plane=plane,
        extents=extents,
        resolution=config.bev_resolution,
    )


def pseudo_box_3d(config: ModelConfig, cam: CameraIntrinsics, box_2d) -> AnchorBox3D:
    """Back-project a 2D box to 3D assuming a nominal pedestrian height.

    Depth comes from z = fy * H_nom / box height; if the person's true height
    differs from nominal, depth (and everything derived from it) scales
    accordingly.  This is the rgb-only pipeline's structural depth error.
    """
    x0, y0, x1, y1 = (float(v) for v in box_2d)
    h_px = max(y1 - y0, 4.0)
    w_px = max(x1 - x0, 2.0)
    z = cam.fy * config.nominal_height / h_px
    cx_px = (x0 + x1) / 2.0
    cy_px = (y0 + y1) / 2.0
    x = (cx_px - cam.cx) * z / cam.fx
    y = (cy_px - cam.cy) * z / cam.fy
    w = w_px * z / cam.fx
    return AnchorBox3D(center=(x, y, z), size=(w, config.nominal_height, TEMPLATE_SIZE[2]))


class PoseNet:
    """Owns the parameter tensors and runs the two-stage forward pass."""

    def __init__(self, config: ModelConfig, anchor_poses: AnchorPoseSet | None = None):
        self.config = config
        self.poses = anchor_poses if anchor_poses is not None else load_anchor_poses()
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(config.seed))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = nn.parameter(value, name)

    def _init_extractor(self, rng, prefix: str, in_channels: int) -> None:
        c = self.config.channels
        chans = [in_channels, c, c, c]
        for layer in range(3):
            self._add(f"{prefix}_conv{layer}_w", nn.he_conv(rng, chans[layer + 1], chans[layer], 3))
            self._add(f"{prefix}_conv{layer}_b", np.zeros(chans[layer + 1]))
            self._add(f"{prefix}_gn{layer}_g", np.ones(chans[layer + 1]))
            self._add(f"{prefix}_gn{layer}_b", np.zeros(chans[layer + 1]))

    def _init_params(self, rng) -> None:
        cfg = self.config
        fusion_mode = cfg.mode == "rgb+lidar"
        self._init_extractor(rng, "rgb", 3)
        if fusion_mode:
            self._init_extractor(rng, "bev", 6)
        # Stage 1: per-view 1x1 reduction to one channel, then a shared head.
        self._add("s1_rgb_reduce_w", nn.he_conv(rng, 1, cfg.channels, 1))
        self._add("s1_rgb_reduce_b", np.zeros(1))
        if fusion_mode:
            self._add("s1_bev_reduce_w", nn.he_conv(rng, 1, cfg.channels, 1))
            self._add("s1_bev_reduce_b", np.zeros(1))
        crop_feat = cfg.stage1_crop * cfg.stage1_crop
        self._add("s1_fc_w", nn.he_linear(rng, crop_feat, cfg.stage1_hidden))
        self._add("s1_fc_b", np.zeros(cfg.stage1_hidden))
        self._add("s1_obj_w", nn.he_linear(rng, cfg.stage1_hidden, 1))
        self._add("s1_obj_b", np.zeros(1))
        reg_dim = 6 if fusion_mode else 4
        self._add("s1_reg_w", nn.he_linear(rng, cfg.stage1_hidden, reg_dim))
        self._add("s1_reg_b", np.zeros(reg_dim))
        # Stage 2 head.
        streams = 2 if (fusion_mode and cfg.fusion == "concat") else 1
        feat = cfg.roi_size * cfg.roi_size * cfg.channels * streams
        k1 = cfg.num_anchor_poses + 1
        self._add("s2_fc_w", nn.he_linear(rng, feat, cfg.head_hidden))
        self._add("s2_fc_b", np.zeros(cfg.head_hidden))
        self._add("s2_cls_w", nn.he_linear(rng, cfg.head_hidden, k1))
        self._add("s2_cls_b", np.zeros(k1))
        self._add("s2_delta_w", nn.he_linear(rng, cfg.head_hidden, 5 * cfg.num_joints * k1))
        self._add("s2_delta_b", np.zeros(5 * cfg.num_joints * k1))

    def parameter_names(self) -> list[str]:
        return list(self.params.keys())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.value for name, p in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(arrays)
        if missing:
            raise ValueError(f"parameter names do not match checkpoint: {sorted(missing)}")
        for name, value in arrays.items():
            if value.shape != self.params[name].value.shape:
                raise ValueError(f"shape mismatch for {name}")
            self.params[name] = nn.parameter(value.astype(np.float64), name)

    def _extract(self, prefix: str, x: np.ndarray) -> Tensor:
        cfg = self.config
        t = nn.constant(x, name=f"{prefix}_input")
        for layer in range(3):
            t = nn.conv2d(
                t,
                self.params[f"{prefix}_conv{layer}_w"],
                self.params[f"{prefix}_conv{layer}_b"],
                stride=2,
                padding=1,
                name=f"{prefix}_conv{layer}",
            )
            t = nn.group_norm(
                t,
                self.params[f"{prefix}_gn{layer}_g"],
                self.params[f"{prefix}_gn{layer}_b"],
                groups=cfg.norm_groups,
                name=f"{prefix}_gn{layer}",
            )
            t = nn.relu(t, name=f"{prefix}_relu{layer}")
        return t

    def _stage1(self, scene: PreparedScene, rgb_fmap: Tensor, bev_fmap: Tensor | None):
        cfg = self.config
        crop = (cfg.stage1_crop, cfg.stage1_crop)
        rgb_red = nn.conv2d(
            rgb_fmap, self.params["s1_rgb_reduce_w"], self.params["s1_rgb_reduce_b"],
            stride=1, padding=0, name="s1_rgb_reduce",
        )
        rgb_crops = nn.roi_align_many(
            rgb_red, scene.anchor_boxes_2d / FEATURE_STRIDE, crop, name="s1_rgb_crops"
        )
        if bev_fmap is not None:
            bev_red = nn.conv2d(
                bev_fmap, self.params["s1_bev_reduce_w"], self.params["s1_bev_reduce_b"],
                stride=1, padding=0, name="s1_bev_reduce",
            )
            bev_crops = nn.roi_align_many(
                bev_red, scene.anchor_footprints / FEATURE_STRIDE, crop, name="s1_bev_crops"
            )
            crops = nn.mean_fuse(rgb_crops, bev_crops, name="s1_view_mean")
        else:
            crops = rgb_crops
        n = len(scene.anchors)
        flat = nn.reshape(crops, (n, cfg.stage1_crop * cfg.stage1_crop), name="s1_flat")
        hidden = nn.relu(
            nn.linear(flat, self.params["s1_fc_w"], self.params["s1_fc_b"], name="s1_fc"),
            name="s1_fc_relu",
        )
        obj = nn.linear(hidden, self.params["s1_obj_w"], self.params["s1_obj_b"], name="s1_obj")
        obj = nn.reshape(obj, (n,), name="s1_obj_flat")
        reg = nn.linear(hidden, self.params["s1_reg_w"], self.params["s1_reg_b"], name="s1_reg")
        return obj, reg

    def _decode_proposals_3d(self, scene: PreparedScene, reg: np.ndarray, which) -> list[AnchorBox3D]:
        """Vectorized 3D box decode with stability clamps into the extents."""
        ext = scene.extents
        centers = np.array([scene.anchors[i].center for i in which])
        sizes = np.array([scene.anchors[i].size for i in which])
        d = np.clip(reg, -4.0, 4.0)
        c = centers + d[:, :3] * sizes
        s = np.clip(sizes * np.exp(d[:, 3:]), 0.1, 6.0)
        margin = 1e-3
        c[:, 0] = np.clip(c[:, 0], ext.x_min + margin, ext.x_max - margin)
        c[:, 1] = np.clip(c[:, 1], ext.y_min, ext.y_max)
        c[:, 2] = np.clip(c[:, 2], ext.z_min + margin, ext.z_max - margin)
        return [
            AnchorBox3D(center=tuple(c[i]), size=tuple(s[i])) for i in range(reg.shape[0])
        ]

    def _decode_proposals_2d(self, scene: PreparedScene, reg: np.ndarray, which) -> np.ndarray:
        """Vectorized 2D box decode clipped to the image."""
        cam = scene.cam
        a = scene.anchor_boxes_2d[which]
        aw = a[:, 2] - a[:, 0]
        ah = a[:, 3] - a[:, 1]
        acx = (a[:, 0] + a[:, 2]) / 2
        acy = (a[:, 1] + a[:, 3]) / 2
        d = np.clip(reg, -4.0, 4.0)
        cx = acx + d[:, 0] * aw
        cy = acy + d[:, 1] * ah
        w = aw * np.exp(d[:, 2])
        h = ah * np.exp(d[:, 3])
        boxes = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
        boxes[:, 0] = np.clip(boxes[:, 0], 0.0, cam.width - 2.0)
        boxes[:, 1] = np.clip(boxes[:, 1], 0.0, cam.height - 2.0)
        boxes[:, 2] = np.clip(boxes[:, 2], boxes[:, 0] + 1.0, cam.width - 1.0)
        boxes[:, 3] = np.clip(boxes[:, 3], boxes[:, 1] + 1.0, cam.height - 1.0)
        return boxes

    def forward(self, scene: PreparedScene, extra_rois=None, use_proposals: bool = True):
        """Run both stages; returns (detections, activations).

        extra_rois injects additional stage-2 RoIs (training adds the ground
        truth boxes so the second stage always sees foreground).  For fusion
        mode these are AnchorBox3D, for rgb mode (4,) pixel boxes.  With
        use_proposals False the second stage runs on extra_rois alone, which
        removes the discrete NMS selection from the parameter-to-loss map.
        Deterministic: no randomness anywhere in the pass.
        """
        cfg = self.config
        fusion_mode = cfg.mode == "rgb+lidar"
        has_extra = extra_rois is not None and len(extra_rois) > 0
        if not use_proposals and not has_extra:
            raise ValueError("use_proposals=False requires extra_rois")
        rgb_fmap = self._extract("rgb", scene.rgb)
        bev_fmap = self._extract("bev", scene.bev.channels) if fusion_mode else None
        objectness, rpn_reg = self._stage1(scene, rgb_fmap, bev_fmap)

        with np.errstate(over="ignore"):  # exp overflow saturates to the exact limit 0
            obj_scores = 1.0 / (1.0 + np.exp(-objectness.value))
        order = np.argsort(-obj_scores, kind="stable")[: cfg.pre_nms_top_n]
        keep = np.zeros(0, dtype=np.int64)
        if fusion_mode:
            rois_3d = []
            if use_proposals:
                cand_boxes = self._decode_proposals_3d(scene, rpn_reg.value[order], order)
                cand_foot = np.array([
                    project_box_to_bev(b.corners_min, b.corners_max, scene.extents, scene.resolution)
                    for b in cand_boxes
                ])
                keep = nms(cand_foot, obj_scores[order], cfg.nms_threshold)[: cfg.top_n]
                rois_3d = [cand_boxes[i] for i in keep]
            if has_extra:
                rois_3d = rois_3d + list(extra_rois)
            rois_2d = np.array([project_box_to_image(scene.cam, b) for b in rois_3d])
            rois_2d[:, [0, 2]] = np.clip(rois_2d[:, [0, 2]], -2 * scene.cam.width, 3 * scene.cam.width)
            rois_2d[:, [1, 3]] = np.clip(rois_2d[:, [1, 3]], -2 * scene.cam.height, 3 * scene.cam.height)
            roi_foot = np.array([
                project_box_to_bev(b.corners_min, b.corners_max, scene.extents, scene.resolution)
                for b in rois_3d
            ])
        else:
            rois_2d = np.zeros((0, 4))
            if use_proposals:
                cand_boxes = self._decode_proposals_2d(scene, rpn_reg.value[order], order)
                keep = nms(cand_boxes, obj_scores[order], cfg.nms_threshold)[: cfg.top_n]
                rois_2d = cand_boxes[keep]
            if has_extra:
                rois_2d = np.concatenate([rois_2d, np.asarray(extra_rois, dtype=np.float64)])
            rois_3d = [pseudo_box_3d(cfg, scene.cam, b) for b in rois_2d]
            roi_foot = None

        roi_op = nn.roi_align_many if cfg.roi_op == "align" else nn.roi_pool_many
        out_size = (cfg.roi_size, cfg.roi_size)
        rgb_crops = roi_op(rgb_fmap, rois_2d / FEATURE_STRIDE, out_size, name="s2_rgb_crops")
        if fusion_mode:
            bev_crops = roi_op(bev_fmap, roi_foot / FEATURE_STRIDE, out_size, name="s2_bev_crops")
            if cfg.fusion == "concat":
                fused = nn.concat_channels(rgb_crops, bev_crops, name="s2_concat")
            else:
                fused = nn.mean_fuse(rgb_crops, bev_crops, name="s2_mean")
        else:
            fused = rgb_crops
        n_roi = len(rois_3d)
        flat = nn.reshape(fused, (n_roi, -1), name="s2_flat")
        hidden = nn.relu(
            nn.linear(flat, self.params["s2_fc_w"], self.params["s2_fc_b"], name="s2_fc"),
            name="s2_fc_relu",
        )
        scores = nn.linear(hidden, self.params["s2_cls_w"], self.params["s2_cls_b"], name="s2_cls")
        k1 = cfg.num_anchor_poses + 1
        deltas_flat = nn.linear(
            hidden, self.params["s2_delta_w"], self.params["s2_delta_b"], name="s2_deltas"
        )
        pose_deltas = nn.reshape(
            deltas_flat, (n_roi, k1, cfg.num_joints, 5), name="s2_deltas_kj5"
        )

        shifted = scores.value - np.max(scores.value, axis=1, keepdims=True)
        exp = np.exp(shifted)
        probs = exp / np.sum(exp, axis=1, keepdims=True)
        detections = []
        for i in range(n_roi):
            poses_2d, poses_3d = decode_poses(
                pose_deltas.value[i], self.poses, rois_2d[i], rois_3d[i]
            )
            detections.append(
                Detection(
                    box_2d=rois_2d[i].copy(),
                    box_3d=rois_3d[i],
                    scores=scores.value[i].copy(),
                    probs=probs[i].copy(),
                    deltas=pose_deltas.value[i].copy(),
                    poses_2d=poses_2d,
                    poses_3d=poses_3d,
                )
            )
        activations = {
            "rgb_fmap": rgb_fmap,
            "bev_fmap": bev_fmap,
            "objectness": objectness,
            "rpn_reg": rpn_reg,
            "scores": scores,
            "pose_deltas": pose_deltas,
            "rois_2d": rois_2d,
            "rois_3d": rois_3d,
            "num_proposals": int(len(keep)),
        }
        return detections, activations
