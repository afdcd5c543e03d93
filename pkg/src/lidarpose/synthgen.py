"""Deterministic synthetic street scenes with exact labels.

Each scene is a pinhole camera looking down a flat road: pedestrians are
posed from the anchor-pose set (random height 1.5-2.0 m plus bounded joint
noise), rendered as flat-shaded capsule limbs into a small RGB raster, and
scanned by a simulated LiDAR.  The LiDAR is a fixed azimuth/elevation ray
grid intersected with the same capsules, so the returned point count falls
off naturally with depth; rays that miss every body land on the ground
plane.  Capsule hits use the closest-approach chord approximation (exact for
spheres, slightly shallow for grazing cylinder hits), which is plenty for an
oracle dataset.

Labels are exact by construction: the stored 2D skeleton is the projection
of the stored 3D skeleton, bitwise, and the 3D box is the joint AABB plus a
fixed margin.  Heights vary while monocular scale cues do not, so depth is
under-determined from the image alone; the LiDAR resolves it.

On disk a dataset is a key-value manifest, one versioned blob per scene
(image, cloud, joints) and one label CSV per scene in the prediction-record
format (informational; the blob is authoritative).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .anchors import AnchorBox3D, load_anchor_poses
from .bev import AreaExtents
from .blobio import read_blob, write_blob
from .geometry import (
    CameraIntrinsics,
    JOINT_NAMES,
    NUM_JOINTS,
    PointCloud,
    Skeleton2D,
    Skeleton3D,
    project_skeleton,
)

BOX_MARGIN_3D = 0.05   # meters added around the joint AABB
BOX_PAD_2D = 2.0       # pixels added around the projected joints

# Capsule skeleton: (joint a, joint b, radius m).  The head is a sphere.
CAPSULES = (
    (0, 0, 0.11),
    (1, 2, 0.07),            # shoulder girdle
    (1, 7, 0.10), (2, 8, 0.10),  # torso sides
    (7, 8, 0.08),            # pelvis
    (1, 3, 0.05), (3, 5, 0.045),  # left arm
    (2, 4, 0.05), (4, 6, 0.045),  # right arm
    (7, 9, 0.065), (9, 11, 0.055),  # left leg
    (8, 10, 0.065), (10, 12, 0.055),  # right leg
)

# LiDAR ray grid (radians).  Elevation is positive downward like +y.
AZIMUTH_RANGE = (-0.5, 0.5)
ELEVATION_RANGE = (-0.12, 0.45)
N_AZIMUTH = 144
N_ELEVATION = 64
RANGE_NOISE = 0.008    # uniform +- along the ray, under the plane-fit tolerance
MAX_GROUND_RANGE = 60.0

DEFAULT_CAMERA = CameraIntrinsics(fx=160.0, fy=160.0, cx=64.0, cy=48.0, width=128, height=96)


@dataclass(frozen=True)
class GenConfig:
    """Everything a dataset build needs; recorded in the manifest."""

    n_scenes: int = 200
    seed: int = 7
    min_pedestrians: int = 1
    max_pedestrians: int = 3
    depth_range: tuple = (7.0, 20.0)
    height_range: tuple = (1.5, 2.0)
    joint_noise: float = 0.04
    occlusion_rate: float = 0.0
    min_points: int = 10
    ground_y: float = 1.8
    val_fraction: float = 0.2
    area_extents: tuple = (-6.0, 6.0, -1.0, 3.0, 4.0, 24.0)

    def __post_init__(self):
        if self.n_scenes < 0:
            raise ValueError("n_scenes must be non-negative")
        if not (0 <= self.min_pedestrians <= self.max_pedestrians):
            raise ValueError("invalid pedestrian count range")
        if self.depth_range[0] <= 0 or self.depth_range[0] > self.depth_range[1]:
            raise ValueError(f"invalid depth range {self.depth_range}")
        if self.height_range[0] <= 0 or self.height_range[0] > self.height_range[1]:
            raise ValueError(f"invalid height range {self.height_range}")
        if not 0.0 <= self.occlusion_rate <= 1.0:
            raise ValueError("occlusion_rate must be in [0, 1]")
        if not 0.0 <= self.val_fraction <= 1.0:
            raise ValueError("val_fraction must be in [0, 1]")

    @property
    def extents(self) -> AreaExtents:
        return AreaExtents(*self.area_extents)


@dataclass
class GtInstance:
    """Ground truth for one pedestrian: exact 3D/2D skeletons and boxes."""

    skel_3d: Skeleton3D
    skel_2d: Skeleton2D
    box_3d: AnchorBox3D
    box_2d: np.ndarray


@dataclass
class Scene:
    scene_id: int
    camera: CameraIntrinsics
    image: np.ndarray        # (H, W, 3) uint8
    cloud: PointCloud
    gt: list[GtInstance]


@dataclass
class DatasetManifest:
    scene_count: int
    seed: int
    joint_order: tuple
    area_extents: tuple
    splits: dict[str, tuple]

    def __post_init__(self):
        seen: set[int] = set()
        for name, ids in self.splits.items():
            ids_set = set(int(i) for i in ids)
            if seen & ids_set:
                raise ValueError(f"split {name!r} overlaps another split")
            seen |= ids_set
        if tuple(self.joint_order) != JOINT_NAMES:
            raise ValueError("manifest joint order does not match this build")

    @property
    def extents(self) -> AreaExtents:
        return AreaExtents(*self.area_extents)


def gt_box_3d_from_joints(joints3d: np.ndarray, margin: float = BOX_MARGIN_3D) -> AnchorBox3D:
    """Axis-aligned box around the joints, padded so all joints are interior."""
    lo = np.min(joints3d, axis=0) - margin
    hi = np.max(joints3d, axis=0) + margin
    center = (lo + hi) / 2.0
    return AnchorBox3D(center=tuple(center), size=tuple(hi - lo))


def gt_box_2d_from_joints(joints2d: np.ndarray, pad: float = BOX_PAD_2D) -> np.ndarray:
    lo = np.min(joints2d, axis=0) - pad
    hi = np.max(joints2d, axis=0) + pad
    return np.array([lo[0], lo[1], hi[0], hi[1]])


def _ray_grid() -> np.ndarray:
    """(N_ELEVATION * N_AZIMUTH, 3) unit directions, elevation-major."""
    az = np.linspace(AZIMUTH_RANGE[0], AZIMUTH_RANGE[1], N_AZIMUTH)
    el = np.linspace(ELEVATION_RANGE[0], ELEVATION_RANGE[1], N_ELEVATION)
    el_g, az_g = np.meshgrid(el, az, indexing="ij")
    dirs = np.stack(
        [np.sin(az_g) * np.cos(el_g), np.sin(el_g), np.cos(az_g) * np.cos(el_g)],
        axis=-1,
    )
    return dirs.reshape(-1, 3)


_RAYS = _ray_grid()


def _capsule_hits(dirs: np.ndarray, p0: np.ndarray, p1: np.ndarray, radius: float) -> np.ndarray:
    """Hit range per ray (inf = miss) for one capsule, origin at the sensor.

    Closest approach between the ray line and the capsule axis, pulled back
    by the chord half-width.
    """
    u = p1 - p0
    c = float(u @ u)
    e = dirs @ p0
    if c < 1e-12:
        s = np.zeros(len(dirs))
    else:
        b = dirs @ u
        f = float(u @ p0)
        denom = c - b * b
        ok = np.abs(denom) > 1e-12
        s = np.where(ok, (e * b - f) / np.where(ok, denom, 1.0), 0.0)
        s = np.clip(s, 0.0, 1.0)
        e = e + s * b
    t = np.maximum(e, 0.0)
    closest = t[:, None] * dirs - (p0 + s[:, None] * (p1 - p0))
    d2 = np.sum(closest * closest, axis=1)
    hit = d2 <= radius * radius
    t_hit = np.where(hit, t - np.sqrt(np.maximum(radius * radius - d2, 0.0)), np.inf)
    return np.where(t_hit > 0.1, t_hit, np.inf)


def _candidate_rays(joints3d: np.ndarray) -> np.ndarray:
    """Flat ray indices whose direction window covers the body plus margin."""
    x, y, z = joints3d[:, 0], joints3d[:, 1], joints3d[:, 2]
    az = np.arctan2(x, z)
    el = np.arctan2(y, np.hypot(x, z))
    margin = np.arctan2(0.25, max(float(np.min(z)), 1.0))
    daz = (AZIMUTH_RANGE[1] - AZIMUTH_RANGE[0]) / (N_AZIMUTH - 1)
    del_ = (ELEVATION_RANGE[1] - ELEVATION_RANGE[0]) / (N_ELEVATION - 1)
    a0 = int(np.floor((az.min() - margin - AZIMUTH_RANGE[0]) / daz))
    a1 = int(np.ceil((az.max() + margin - AZIMUTH_RANGE[0]) / daz))
    e0 = int(np.floor((el.min() - margin - ELEVATION_RANGE[0]) / del_))
    e1 = int(np.ceil((el.max() + margin - ELEVATION_RANGE[0]) / del_))
    a0, a1 = max(a0, 0), min(a1, N_AZIMUTH - 1)
    e0, e1 = max(e0, 0), min(e1, N_ELEVATION - 1)
    if a0 > a1 or e0 > e1:
        return np.zeros(0, dtype=np.int64)
    ei, ai = np.meshgrid(np.arange(e0, e1 + 1), np.arange(a0, a1 + 1), indexing="ij")
    return (ei * N_AZIMUTH + ai).reshape(-1)


def _simulate_lidar(rng, config: GenConfig, bodies: list[np.ndarray], occluded: np.ndarray):
    """Ray-cast every pedestrian and the ground; returns (cloud, per-body counts)."""
    n_rays = len(_RAYS)
    t_body = np.full(n_rays, np.inf)
    owner = np.full(n_rays, -1, dtype=np.int64)
    for p, joints in enumerate(bodies):
        idx = _candidate_rays(joints)
        if len(idx) == 0:
            continue
        sub = _RAYS[idx]
        t_best = np.full(len(idx), np.inf)
        for a, b, r in CAPSULES:
            t_cap = _capsule_hits(sub, joints[a], joints[b], r)
            t_best = np.minimum(t_best, t_cap)
        better = t_best < t_body[idx]
        t_body[idx[better]] = t_best[better]
        owner[idx[better]] = p

    dir_y = _RAYS[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(dir_y > 1e-6, config.ground_y / dir_y, np.inf)
    t_ground = np.where(t_ground <= MAX_GROUND_RANGE, t_ground, np.inf)

    t_final = np.minimum(t_body, t_ground)
    is_body = t_body <= t_ground
    valid = np.isfinite(t_final)

    # Occluded pedestrians keep only a deterministic 30% of their returns.
    for p in np.flatnonzero(occluded):
        mine = valid & is_body & (owner == p)
        drop = rng.random(int(np.sum(mine))) >= 0.3
        mine_idx = np.flatnonzero(mine)[drop]
        valid[mine_idx] = False

    idx = np.flatnonzero(valid)
    t = t_final[idx] + rng.uniform(-RANGE_NOISE, RANGE_NOISE, len(idx))
    xyz = t[:, None] * _RAYS[idx]
    body_mask = is_body[idx]
    intensity = np.where(
        body_mask,
        0.55 + 0.04 * owner[idx],
        0.15,
    ) + rng.uniform(0.0, 0.08, len(idx))

    counts = np.zeros(len(bodies), dtype=np.int64)
    for p in range(len(bodies)):
        counts[p] = int(np.sum(body_mask & (owner[idx] == p)))

    # Guarantee a minimum return count for unoccluded pedestrians.
    extra_xyz, extra_int = [], []
    for p, joints in enumerate(bodies):
        if occluded[p] or counts[p] >= config.min_points:
            continue
        deficit = config.min_points - int(counts[p])
        caps = [CAPSULES[i] for i in rng.integers(0, len(CAPSULES), deficit)]
        for a, b, r in caps:
            s = rng.random()
            axis = joints[b] - joints[a]
            raw = rng.normal(size=3)
            perp = raw - axis * (raw @ axis) / max(float(axis @ axis), 1e-12)
            norm = np.linalg.norm(perp)
            perp = perp / norm if norm > 1e-9 else np.array([1.0, 0.0, 0.0])
            extra_xyz.append(joints[a] + s * axis + r * perp)
            extra_int.append(0.55 + 0.04 * p)
        counts[p] = config.min_points
    if extra_xyz:
        xyz = np.concatenate([xyz, np.array(extra_xyz)])
        intensity = np.concatenate([intensity, np.array(extra_int)])
    return PointCloud(xyz, intensity), counts


def _draw_capsule_2d(img: np.ndarray, a: np.ndarray, b: np.ndarray, r_px: float, color: np.ndarray) -> None:
    h, w = img.shape[:2]
    x_lo = max(int(np.floor(min(a[0], b[0]) - r_px)), 0)
    x_hi = min(int(np.ceil(max(a[0], b[0]) + r_px)) + 1, w)
    y_lo = max(int(np.floor(min(a[1], b[1]) - r_px)), 0)
    y_hi = min(int(np.ceil(max(a[1], b[1]) + r_px)) + 1, h)
    if x_lo >= x_hi or y_lo >= y_hi:
        return
    ys, xs = np.mgrid[y_lo:y_hi, x_lo:x_hi]
    v = b - a
    l2 = float(v @ v)
    px = np.stack([xs, ys], axis=-1).astype(np.float64)
    if l2 < 1e-12:
        d2 = np.sum((px - a) ** 2, axis=-1)
    else:
        s = np.clip(((px - a) @ v) / l2, 0.0, 1.0)
        d2 = np.sum((px - (a + s[..., None] * v)) ** 2, axis=-1)
    mask = d2 <= r_px * r_px
    img[y_lo:y_hi, x_lo:x_hi][mask] = color


def _render(rng, config: GenConfig, cam: CameraIntrinsics, instances: list[GtInstance]) -> np.ndarray:
    h, w = cam.height, cam.width
    img = np.empty((h, w, 3))
    rows = np.arange(h, dtype=np.float64)[:, None, None]
    img[:] = 0.30 + 0.25 * rows / h  # sky-to-road vertical gradient
    horizon = int(np.ceil(cam.cy))
    img[horizon:, :, 1] += 0.06     # faint road tint below the horizon
    # Far pedestrians first so near ones overwrite them.
    order = sorted(range(len(instances)), key=lambda i: -instances[i].box_3d.center[2])
    for i in order:
        inst = instances[i]
        base = rng.uniform(0.35, 0.95, 3)
        z = inst.box_3d.center[2]
        for c_idx, (a, b, r) in enumerate(CAPSULES):
            shade = 0.75 + 0.02 * c_idx
            r_px = max(r * cam.fx / z, 0.7)
            _draw_capsule_2d(
                img, inst.skel_2d.joints[a], inst.skel_2d.joints[b], r_px, base * shade
            )
    img += rng.uniform(-0.02, 0.02, img.shape)
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def generate_scene(
    seed,
    n_pedestrians: int,
    depth_range: tuple = (5.0, 50.0),
    occlusion_rate: float = 0.0,
    *,
    config: GenConfig | None = None,
    scene_id: int = 0,
    anchor_poses=None,
) -> Scene:
    """Build one scene deterministically from its seed.

    Pedestrians stand on the ground plane at sampled depths, posed from the
    anchor set with per-joint noise; the render and the LiDAR scan both see
    exactly the capsule bodies the labels describe.
    """
    if n_pedestrians < 0:
        raise ValueError("n_pedestrians must be non-negative")
    if config is None:
        config = GenConfig(depth_range=depth_range, occlusion_rate=occlusion_rate)
    rng = np.random.default_rng(seed)
    cam = DEFAULT_CAMERA
    poses = anchor_poses if anchor_poses is not None else load_anchor_poses()

    placed: list[tuple[float, float]] = []
    bodies: list[np.ndarray] = []
    for _ in range(n_pedestrians):
        for _attempt in range(40):
            z = rng.uniform(depth_range[0], depth_range[1])
            ext = config.extents
            x_fov = 0.35 * z - 0.5
            x_lo = max(-x_fov, ext.x_min + 0.5)
            x_hi = min(x_fov, ext.x_max - 0.5)
            if x_lo >= x_hi:
                continue
            x = rng.uniform(x_lo, x_hi)
            if all((x - px) ** 2 + (z - pz) ** 2 >= 0.8 ** 2 for px, pz in placed):
                break
        else:
            continue
        placed.append((x, z))
        height = rng.uniform(config.height_range[0], config.height_range[1])
        k = int(rng.integers(0, len(poses)))
        center = np.array([x, config.ground_y - height / 2.0, z])
        joints = center + height * poses.poses_3d[k]
        joints = joints + rng.uniform(-config.joint_noise, config.joint_noise, joints.shape)
        bodies.append(joints)

    occluded = rng.random(len(bodies)) < occlusion_rate if bodies else np.zeros(0, dtype=bool)

    instances = []
    for joints in bodies:
        skel3 = Skeleton3D(joints)
        skel2 = project_skeleton(cam, skel3)
        instances.append(
            GtInstance(
                skel_3d=skel3,
                skel_2d=skel2,
                box_3d=gt_box_3d_from_joints(joints),
                box_2d=gt_box_2d_from_joints(skel2.joints),
            )
        )

    cloud, _counts = _simulate_lidar(rng, config, bodies, occluded)
    image = _render(rng, config, cam, instances)
    return Scene(scene_id=scene_id, camera=cam, image=image, cloud=cloud, gt=instances)


def body_point_count(scene: Scene) -> int:
    """LiDAR returns from pedestrian surfaces (intensity encodes the material:
    body returns sit above 0.4, ground returns below)."""
    return int(np.sum(scene.cloud.intensity >= 0.4))


def generate_dataset(config: GenConfig) -> tuple[DatasetManifest, list[Scene]]:
    """Generate all scenes plus the manifest; same config → bitwise-same output."""
    rng = np.random.default_rng(config.seed)
    scenes = []
    for i in range(config.n_scenes):
        n_ped = int(rng.integers(config.min_pedestrians, config.max_pedestrians + 1))
        scenes.append(
            generate_scene(
                (config.seed, i), n_ped, config.depth_range, config.occlusion_rate,
                config=config, scene_id=i,
            )
        )
    n_val = int(round(config.n_scenes * config.val_fraction))
    n_train = config.n_scenes - n_val
    manifest = DatasetManifest(
        scene_count=config.n_scenes,
        seed=config.seed,
        joint_order=JOINT_NAMES,
        area_extents=config.area_extents,
        splits={
            "train": tuple(range(n_train)),
            "val": tuple(range(n_train, config.n_scenes)),
        },
    )
    return manifest, scenes


# ---------------------------------------------------------------------------
# On-disk layout
# ---------------------------------------------------------------------------

def _scene_blob_path(directory: str, scene_id: int) -> str:
    return os.path.join(directory, "scenes", f"scene_{scene_id:05d}.blob")


def _scene_label_path(directory: str, scene_id: int) -> str:
    return os.path.join(directory, "labels", f"scene_{scene_id:05d}.csv")


def _label_header() -> str:
    cols = ["scene_id", "confidence"]
    cols += [f"{ax}{j}" for j in range(NUM_JOINTS) for ax in ("u", "v")]
    cols += [f"{ax}{j}" for j in range(NUM_JOINTS) for ax in ("x", "y", "z")]
    return ",".join(cols)


def _write_labels(path: str, scene: Scene) -> None:
    lines = [_label_header()]
    for inst in scene.gt:
        vals = [str(scene.scene_id), f"{1.0:.6f}"]
        vals += [f"{v:.6f}" for v in inst.skel_2d.joints.reshape(-1)]
        vals += [f"{v:.6f}" for v in inst.skel_3d.joints.reshape(-1)]
        lines.append(",".join(vals))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_dataset(directory: str, manifest: DatasetManifest, scenes: list[Scene]) -> None:
    """Write manifest + per-scene blobs and label CSVs.

    The blobs hold the authoritative float64 labels; the CSVs are a rounded
    interchange view in the prediction-record format.
    """
    if manifest.scene_count != len(scenes):
        raise ValueError("manifest scene count does not match the scene list")
    os.makedirs(os.path.join(directory, "scenes"), exist_ok=True)
    os.makedirs(os.path.join(directory, "labels"), exist_ok=True)
    lines = [
        f"scene_count={manifest.scene_count}",
        f"seed={manifest.seed}",
        "joint_order=" + ",".join(manifest.joint_order),
        "extents=" + ",".join(repr(float(v)) for v in manifest.area_extents),
    ]
    for name in sorted(manifest.splits):
        lines.append(f"split_{name}=" + ",".join(str(i) for i in manifest.splits[name]))
    with open(os.path.join(directory, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    for scene in scenes:
        cam = scene.camera
        arrays = {
            "image": scene.image,
            "cloud/xyz": scene.cloud.xyz,
            "cloud/intensity": scene.cloud.intensity,
            "cam": np.array([cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height]),
            "gt/joints3d": np.array([i.skel_3d.joints for i in scene.gt]).reshape(-1, NUM_JOINTS, 3),
            "gt/joints2d": np.array([i.skel_2d.joints for i in scene.gt]).reshape(-1, NUM_JOINTS, 2),
            "gt/visibility": np.array([i.skel_3d.visibility for i in scene.gt]).reshape(-1, NUM_JOINTS),
        }
        write_blob(_scene_blob_path(directory, scene.scene_id), arrays)
        _write_labels(_scene_label_path(directory, scene.scene_id), scene)


def read_manifest(directory: str) -> DatasetManifest:
    values: dict[str, str] = {}
    with open(os.path.join(directory, "manifest.txt")) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            values[key] = val
    splits = {}
    for key, val in values.items():
        if key.startswith("split_"):
            splits[key[len("split_"):]] = tuple(int(i) for i in val.split(",") if i != "")
    return DatasetManifest(
        scene_count=int(values["scene_count"]),
        seed=int(values["seed"]),
        joint_order=tuple(values["joint_order"].split(",")),
        area_extents=tuple(float(v) for v in values["extents"].split(",")),
        splits=splits,
    )


def read_scene(directory: str, scene_id: int) -> Scene:
    arrays = read_blob(_scene_blob_path(directory, scene_id))
    fx, fy, cx, cy, w, h = (float(v) for v in arrays["cam"])
    cam = CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=int(w), height=int(h))
    gt = []
    for m in range(arrays["gt/joints3d"].shape[0]):
        j3 = arrays["gt/joints3d"][m]
        j2 = arrays["gt/joints2d"][m]
        vis = arrays["gt/visibility"][m]
        gt.append(
            GtInstance(
                skel_3d=Skeleton3D(j3, vis),
                skel_2d=Skeleton2D(j2, vis),
                box_3d=gt_box_3d_from_joints(j3),
                box_2d=gt_box_2d_from_joints(j2),
            )
        )
    return Scene(
        scene_id=scene_id,
        camera=cam,
        image=arrays["image"],
        cloud=PointCloud(arrays["cloud/xyz"], arrays["cloud/intensity"]),
        gt=gt,
    )


def read_dataset(directory: str) -> tuple[DatasetManifest, list[Scene]]:
    manifest = read_manifest(directory)
    scenes = [read_scene(directory, i) for i in range(manifest.scene_count)]
    return manifest, scenes
