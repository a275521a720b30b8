"""Procedural synthetic driving scenes: oriented vehicle boxes on lane
corridors, a surround camera rig, and simulated radar sweeps.

Every operation is a pure function of (inputs, seed); RNG streams are split
per purpose / per sweep / per view so that evaluation order cannot change
results.  The world frame is the ego frame at t = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .camera import ArrayFeatureProvider, CameraHeadGrid, CameraView
from .geometry import DepthBinSpec, PinholeIntrinsics, SE3Pose
from .radar import ArrayPointProvider, RadarCloud, RadarHeadGrid

# semantic prototype indices used by the oracle feature embeddings
CLASS_BACKGROUND = 0
CLASS_VEHICLE = 1
CLASS_DRIVABLE = 2
CLASS_DIVIDER = 3
CLASS_SKY = -1

BEV_CLASSES = ("vehicle", "drivable", "divider")

DIVIDER_WIDTH = 0.5  # m, rendered width of lane-edge lines
VEHICLE_RCS_MEAN = 12.0
CLUTTER_RCS_MEAN = -2.0
RCS_VEHICLE_THRESHOLD = 5.0  # oracle separates returns by reflectivity


@dataclass
class VehicleBox:
    """Oriented box on the ground plane; center is the 3D box center."""

    center: np.ndarray  # (3,)
    size: np.ndarray  # (3,) length (x at yaw 0), width, height
    yaw: float
    velocity: np.ndarray  # (2,) m/s in the world frame

    def footprint(self, dt: float = 0.0) -> np.ndarray:
        """(4, 2) corner polygon of the footprint at time -dt (counterclockwise)."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        half = 0.5 * self.size[:2]
        local = np.array(
            [[half[0], half[1]], [-half[0], half[1]], [-half[0], -half[1]], [half[0], -half[1]]]
        )
        R = np.array([[c, -s], [s, c]])
        return local @ R.T + self.center[:2] - self.velocity * dt

    def contains_2d(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Point-in-footprint test at t = 0, vectorized over equal shapes."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx = x - self.center[0]
        dy = y - self.center[1]
        lx = c * dx + s * dy
        ly = -s * dx + c * dy
        return (np.abs(lx) <= 0.5 * self.size[0]) & (np.abs(ly) <= 0.5 * self.size[1])


@dataclass
class Lane:
    """A road corridor: a polyline with a metric width."""

    points: np.ndarray  # (M, 2)
    width: float

    def edges(self) -> list[np.ndarray]:
        """The two boundary polylines, offset by +-width/2 along the normals."""
        p = self.points
        d = np.diff(p, axis=0)
        d = d / np.linalg.norm(d, axis=1, keepdims=True)
        # per-vertex normal: average of adjacent segment normals
        seg_n = np.stack([-d[:, 1], d[:, 0]], axis=1)
        vert_n = np.vstack([seg_n[:1], 0.5 * (seg_n[1:] + seg_n[:-1]), seg_n[-1:]])
        vert_n /= np.linalg.norm(vert_n, axis=1, keepdims=True)
        half = 0.5 * self.width
        return [p + half * vert_n, p - half * vert_n]


@dataclass
class RadarConfig:
    n_sweeps: int = 7
    sweep_period: float = 0.1  # s
    points_per_vehicle: int = 8
    clutter_rate: float = 20.0  # expected clutter returns per sweep
    noise_sigma: float = 0.15  # m, position noise
    ego_speed: float = 3.0  # m/s along +y


@dataclass
class Scene:
    seed: int
    vehicles: list[VehicleBox]
    lanes: list[Lane]
    rig: list[CameraView]
    radar: RadarConfig = field(default_factory=RadarConfig)


@dataclass
class SweepSet:
    """Radar sweeps ordered from the current frame into the past."""

    sweeps: list[tuple[RadarCloud, SE3Pose, float]]

    def __post_init__(self):
        stamps = [s[2] for s in self.sweeps]
        if any(b >= a for a, b in zip(stamps, stamps[1:])):
            raise ValueError("sweep timestamps must strictly decrease into the past")

    def __len__(self) -> int:
        return len(self.sweeps)


def default_rig(
    n_cameras: int = 6,
    fx: float = 500.0,
    width: int = 800,
    height: int = 448,
    mount_height: float = 1.8,
    pitch_down: float = math.radians(10.0),
) -> list[CameraView]:
    """Surround rig: evenly spaced yaw, common pitch, shared intrinsics."""
    intr = PinholeIntrinsics(fx=fx, fy=fx, cx=width / 2, cy=height / 2, width=width, height=height)
    base = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])
    cp, sp = math.cos(pitch_down), math.sin(pitch_down)
    pitch = np.array([[1.0, 0.0, 0.0], [0.0, cp, sp], [0.0, -sp, cp]])
    views = []
    for k in range(n_cameras):
        yaw = 2.0 * math.pi * k / n_cameras
        cy_, sy_ = math.cos(yaw), math.sin(yaw)
        Rz = np.array([[cy_, -sy_, 0.0], [sy_, cy_, 0.0], [0.0, 0.0, 1.0]])
        pose = SE3Pose(Rz @ base @ pitch, np.array([0.0, 0.0, mount_height]))
        views.append(CameraView(intr, pose))
    return views


def _boxes_overlap(a: VehicleBox, b: VehicleBox, margin: float = 0.4) -> bool:
    """Separating-axis test on the two footprints, inflated by a margin."""
    pa = a.footprint()
    pb = b.footprint()
    for poly in (pa, pb):
        for i in range(4):
            edge = poly[(i + 1) % 4] - poly[i]
            axis = np.array([-edge[1], edge[0]])
            axis /= np.linalg.norm(axis)
            ra = pa @ axis
            rb = pb @ axis
            if ra.max() + margin <= rb.min() or rb.max() + margin <= ra.min():
                return False
    return True


def gen_scene(
    seed: int,
    n_vehicles: int = 5,
    n_lanes: int = 2,
    max_speed: float = 3.0,
    radar: RadarConfig | None = None,
    max_rejections: int = 10_000,
) -> Scene:
    """Deterministic scene: lane corridors, non-overlapping vehicles on them,
    and the default 6-camera rig."""
    if n_vehicles < 0:
        raise ValueError("n_vehicles must be non-negative")
    rng_lanes = np.random.default_rng([seed, 1])
    rng_veh = np.random.default_rng([seed, 2])

    lanes: list[Lane] = []
    for i in range(n_lanes):
        width = float(rng_lanes.uniform(8.0, 12.0))
        offset = float(rng_lanes.uniform(-8.0, 8.0))
        ys = np.linspace(-55.0, 55.0, 12)
        if i % 2 == 0:  # main corridor along +y
            pts = np.stack([np.full_like(ys, offset), ys], axis=1)
        else:  # cross corridor along +x
            pts = np.stack([ys, np.full_like(ys, offset)], axis=1)
        lanes.append(Lane(points=pts, width=width))

    vehicles: list[VehicleBox] = []
    rejections = 0
    while len(vehicles) < n_vehicles:
        if rejections >= max_rejections:
            raise RuntimeError("vehicle placement failed: too many rejections")
        if lanes:
            lane = lanes[int(rng_veh.integers(len(lanes)))]
            along = float(rng_veh.uniform(6.0, 42.0)) * (1 if rng_veh.random() < 0.5 else -1)
            lateral = float(rng_veh.uniform(-0.5, 0.5)) * max(lane.width - 3.0, 1.0)
            vertical = lane.points[-1] - lane.points[0]
            direction = vertical / np.linalg.norm(vertical)
            normal = np.array([-direction[1], direction[0]])
            anchor = 0.5 * (lane.points[0] + lane.points[-1])
            pos2 = anchor + along * direction + lateral * normal
            yaw = math.atan2(direction[1], direction[0]) + float(rng_veh.normal(0, 0.05))
        else:
            pos2 = rng_veh.uniform(-42.0, 42.0, 2)
            yaw = float(rng_veh.uniform(-math.pi, math.pi))
            direction = np.array([math.cos(yaw), math.sin(yaw)])
        size = np.array(
            [rng_veh.uniform(4.0, 5.2), rng_veh.uniform(1.8, 2.2), rng_veh.uniform(1.4, 1.8)]
        )
        speed = float(rng_veh.uniform(0.0, max_speed))
        box = VehicleBox(
            center=np.array([pos2[0], pos2[1], size[2] / 2]),
            size=size,
            yaw=yaw,
            velocity=speed * direction,
        )
        if np.max(np.abs(pos2)) > 45.0 or any(_boxes_overlap(box, v) for v in vehicles):
            rejections += 1
            continue
        vehicles.append(box)

    return Scene(
        seed=seed,
        vehicles=vehicles,
        lanes=lanes,
        rig=default_rig(),
        radar=radar if radar is not None else RadarConfig(),
    )


# ---------------------------------------------------------------------------
# ground-truth BEV masks
# ---------------------------------------------------------------------------


def _dist_to_polyline(x: np.ndarray, y: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Distance from grid points (H, W) to a polyline (M, 2)."""
    p = np.stack([x, y], axis=-1)[..., None, :]  # (H, W, 1, 2)
    a = pts[:-1][None, None]  # (1, 1, M-1, 2)
    b = pts[1:][None, None]
    ab = b - a
    t = np.sum((p - a) * ab, axis=-1) / np.maximum(np.sum(ab * ab, axis=-1), 1e-12)
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[..., None] * ab
    d = np.linalg.norm(p - closest, axis=-1)
    return d.min(axis=-1)


def render_gt_bev(scene: Scene, grid, classes=BEV_CLASSES) -> np.ndarray:
    """Binary (C, H, W) masks; a cell is set iff its center lies inside a shape."""
    xs, ys = grid.cell_centers()
    out = np.zeros((len(classes), grid.h_bev, grid.w_bev))
    for ci, name in enumerate(classes):
        if name == "vehicle":
            mask = np.zeros(xs.shape, dtype=bool)
            for v in scene.vehicles:
                mask |= v.contains_2d(xs, ys)
        elif name == "drivable":
            mask = np.zeros(xs.shape, dtype=bool)
            for lane in scene.lanes:
                mask |= _dist_to_polyline(xs, ys, lane.points) <= lane.width / 2
        elif name == "divider":
            mask = np.zeros(xs.shape, dtype=bool)
            for lane in scene.lanes:
                for edge in lane.edges():
                    mask |= _dist_to_polyline(xs, ys, edge) <= DIVIDER_WIDTH / 2
        else:
            raise ValueError(f"unknown class {name!r}")
        out[ci] = mask.astype(np.float64)
    return out


# ---------------------------------------------------------------------------
# camera ray casting and the oracle feature provider
# ---------------------------------------------------------------------------


def _ray_box_depth(origin, dirs, box: VehicleBox):
    """Slab test of rays against one upright oriented box; inf when missed.

    Rays are parameterized by camera z-depth: p = origin + s * dirs.
    """
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    R = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])  # world -> box
    o = R @ (origin - box.center)
    d = dirs @ R.T
    half = 0.5 * box.size
    t0 = np.full(dirs.shape[0], -np.inf)
    t1 = np.full(dirs.shape[0], np.inf)
    ok = np.ones(dirs.shape[0], dtype=bool)
    for a in range(3):
        da = d[:, a]
        parallel = np.abs(da) < 1e-12
        with np.errstate(divide="ignore", invalid="ignore"):
            lo = (-half[a] - o[a]) / da
            hi = (half[a] - o[a]) / da
        swap = lo > hi
        lo2 = np.where(swap, hi, lo)
        hi2 = np.where(swap, lo, hi)
        t0 = np.where(parallel, t0, np.maximum(t0, lo2))
        t1 = np.where(parallel, t1, np.minimum(t1, hi2))
        ok &= ~(parallel & (np.abs(o[a]) > half[a]))
    hit = ok & (t1 >= t0) & (t1 > 0)
    entry = np.where(t0 > 0, t0, t1)
    return np.where(hit, entry, np.inf)


def cast_rays(scene: Scene, view: CameraView, pixels: np.ndarray, return_box: bool = False):
    """Nearest-hit depths and classes for pixel rays of one view.

    Returns (depth (N,), class (N,) int); class is CLASS_SKY for misses.
    Depth is camera z-depth, matching the lift parameterization.  With
    ``return_box`` a third array gives the hit vehicle index (-1 elsewhere).
    """
    dirs_cam = np.empty((pixels.shape[0], 3))
    intr = view.intrinsics
    dirs_cam[:, 0] = (pixels[:, 0] - intr.cx) / intr.fx
    dirs_cam[:, 1] = (pixels[:, 1] - intr.cy) / intr.fy
    dirs_cam[:, 2] = 1.0
    dirs = dirs_cam @ view.pose.rotation.T
    origin = view.pose.translation

    depth = np.full(pixels.shape[0], np.inf)
    hit_class = np.full(pixels.shape[0], CLASS_SKY, dtype=np.int64)

    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        s_ground = -origin[2] / dz
    ground_ok = (dz < -1e-9) & (s_ground > 0)
    if np.any(ground_ok):
        gx = origin[0] + s_ground * dirs[:, 0]
        gy = origin[1] + s_ground * dirs[:, 1]
        g_class = np.full(pixels.shape[0], CLASS_BACKGROUND, dtype=np.int64)
        drivable = np.zeros(pixels.shape[0], dtype=bool)
        divider = np.zeros(pixels.shape[0], dtype=bool)
        for lane in scene.lanes:
            dist = _dist_to_polyline(gx[None], gy[None], lane.points)[0]
            drivable |= dist <= lane.width / 2
            for edge in lane.edges():
                divider |= _dist_to_polyline(gx[None], gy[None], edge)[0] <= DIVIDER_WIDTH / 2
        g_class[drivable] = CLASS_DRIVABLE
        g_class[divider] = CLASS_DIVIDER
        depth = np.where(ground_ok, s_ground, depth)
        hit_class = np.where(ground_ok, g_class, hit_class)

    box_index = np.full(pixels.shape[0], -1, dtype=np.int64)
    for bi, box in enumerate(scene.vehicles):
        s_box = _ray_box_depth(origin, dirs, box)
        closer = s_box < depth
        depth = np.where(closer, s_box, depth)
        hit_class = np.where(closer, CLASS_VEHICLE, hit_class)
        box_index = np.where(closer, bi, box_index)
    if return_box:
        return depth, hit_class, box_index
    return depth, hit_class


def class_prototypes(feature_dim: int, n_classes: int = 4, scale: float = 3.0) -> np.ndarray:
    """Fixed per-class embedding vectors: scaled one-hots in the leading dims."""
    if feature_dim < n_classes:
        raise ValueError("feature_dim must be at least the class count")
    protos = np.zeros((n_classes, feature_dim))
    protos[:, :n_classes] = scale * np.eye(n_classes)
    return protos


def oracle_camera_provider(
    scene: Scene,
    bins: DepthBinSpec,
    noise_sigma: float = 0.0,
    stride: int = 8,
    feature_dim: int = 8,
    seed: int | None = None,
    depth_error_frac: float = 0.0,
    miss_fraction: float = 0.0,
) -> ArrayFeatureProvider:
    """Ray-cast ground truth dressed up as backbone head outputs.

    Depth logits carry a bump of one-bin width (amplitude 10) at the true
    depth, plus optional logit noise; opacity is high on surface hits and low
    on sky or out-of-range hits; features are per-class embeddings; offsets
    are zero.

    Two degradation knobs emulate monocular failure modes for the fit demo:
    ``depth_error_frac`` displaces each bump center by N(0, (frac * depth)^2),
    and ``miss_fraction`` suppresses (per-vehicle, seeded) that share of
    vehicles entirely, as if unseen by the camera.  Both default to off, which
    is the pure-oracle contract.
    """
    if noise_sigma < 0 or depth_error_frac < 0 or not (0 <= miss_fraction <= 1):
        raise ValueError("invalid degradation parameters")
    base_seed = scene.seed if seed is None else seed
    protos = class_prototypes(feature_dim)
    n_veh = len(scene.vehicles)
    n_missed = int(round(miss_fraction * n_veh))
    missed_boxes = np.zeros(n_veh, dtype=bool)
    if n_missed:
        order = np.random.default_rng([base_seed, 17]).permutation(n_veh)
        missed_boxes[order[:n_missed]] = True
    grids = []
    for vi, view in enumerate(scene.rig):
        rng = np.random.default_rng([base_seed, 11, vi])
        h_low = view.intrinsics.height // stride
        w_low = view.intrinsics.width // stride
        rows, cols = np.meshgrid(np.arange(h_low), np.arange(w_low), indexing="ij")
        pixels = np.stack(
            [(cols + 0.5) * stride, (rows + 0.5) * stride], axis=-1
        ).reshape(-1, 2)
        depth, hit_class, box_index = cast_rays(scene, view, pixels, return_box=True)

        if depth_error_frac > 0:
            jitter = rng.normal(0.0, 1.0, depth.shape)
            with np.errstate(invalid="ignore"):
                depth = np.where(
                    np.isfinite(depth), depth * (1.0 + depth_error_frac * jitter), depth
                )

        in_range = np.isfinite(depth) & (depth >= bins.d_min) & (depth <= bins.d_max)
        frac_bin = (depth - bins.d_min) / bins.bin_width - 0.5
        frac_bin = np.where(in_range, frac_bin, 0.0)
        idx = np.arange(bins.n_bins)
        logits = 10.0 * np.exp(-0.5 * (idx[None, :] - frac_bin[:, None]) ** 2)
        logits[~in_range] = 0.0
        if noise_sigma > 0:
            logits = logits + rng.normal(0.0, noise_sigma, logits.shape)

        visible = in_range & (hit_class != CLASS_SKY)
        if np.any(missed_boxes):
            visible &= ~((box_index >= 0) & missed_boxes[np.maximum(box_index, 0)])
        opacity_logits = np.where(visible, 4.0, -8.0)

        feats = protos[np.maximum(hit_class, 0)]
        feats = feats + rng.normal(0.0, 0.05, feats.shape)
        feats[~visible] = 0.0

        grids.append(
            CameraHeadGrid(
                depth_logits=logits.reshape(h_low, w_low, bins.n_bins),
                offsets=np.zeros((h_low, w_low, 3)),
                opacity_logits=opacity_logits.reshape(h_low, w_low),
                features=feats.reshape(h_low, w_low, feature_dim),
            )
        )
    return ArrayFeatureProvider(grids)


# ---------------------------------------------------------------------------
# radar simulation and the oracle point provider
# ---------------------------------------------------------------------------


def _ego_pose_at(scene: Scene, dt: float) -> SE3Pose:
    ego_v = np.array([0.0, scene.radar.ego_speed, 0.0])
    return SE3Pose(np.eye(3), -ego_v * dt)


def sample_radar(
    scene: Scene,
    n_sweeps: int | None = None,
    points_per_vehicle: int | None = None,
    clutter_rate: float | None = None,
    noise_sigma: float | None = None,
) -> SweepSet:
    """Simulate radar sweeps: returns sampled on the ego-facing faces of each
    vehicle (at its position when the sweep was taken) plus uniform clutter.

    Points are stored in their sweep's ego frame; no occlusion model.
    """
    cfg = scene.radar
    n_sweeps = cfg.n_sweeps if n_sweeps is None else n_sweeps
    ppv = cfg.points_per_vehicle if points_per_vehicle is None else points_per_vehicle
    rate = cfg.clutter_rate if clutter_rate is None else clutter_rate
    sigma = cfg.noise_sigma if noise_sigma is None else noise_sigma
    if n_sweeps < 1:
        raise ValueError("need at least one sweep")
    if rate < 0 or sigma < 0 or ppv < 0:
        raise ValueError("rates must be non-negative")

    sweeps = []
    for k in range(n_sweeps):
        dt = k * cfg.sweep_period
        pose = _ego_pose_at(scene, dt)
        ego_pos = pose.translation
        rng = np.random.default_rng([scene.seed, 23, k])

        pos, rcs, vel = [], [], []
        for box in scene.vehicles:
            center2 = box.center[:2] - box.velocity * dt
            c, s = math.cos(box.yaw), math.sin(box.yaw)
            R2 = np.array([[c, -s], [s, c]])
            axes = [R2 @ np.array([1.0, 0.0]), R2 @ np.array([0.0, 1.0])]
            half = 0.5 * box.size
            faces = []  # (face center 2d, tangent, half-extent along tangent, normal)
            for a in range(2):
                n_axis = axes[a]
                t_axis = axes[1 - a]
                for sign in (1.0, -1.0):
                    fc = center2 + sign * half[a] * n_axis
                    normal = sign * n_axis
                    if normal @ (ego_pos[:2] - fc) > 0:
                        faces.append((fc, t_axis, half[1 - a]))
            if not faces:
                continue
            pick = rng.integers(0, len(faces), ppv)
            offs = rng.uniform(-1.0, 1.0, ppv)
            zs = rng.uniform(0.2, 0.9 * box.size[2], ppv)
            for j in range(ppv):
                fc, t_axis, ext = faces[int(pick[j])]
                p2 = fc + offs[j] * ext * t_axis
                pos.append([p2[0], p2[1], zs[j]])
                rcs.append(rng.normal(VEHICLE_RCS_MEAN, 2.0))
                vel.append(box.velocity)
        n_clutter = int(rng.poisson(rate))
        for _ in range(n_clutter):
            pos.append(
                [rng.uniform(-55, 55), rng.uniform(-55, 55), rng.uniform(0.0, 3.0)]
            )
            rcs.append(rng.normal(CLUTTER_RCS_MEAN, 2.0))
            vel.append(np.zeros(2))

        pos = np.asarray(pos, dtype=np.float64).reshape(-1, 3)
        if pos.shape[0]:
            pos = pos + rng.normal(0.0, sigma, pos.shape)
        # world -> sweep frame
        pos_local = pose.inverse().apply(pos) if pos.shape[0] else pos
        cloud = RadarCloud(
            pos_local,
            np.asarray(rcs, dtype=np.float64),
            np.asarray(vel, dtype=np.float64).reshape(-1, 2),
            np.full(pos.shape[0], dt),
        )
        sweeps.append((cloud, pose, -dt))
    return SweepSet(sweeps)


class OracleRadarProvider:
    """Head outputs from the measurement channels: high-RCS returns are kept
    with a vehicle embedding, low-RCS clutter is suppressed."""

    def __init__(self, feature_dim: int = 8, seed: int = 0,
                 sigma_xy: float = 0.5, sigma_z: float = 0.3):
        self.feature_dim = feature_dim
        self.seed = seed
        # raw diagonal values whose softplus equals the target variances
        self._raw_xy = float(np.log(np.expm1(sigma_xy**2)))
        self._raw_z = float(np.log(np.expm1(sigma_z**2)))

    def heads(self, cloud: RadarCloud) -> RadarHeadGrid:
        n = len(cloud)
        rng = np.random.default_rng([self.seed, 31])
        protos = class_prototypes(self.feature_dim)
        cov6 = np.zeros((n, 6))
        cov6[:, 0] = self._raw_xy
        cov6[:, 3] = self._raw_xy
        cov6[:, 5] = self._raw_z
        is_vehicle = cloud.rcs > RCS_VEHICLE_THRESHOLD
        feats = np.where(
            is_vehicle[:, None], protos[CLASS_VEHICLE], protos[CLASS_BACKGROUND]
        )
        feats = feats + rng.normal(0.0, 0.05, feats.shape)
        return RadarHeadGrid(
            offsets=np.zeros((n, 3)),
            cov6=cov6,
            opacity_logits=np.where(is_vehicle, 4.0, -8.0),
            features=feats,
        )


def oracle_radar_provider(
    scene: Scene, feature_dim: int = 8, seed: int | None = None
) -> ArrayPointProvider | OracleRadarProvider:
    return OracleRadarProvider(
        feature_dim=feature_dim, seed=scene.seed if seed is None else seed
    )
