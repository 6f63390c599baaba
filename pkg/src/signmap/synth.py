"""Synthetic scene oracle.

Builds a complete, ground-truth-known input bundle for the whole pipeline:
a sparse reconstruction (signs as planar point clusters tracked across a
camera trajectory), segmentation masks, detections, dense-over-sign distance
maps, a GPS trace, registered poses and geo-registration correspondences.
Everything is deterministic given the scene seed; noise magnitudes are all
independently configurable so each stage can be tested against exact truth.

The on-disk model is written in a seeded, hidden similarity frame so that
the geo-registration step is exercised end to end; the in-memory world keeps
the ENU (registered) reconstruction for direct use in tests.
"""

from __future__ import annotations

import datetime
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .geodesy import (EnuFrame, GeodeticCoord, SimilarityTransform, enu_unproject,
                      write_georegistration)
from .metadata import MetadataEntry, MetadataStore, write_metadata
from .pose import (GpsSample, GpsTrace, write_frame_times, write_gps_trace,
                   write_registered_poses)
from .realtime import DistanceMap, empty_distance_map, write_distance_map
from .rotations import quat_to_rotmat, rot_x, rot_y, rot_z
from .semantics import (ClassPalette, Detection, DetectionSet, SegmentationMask,
                        write_detections, write_mask, write_palette)
from .sfm import (CameraIntrinsics, CameraModel, CameraPose, ImageRecord, Keypoint,
                  Reconstruction, ScenePoint, transform_reconstruction, write_model)

TRUTH_DATE = datetime.date(2026, 1, 1)
SIGN_CLASS_ID = 1
SIGN_CLASS_NAME = "traffic-sign"

DEFAULT_ORIGIN = GeodeticCoord(60.19, 24.83, 20.0)

# rng stream ids; per-frame streams append the frame index
_S_KEYPOINT, _S_DROPOUT, _S_DMAP, _S_GPS, _S_JITTER, _S_MODEL_FRAME, _S_SIGN = range(1, 8)

_FACE_MARGIN = 0.8          # face points stay inside the rendered quad
_MASK_PAD_PX = 0.5          # half-pixel dilation so border keypoints stay on-class
_MIN_OBLIQUE_COS = 0.05     # below this the quad degenerates in the image
_MIN_DETECTION_COS = 0.5    # detectors do not fire on near-edge-on signs


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


@dataclass(frozen=True)
class NoiseConfig:
    gps_sigma: float = 0.0
    distance_map_rel_sigma: float = 0.0
    keypoint_sigma: float = 0.0
    detection_dropout: float = 0.0
    pose_jitter_deg: float = 0.0

    def __post_init__(self):
        values = (self.gps_sigma, self.distance_map_rel_sigma, self.keypoint_sigma,
                  self.detection_dropout, self.pose_jitter_deg)
        if any(v < 0 for v in values):
            raise ValidationError("noise magnitudes must be non-negative")
        if not 0.0 <= self.detection_dropout <= 1.0:
            raise ValidationError("detection_dropout must be a probability")


@dataclass(frozen=True)
class SignSpec:
    class_name: str
    position: np.ndarray      # ENU meters
    face_points: int = 9

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        if self.face_points < 1:
            raise ValidationError("face_points must be at least 1")


@dataclass(frozen=True)
class TrajectoryPoint:
    position: np.ndarray      # ENU camera center
    heading: np.ndarray       # unit (east, north)

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        h = np.asarray(self.heading, dtype=float)
        norm = float(np.linalg.norm(h))
        if norm < 1e-12:
            raise ValidationError("heading must be non-zero")
        object.__setattr__(self, "heading", h / norm)


@dataclass(frozen=True)
class SyntheticScene:
    signs: tuple[SignSpec, ...]
    trajectory: tuple[TrajectoryPoint, ...]
    intrinsics: CameraIntrinsics
    origin: GeodeticCoord = DEFAULT_ORIGIN
    mount_rpy_deg: tuple[float, float, float] = (0.0, 0.0, 0.0)
    noise: NoiseConfig = NoiseConfig()
    seed: int = 0
    frame_rate_hz: float = 10.0
    registered_stride: int = 30
    sign_size_m: float = 0.6
    detection_max_range_m: float = 60.0

    def __post_init__(self):
        object.__setattr__(self, "signs", tuple(self.signs))
        object.__setattr__(self, "trajectory", tuple(self.trajectory))
        if not self.trajectory:
            raise ValidationError("scene needs at least one trajectory point")
        if self.frame_rate_hz <= 0 or self.registered_stride < 1 or self.sign_size_m <= 0:
            raise ValidationError("invalid scene parameters")
        if self.detection_max_range_m <= 0:
            raise ValidationError("detection_max_range_m must be positive")

    def mount_matrix(self) -> np.ndarray:
        roll, pitch, yaw = (math.radians(v) for v in self.mount_rpy_deg)
        return rot_z(yaw) @ rot_y(pitch) @ rot_x(roll)


def default_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(1, CameraModel.PINHOLE, 640, 480, 600.0, 600.0, 320.0, 240.0)


def _preset_intrinsics() -> CameraIntrinsics:
    # smaller rasters keep rendered bundles light; at the 60 m detection
    # range the face corners still separate from the box center by 2 px
    return CameraIntrinsics(1, CameraModel.PINHOLE, 480, 360, 500.0, 500.0,
                            240.0, 180.0)


def frame_name(i: int) -> str:
    return f"frame_{i:05d}.png"


def _camera_rotation_cw(heading: np.ndarray, mount: np.ndarray) -> np.ndarray:
    forward = np.array([heading[0], heading[1], 0.0])
    right = np.array([heading[1], -heading[0], 0.0])
    down = np.array([0.0, 0.0, -1.0])
    vehicle_to_world = np.column_stack([right, down, forward])
    return vehicle_to_world @ mount


def _sign_axes(sign: SignSpec, trajectory) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Face normal (toward oncoming traffic), lateral and up axes of a sign."""
    dists = [np.linalg.norm(tp.position[:2] - sign.position[:2]) for tp in trajectory]
    nearest = trajectory[int(np.argmin(dists))]
    normal = -np.array([nearest.heading[0], nearest.heading[1], 0.0])
    up = np.array([0.0, 0.0, 1.0])
    lateral = np.cross(up, normal)
    lateral /= np.linalg.norm(lateral)
    return normal, lateral, up


def _face_grid(sign: SignSpec, lateral, up, half: float) -> np.ndarray:
    g = max(1, math.ceil(math.sqrt(sign.face_points)))
    offsets = np.linspace(-1.0, 1.0, g) if g > 1 else np.array([0.0])
    pts = []
    for b in offsets:
        for a in offsets:
            pts.append(sign.position + half * _FACE_MARGIN * (a * lateral + b * up))
            if len(pts) == sign.face_points:
                return np.array(pts)
    return np.array(pts)


def _quad_corners(sign: SignSpec, lateral, up, half: float) -> np.ndarray:
    return np.array([
        sign.position + half * (-lateral + up),
        sign.position + half * (lateral + up),
        sign.position + half * (lateral - up),
        sign.position + half * (-lateral - up),
    ])


def _project_many(k: CameraIntrinsics, r_wc, t_wc, pts) -> tuple[np.ndarray, np.ndarray]:
    cam = pts @ r_wc.T + t_wc
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * cam[:, 0] / z + k.cx
        v = k.fy * cam[:, 1] / z + k.cy
    return np.column_stack([u, v]), z


def _inside_quad(px: np.ndarray, py: np.ndarray, quad_uv: np.ndarray,
                 pad: float) -> np.ndarray:
    """Point-in-convex-quad test with a pad (in pixels) of dilation."""
    inside_pos = np.ones(px.shape, dtype=bool)
    inside_neg = np.ones(px.shape, dtype=bool)
    for i in range(4):
        ax, ay = quad_uv[i]
        bx, by = quad_uv[(i + 1) % 4]
        ex, ey = bx - ax, by - ay
        elen = math.hypot(ex, ey)
        if elen < 1e-12:
            continue
        cross = ex * (py - ay) - ey * (px - ax)
        inside_pos &= cross >= -pad * elen
        inside_neg &= cross <= pad * elen
    return inside_pos | inside_neg


@dataclass
class World:
    """In-memory rendering of a scene: every pipeline input plus the truth."""

    scene: SyntheticScene
    frame: EnuFrame
    reconstruction: Reconstruction            # ENU, geo-registered
    model_transform: SimilarityTransform      # hidden model frame -> ENU
    masks: dict[str, SegmentationMask]
    detections: dict[str, DetectionSet]
    distance_maps: dict[str, DistanceMap]
    gps: GpsTrace
    frame_times: list[tuple[str, float]]
    registered_poses: dict[str, CameraPose]
    georegistration: list[tuple[str, GeodeticCoord]]
    truth: MetadataStore
    palette: ClassPalette
    sign_family: frozenset[int]
    invisible_signs: list[str] = field(default_factory=list)

    def model_frame_reconstruction(self) -> Reconstruction:
        return transform_reconstruction(self.reconstruction,
                                        self.model_transform.inverse(),
                                        geo_registered=False)


def build_world(scene: SyntheticScene) -> World:
    k = scene.intrinsics
    mount = scene.mount_matrix()
    enu_frame = EnuFrame.at(scene.origin)
    half = scene.sign_size_m / 2.0
    n_frames = len(scene.trajectory)

    # exact camera poses (world -> camera) per frame
    rotations_cw = [_camera_rotation_cw(tp.heading, mount) for tp in scene.trajectory]
    centers = [tp.position for tp in scene.trajectory]
    poses_wc = []
    for r_cw, c in zip(rotations_cw, centers):
        r_wc = r_cw.T
        poses_wc.append(CameraPose.from_matrix(r_wc, -(r_wc @ c)))

    # sign geometry and per-sign deterministic colors
    sign_axes = [_sign_axes(s, scene.trajectory) for s in scene.signs]
    face_pts = [_face_grid(s, lat, up, half) for s, (_, lat, up) in zip(scene.signs, sign_axes)]
    colors = [tuple(int(v) for v in _rng(scene.seed, _S_SIGN, si).integers(0, 256, 3))
              for si in range(len(scene.signs))]

    # observations: (sign, point) -> list of (frame, u, v)
    observations: dict[tuple[int, int], list[tuple[int, float, float]]] = {}
    sign_visible_frames: dict[int, set[int]] = {si: set() for si in range(len(scene.signs))}
    quad_uv_cache: dict[tuple[int, int], np.ndarray] = {}
    view_cos_cache: dict[tuple[int, int], float] = {}

    for fi in range(n_frames):
        pose = poses_wc[fi]
        r_wc = pose.rotation_matrix()
        t_wc = pose.translation_wc
        kp_rng = _rng(scene.seed, _S_KEYPOINT, fi)
        for si, sign in enumerate(scene.signs):
            normal, lateral, up = sign_axes[si]
            corners = _quad_corners(sign, lateral, up, half)
            uv_c, z_c = _project_many(k, r_wc, t_wc, corners)
            if np.any(z_c <= 1e-3):
                continue
            # skip nearly edge-on views: the quad degenerates in the image
            view_dir = sign.position - centers[fi]
            view_dir = view_dir / np.linalg.norm(view_dir)
            view_cos = abs(float(np.dot(view_dir, normal)))
            if view_cos < _MIN_OBLIQUE_COS:
                continue
            if uv_c[:, 0].max() < 0 or uv_c[:, 0].min() >= k.width \
                    or uv_c[:, 1].max() < 0 or uv_c[:, 1].min() >= k.height:
                continue
            quad_uv_cache[(fi, si)] = uv_c
            view_cos_cache[(fi, si)] = view_cos
            sign_visible_frames[si].add(fi)
            uv_p, z_p = _project_many(k, r_wc, t_wc, face_pts[si])
            if scene.noise.keypoint_sigma > 0:
                uv_p = uv_p + kp_rng.normal(0.0, scene.noise.keypoint_sigma, uv_p.shape)
            for pi in range(len(face_pts[si])):
                if z_p[pi] <= 1e-3:
                    continue
                u, v = float(uv_p[pi, 0]), float(uv_p[pi, 1])
                if not (0.0 <= u < k.width and 0.0 <= v < k.height):
                    continue
                observations.setdefault((si, pi), []).append((fi, u, v))

    # points observed at least twice triangulate; the rest stay unmatched
    surviving = {key for key, obs in observations.items() if len(obs) >= 2}
    point_ids: dict[tuple[int, int], int] = {}
    for key in sorted(surviving):
        point_ids[key] = len(point_ids) + 1

    image_keypoints: dict[int, list[Keypoint]] = {fi: [] for fi in range(n_frames)}
    tracks: dict[int, list[tuple[int, int]]] = {pid: [] for pid in point_ids.values()}
    for key in sorted(observations):
        pid = point_ids.get(key)
        for fi, u, v in observations[key]:
            kps = image_keypoints[fi]
            if pid is None:
                kps.append(Keypoint(u, v, None))
            else:
                tracks[pid].append((fi + 1, len(kps)))
                kps.append(Keypoint(u, v, pid))

    images = {}
    for fi in range(n_frames):
        images[fi + 1] = ImageRecord(fi + 1, frame_name(fi), poses_wc[fi], 1,
                                     tuple(image_keypoints[fi]))
    points = {}
    for key, pid in point_ids.items():
        si, pi = key
        # reported reprojection error = worst distance between the stored
        # (possibly noise-shifted) keypoints and the exact projections
        worst_err = 0.0
        if scene.noise.keypoint_sigma > 0:
            for image_id, kp_index in sorted(tracks[pid]):
                kp = image_keypoints[image_id - 1][kp_index]
                uv = _project_many(k, poses_wc[image_id - 1].rotation_matrix(),
                                   poses_wc[image_id - 1].translation_wc,
                                   face_pts[si][pi][None, :])[0][0]
                worst_err = max(worst_err, math.hypot(kp.x - uv[0], kp.y - uv[1]))
        points[pid] = ScenePoint(pid, face_pts[si][pi], colors[si], worst_err,
                                 tuple(sorted(tracks[pid])))
    reconstruction = Reconstruction(cameras={1: k}, images=images, points=points,
                                    geo_registered=True)

    # masks, detections, distance maps
    masks: dict[str, SegmentationMask] = {}
    detections: dict[str, DetectionSet] = {}
    distance_maps: dict[str, DistanceMap] = {}
    xs = np.arange(k.width, dtype=float)
    ys = np.arange(k.height, dtype=float)

    for fi in range(n_frames):
        name = frame_name(fi)
        pose = poses_wc[fi]
        r_wc = pose.rotation_matrix()
        t_wc = pose.translation_wc
        mask = np.zeros((k.height, k.width), dtype=np.uint16)
        dmap = empty_distance_map(name, k.width, k.height)
        dets: list[tuple[Detection, int]] = []
        drop_rng = _rng(scene.seed, _S_DROPOUT, fi)

        for si, sign in enumerate(scene.signs):
            uv_c = quad_uv_cache.get((fi, si))
            if uv_c is None:
                continue
            normal, lateral, up = sign_axes[si]
            x0 = max(0, int(math.floor(uv_c[:, 0].min() - 1)))
            x1 = min(k.width - 1, int(math.ceil(uv_c[:, 0].max() + 1)))
            y0 = max(0, int(math.floor(uv_c[:, 1].min() - 1)))
            y1 = min(k.height - 1, int(math.ceil(uv_c[:, 1].max() + 1)))
            if x0 > x1 or y0 > y1:
                continue
            gx, gy = np.meshgrid(xs[x0:x1 + 1], ys[y0:y1 + 1])
            inside = _inside_quad(gx, gy, uv_c, _MASK_PAD_PX)
            if not inside.any():
                continue
            mask[y0:y1 + 1, x0:x1 + 1][inside] = SIGN_CLASS_ID

            # ray-plane intersection for every covered pixel (camera frame)
            p0_c = r_wc @ sign.position + t_wc
            n_c = r_wc @ normal
            dirs = np.stack([(gx - k.cx) / k.fx, (gy - k.cy) / k.fy, np.ones_like(gx)],
                            axis=-1)
            denom = dirs @ n_c
            with np.errstate(divide="ignore", invalid="ignore"):
                t_hit = (n_c @ p0_c) / denom
            b_vals = dirs * t_hit[..., None]
            valid = inside & np.isfinite(t_hit) & (t_hit > 1e-3)
            region = dmap[y0:y1 + 1, x0:x1 + 1]
            current_depth = region[..., 2]
            better = valid & (~np.isfinite(current_depth) | (b_vals[..., 2] < current_depth))
            region[better] = b_vals[better].astype(np.float32)

            # a detection requires the whole face inside the image, a sign
            # within detector range (past ~100 m separate signs collapse onto
            # the same pixels) and a face angled toward the camera
            fully_visible = (uv_c[:, 0].min() >= 0 and uv_c[:, 0].max() <= k.width - 1
                             and uv_c[:, 1].min() >= 0 and uv_c[:, 1].max() <= k.height - 1)
            in_range = (float(np.linalg.norm(sign.position - centers[fi]))
                        <= scene.detection_max_range_m)
            facing = view_cos_cache[(fi, si)] >= _MIN_DETECTION_COS
            bbox_w = uv_c[:, 0].max() - uv_c[:, 0].min()
            bbox_h = uv_c[:, 1].max() - uv_c[:, 1].min()
            dropped = drop_rng.random() < scene.noise.detection_dropout
            if fully_visible and in_range and facing and bbox_w >= 2 and bbox_h >= 2 \
                    and not dropped:
                dets.append((Detection(sign.class_name, 1.0,
                                       (float(uv_c[:, 0].min()), float(uv_c[:, 1].min()),
                                        float(uv_c[:, 0].max()), float(uv_c[:, 1].max()))),
                             si))

        # registered keypoints carry the exact camera-frame offset of their
        # 3D point; pixel collisions keep the smaller depth (an independent
        # homogeneous-matrix path from the one in generate_sparse_labels)
        t44 = np.eye(4)
        t44[:3, :3] = r_wc
        t44[:3, 3] = t_wc
        image = images[fi + 1]
        kp_best: dict[tuple[int, int], np.ndarray] = {}
        for kp in image.keypoints:
            if kp.point3d_id is None:
                continue
            ix, iy = int(round(kp.x)), int(round(kp.y))
            if not (0 <= ix < k.width and 0 <= iy < k.height):
                continue
            p_h = np.append(points[kp.point3d_id].xyz, 1.0)
            # depth ties compare at storage precision (first keypoint wins,
            # the same rule the sparse-label generator applies)
            b = (t44 @ p_h)[:3].astype(np.float32)
            key = (ix, iy)
            if key not in kp_best or b[2] < kp_best[key][2]:
                kp_best[key] = b
        for (ix, iy), b in kp_best.items():
            dmap[iy, ix] = b

        if scene.noise.distance_map_rel_sigma > 0:
            labeled = np.all(np.isfinite(dmap), axis=2)
            n_labeled = int(labeled.sum())
            if n_labeled:
                noise = _rng(scene.seed, _S_DMAP, fi).normal(
                    0.0, scene.noise.distance_map_rel_sigma, (n_labeled, 3))
                dmap[labeled] = dmap[labeled] * (1.0 + noise).astype(np.float32)

        # the box-center pixel encodes the sign position itself: the exact
        # inverse of the online reading convention; keypoint-exact values
        # keep priority so the sparse-label cross-check holds at their pixels
        dmap_rng = _rng(scene.seed, _S_DMAP, fi, 1)
        for det, si in dets:
            centroid = face_pts[si].mean(axis=0)
            b = (t44 @ np.append(centroid, 1.0))[:3]
            if scene.noise.distance_map_rel_sigma > 0:
                b = b * (1.0 + dmap_rng.normal(0.0, scene.noise.distance_map_rel_sigma, 3))
            cx, cy = det.center()
            ix = min(max(int(round(cx)), 0), k.width - 1)
            iy = min(max(int(round(cy)), 0), k.height - 1)
            if (ix, iy) not in kp_best:
                dmap[iy, ix] = b.astype(np.float32)

        masks[name] = SegmentationMask(name, mask)
        detections[name] = DetectionSet(name, tuple(d for d, _ in dets))
        distance_maps[name] = DistanceMap(name, dmap)

    # GPS trace and frame times
    gps_samples = []
    frame_times = []
    for fi in range(n_frames):
        t = fi / scene.frame_rate_hz
        pos = centers[fi]
        if scene.noise.gps_sigma > 0:
            pos = pos + _rng(scene.seed, _S_GPS, fi).normal(0.0, scene.noise.gps_sigma, 3)
        gps_samples.append(GpsSample(t, enu_unproject(enu_frame, pos)))
        frame_times.append((frame_name(fi), t))
    gps = GpsTrace(gps_samples)

    # registered poses at the configured stride, rotation jitter per noise
    registered: dict[str, CameraPose] = {}
    for fi in range(0, n_frames, scene.registered_stride):
        pose = poses_wc[fi]
        r_wc = pose.rotation_matrix()
        if scene.noise.pose_jitter_deg > 0:
            rng = _rng(scene.seed, _S_JITTER, fi)
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            angle = math.radians(rng.normal(0.0, scene.noise.pose_jitter_deg))
            kmat = np.array([[0, -axis[2], axis[1]],
                             [axis[2], 0, -axis[0]],
                             [-axis[1], axis[0], 0]])
            jitter = np.eye(3) + math.sin(angle) * kmat + (1 - math.cos(angle)) * kmat @ kmat
            r_wc = jitter @ r_wc
        registered[frame_name(fi)] = CameraPose.from_matrix(r_wc, -(r_wc @ centers[fi]))

    # exact geo-registration correspondences over spread-out frames
    idxs = sorted(set(int(round(v)) for v in np.linspace(0, n_frames - 1, min(n_frames, 6))))
    georegistration = [(frame_name(fi), enu_unproject(enu_frame, centers[fi]))
                       for fi in idxs]

    # ground truth: one entry per sign at its face-point centroid
    truth_entries = []
    invisible = []
    for si, sign in enumerate(scene.signs):
        centroid = face_pts[si].mean(axis=0)
        coord = enu_unproject(enu_frame, centroid)
        truth_entries.append(MetadataEntry(coord.lat_deg, coord.lon_deg,
                                           sign.class_name, colors[si], TRUTH_DATE))
        if not sign_visible_frames[si]:
            invisible.append(sign.class_name)
            warnings.warn(f"sign {si} ({sign.class_name}) is never visible from any frame")
    truth = MetadataStore(truth_entries, enu_frame)

    # hidden model frame for the on-disk reconstruction
    xf_rng = _rng(scene.seed, _S_MODEL_FRAME)
    q = xf_rng.normal(size=4)
    rotation = quat_to_rotmat(q / np.linalg.norm(q))
    scale = math.exp(xf_rng.uniform(math.log(0.5), math.log(2.0)))
    translation = xf_rng.uniform(-200.0, 200.0, 3)
    model_transform = SimilarityTransform(scale, rotation, translation)

    palette = ClassPalette({SIGN_CLASS_ID: SIGN_CLASS_NAME})
    return World(scene=scene, frame=enu_frame, reconstruction=reconstruction,
                 model_transform=model_transform, masks=masks, detections=detections,
                 distance_maps=distance_maps, gps=gps, frame_times=frame_times,
                 registered_poses=registered, georegistration=georegistration,
                 truth=truth, palette=palette,
                 sign_family=frozenset({SIGN_CLASS_ID}), invisible_signs=invisible)


def render_scene(scene: SyntheticScene, out_dir) -> World:
    """Render a scene to a bundle directory of pipeline input files."""
    world = build_world(scene)
    out = Path(out_dir)
    (out / "model").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    (out / "dmaps").mkdir(exist_ok=True)

    write_model(world.model_frame_reconstruction(), out / "model")
    write_georegistration(world.georegistration, out / "georegistration.csv")
    write_palette(world.palette, out / "palette.txt")
    for name in sorted(world.masks):
        write_mask(world.masks[name], out / "masks" / f"{name}.pgm")
    write_detections(world.detections.values(), out / "detections.jsonl")
    for name in sorted(world.distance_maps):
        write_distance_map(world.distance_maps[name], out / "dmaps" / f"{name}.b3dm")
    write_gps_trace(world.gps, out / "gps.csv")
    write_frame_times(world.frame_times, out / "frame_times.csv")
    write_registered_poses(world.registered_poses, out / "registered_poses.csv")
    write_metadata(world.truth, out / "truth_metadata.csv")
    origin = world.frame.origin
    (out / "enu_origin.json").write_text(json.dumps(
        {"lat_deg": origin.lat_deg, "lon_deg": origin.lon_deg, "alt_m": origin.alt_m},
        indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "scene.json").write_text(scene_to_json(scene), encoding="utf-8")
    return world


def mutate_scene(scene: SyntheticScene, script) -> SyntheticScene:
    """Apply add/remove edits: each item is ("add"|"remove", class_name,
    position). Removal targets the nearest same-class sign within 1 m."""
    signs = list(scene.signs)
    for op, class_name, position in script:
        position = np.asarray(position, dtype=float)
        if op == "add":
            signs.append(SignSpec(class_name, position))
        elif op == "remove":
            best, best_dist = None, None
            for i, sign in enumerate(signs):
                if sign.class_name != class_name:
                    continue
                dist = float(np.linalg.norm(sign.position - position))
                if dist <= 1.0 and (best_dist is None or dist < best_dist):
                    best, best_dist = i, dist
            if best is None:
                raise ValidationError(
                    f"no {class_name!r} sign within 1 m of {position} to remove")
            del signs[best]
        else:
            raise ValidationError(f"unknown scene edit {op!r}")
    return replace(scene, signs=tuple(signs))


# --- scene (de)serialization --------------------------------------------------

def scene_to_json(scene: SyntheticScene) -> str:
    k = scene.intrinsics
    obj = {
        "seed": scene.seed,
        "origin": {"lat_deg": scene.origin.lat_deg, "lon_deg": scene.origin.lon_deg,
                   "alt_m": scene.origin.alt_m},
        "intrinsics": {"model": k.model.value, "width": k.width, "height": k.height,
                       "fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy},
        "mount_rpy_deg": list(scene.mount_rpy_deg),
        "frame_rate_hz": scene.frame_rate_hz,
        "registered_stride": scene.registered_stride,
        "sign_size_m": scene.sign_size_m,
        "detection_max_range_m": scene.detection_max_range_m,
        "noise": {
            "gps_sigma_m": scene.noise.gps_sigma,
            "distance_map_rel_sigma": scene.noise.distance_map_rel_sigma,
            "keypoint_sigma_px": scene.noise.keypoint_sigma,
            "detection_dropout": scene.noise.detection_dropout,
            "pose_jitter_deg": scene.noise.pose_jitter_deg,
        },
        "signs": [{"class_name": s.class_name, "position": [float(v) for v in s.position],
                   "face_points": s.face_points} for s in scene.signs],
        "trajectory": [{"position": [float(v) for v in tp.position],
                        "heading_deg": math.degrees(math.atan2(tp.heading[1],
                                                               tp.heading[0]))}
                       for tp in scene.trajectory],
    }
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def scene_from_json(text: str) -> SyntheticScene:
    obj = json.loads(text)
    k = obj["intrinsics"]
    noise = obj.get("noise", {})
    return SyntheticScene(
        signs=tuple(SignSpec(s["class_name"], np.array(s["position"], dtype=float),
                             int(s.get("face_points", 9))) for s in obj["signs"]),
        trajectory=tuple(
            TrajectoryPoint(np.array(tp["position"], dtype=float),
                            np.array([math.cos(math.radians(tp["heading_deg"])),
                                      math.sin(math.radians(tp["heading_deg"]))]))
            for tp in obj["trajectory"]),
        intrinsics=CameraIntrinsics(1, CameraModel(k["model"]), int(k["width"]),
                                    int(k["height"]), float(k["fx"]), float(k["fy"]),
                                    float(k["cx"]), float(k["cy"])),
        origin=GeodeticCoord(obj["origin"]["lat_deg"], obj["origin"]["lon_deg"],
                             obj["origin"].get("alt_m", 0.0)),
        mount_rpy_deg=tuple(obj.get("mount_rpy_deg", (0.0, 0.0, 0.0))),
        noise=NoiseConfig(
            gps_sigma=float(noise.get("gps_sigma_m", 0.0)),
            distance_map_rel_sigma=float(noise.get("distance_map_rel_sigma", 0.0)),
            keypoint_sigma=float(noise.get("keypoint_sigma_px", 0.0)),
            detection_dropout=float(noise.get("detection_dropout", 0.0)),
            pose_jitter_deg=float(noise.get("pose_jitter_deg", 0.0))),
        seed=int(obj.get("seed", 0)),
        frame_rate_hz=float(obj.get("frame_rate_hz", 10.0)),
        registered_stride=int(obj.get("registered_stride", 30)),
        sign_size_m=float(obj.get("sign_size_m", 0.6)),
        detection_max_range_m=float(obj.get("detection_max_range_m", 60.0)),
    )


def load_scene(path) -> SyntheticScene:
    return scene_from_json(Path(path).read_text(encoding="utf-8"))


# --- trajectory and preset helpers ---------------------------------------------

def path_trajectory(waypoints, spacing: float = 2.0,
                    height: float = 1.5) -> tuple[TrajectoryPoint, ...]:
    """Resample a 2-D polyline into evenly spaced camera positions with
    headings along the direction of travel."""
    waypoints = [np.asarray(w, dtype=float) for w in waypoints]
    points = []
    for a, b in zip(waypoints, waypoints[1:]):
        seg = b - a
        length = float(np.linalg.norm(seg))
        heading = seg / length
        n = max(1, int(math.floor(length / spacing)))
        for i in range(n):
            pos2 = a + heading * (i * spacing)
            points.append(TrajectoryPoint(np.array([pos2[0], pos2[1], height]), heading))
    last_heading = points[-1].heading if points else np.array([1.0, 0.0])
    points.append(TrajectoryPoint(np.array([waypoints[-1][0], waypoints[-1][1], height]),
                                  last_heading))
    return tuple(points)


def signs_along_path(waypoints, class_names, offsets_m,
                     lateral_m: float = 4.0, height: float = 2.0) -> tuple[SignSpec, ...]:
    """Place signs at given arc-length offsets along a polyline, on the right
    side of the direction of travel."""
    waypoints = [np.asarray(w, dtype=float) for w in waypoints]
    segs = []
    total = 0.0
    for a, b in zip(waypoints, waypoints[1:]):
        length = float(np.linalg.norm(b - a))
        segs.append((a, b, total, length))
        total += length
    signs = []
    for class_name, arc in zip(class_names, offsets_m):
        arc = min(arc, total - 1e-6)
        for a, b, start, length in segs:
            if start <= arc <= start + length:
                heading = (b - a) / length
                right = np.array([heading[1], -heading[0]])
                pos2 = a + heading * (arc - start) + right * lateral_m
                signs.append(SignSpec(class_name,
                                      np.array([pos2[0], pos2[1], height])))
                break
    return tuple(signs)


_CLASSES = (
    "regulatory--no-parking--g1", "regulatory--roundabout--g1",
    "regulatory--turn-right--g1", "regulatory--no-stopping--g1",
    "information--parking--g1", "warning--roadworks--g1",
    "regulatory--stop--g1", "regulatory--keep-left--g1",
    "warning--t-roads--g1", "regulatory--keep-right--g1",
    "information--pedestrians-crossing--g1", "regulatory--yield--g1",
    "complementary--buses--g1", "regulatory--maximum-speed-limit-40--g1",
    "regulatory--maximum-speed-limit-30--g1", "regulatory--no-motor-vehicles--g6",
    "complementary--obstacle-delineator--g2", "complementary--one-direction-right--g1",
    "regulatory--pass-on-either-side--g1", "regulatory--no-pedestrians-or-bicycles--g2",
)


def preset_scene(name: str, seed: int = 0,
                 noise: NoiseConfig = NoiseConfig()) -> SyntheticScene:
    """Built-in scene layouts.

    - residential_before: 10 signs along an L-shaped block
    - residential_after: the same block with 4 signs removed
    - campus: 20 signs along a longer L-route, no change
    - grid20: alias of campus used for metadata-generation checks
    """
    if name in ("residential_before", "residential_after"):
        waypoints = [(0.0, 0.0), (120.0, 0.0), (120.0, 120.0)]
        offsets = [18.0 + 20.0 * i for i in range(10)]
        signs = signs_along_path(waypoints, _CLASSES[:10], offsets)
        scene = SyntheticScene(signs=signs,
                               trajectory=path_trajectory(waypoints, spacing=2.0),
                               intrinsics=_preset_intrinsics(), seed=seed, noise=noise)
        if name == "residential_after":
            removals = [("remove", s.class_name, s.position) for s in signs[1:9:2]]
            scene = mutate_scene(scene, removals)
        return scene
    if name in ("campus", "grid20"):
        waypoints = [(0.0, 0.0), (220.0, 0.0), (220.0, 220.0)]
        offsets = [15.0 + 20.0 * i for i in range(20)]
        signs = signs_along_path(waypoints, _CLASSES[:20], offsets)
        return SyntheticScene(signs=signs,
                              trajectory=path_trajectory(waypoints, spacing=2.5),
                              intrinsics=_preset_intrinsics(), seed=seed, noise=noise)
    raise ValidationError(f"unknown preset scene {name!r}")


def residential_removal_script() -> list[tuple[str, str, np.ndarray]]:
    """The edit list turning residential_before into residential_after."""
    before = preset_scene("residential_before")
    return [("remove", s.class_name, s.position) for s in before.signs[1:9:2]]
