"""Sparse SfM model I/O (COLMAP-compatible text layout) and pinhole projection.

A model directory holds ``cameras.txt``, ``images.txt`` and ``points3D.txt``.
Parsing produces a fully cross-linked, validated Reconstruction; writing emits
a canonical form (ascending ids, shortest round-trip float formatting) so that
parse(write(r)) == r structurally.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ParseError, ValidationError
from .geodesy import SimilarityTransform, apply_similarity
from .rotations import quat_to_rotmat, rotmat_to_quat

MIN_PROJECTION_DEPTH = 1e-6


class CameraModel(enum.Enum):
    SIMPLE_PINHOLE = "SIMPLE_PINHOLE"
    PINHOLE = "PINHOLE"


@dataclass(frozen=True)
class CameraIntrinsics:
    camera_id: int
    model: CameraModel
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValidationError("image dimensions must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("principal point must lie inside the image")


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rotation (unit quaternion, wxyz) and translation."""

    rotation_wc: np.ndarray
    translation_wc: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.rotation_wc, dtype=float)
        t = np.asarray(self.translation_wc, dtype=float)
        if q.shape != (4,):
            raise ValidationError("quaternion must have 4 components (w, x, y, z)")
        if abs(float(np.linalg.norm(q)) - 1.0) > 1e-9:
            raise ValidationError("quaternion must be unit length")
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise ValidationError("translation must be a finite 3-vector")
        object.__setattr__(self, "rotation_wc", q)
        object.__setattr__(self, "translation_wc", t)

    @classmethod
    def from_matrix(cls, r_wc, t_wc) -> "CameraPose":
        return cls(rotmat_to_quat(r_wc), np.asarray(t_wc, dtype=float))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation_wc)


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    point3d_id: Optional[int] = None

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValidationError("keypoint coordinates must be finite")


@dataclass(frozen=True)
class ImageRecord:
    image_id: int
    name: str
    pose: CameraPose
    camera_id: int
    keypoints: tuple[Keypoint, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "keypoints", tuple(self.keypoints))


@dataclass(frozen=True)
class ScenePoint:
    point3d_id: int
    xyz: np.ndarray
    rgb: tuple[int, int, int]
    reproj_error: float
    track: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        xyz = np.asarray(self.xyz, dtype=float)
        if xyz.shape != (3,) or not np.all(np.isfinite(xyz)):
            raise ValidationError("point position must be a finite 3-vector")
        object.__setattr__(self, "xyz", xyz)
        rgb = tuple(int(v) for v in self.rgb)
        if len(rgb) != 3 or any(not 0 <= v <= 255 for v in rgb):
            raise ValidationError("rgb must be three bytes")
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "track", tuple((int(a), int(b)) for a, b in self.track))


@dataclass
class Reconstruction:
    cameras: dict[int, CameraIntrinsics] = field(default_factory=dict)
    images: dict[int, ImageRecord] = field(default_factory=dict)
    points: dict[int, ScenePoint] = field(default_factory=dict)
    geo_registered: bool = False

    def image_by_name(self, name: str) -> ImageRecord:
        for img in self.images.values():
            if img.name == name:
                return img
        raise KeyError(name)

    def camera_of(self, image: ImageRecord) -> CameraIntrinsics:
        return self.cameras[image.camera_id]

    def validate(self) -> None:
        """Check referential integrity across the three maps."""
        names = set()
        for image in self.images.values():
            if image.name in names:
                raise ValidationError(f"duplicate image name {image.name!r}")
            names.add(image.name)
            if image.camera_id not in self.cameras:
                raise ValidationError(
                    f"image {image.name!r} references unknown camera {image.camera_id}")
            for idx, kp in enumerate(image.keypoints):
                if kp.point3d_id is not None and kp.point3d_id not in self.points:
                    raise ValidationError(
                        f"image {image.name!r} keypoint {idx} references "
                        f"nonexistent point3D {kp.point3d_id}")
        for point in self.points.values():
            for image_id, kp_index in point.track:
                if image_id not in self.images:
                    raise ValidationError(
                        f"point {point.point3d_id} track references unknown image {image_id}")
                image = self.images[image_id]
                if not 0 <= kp_index < len(image.keypoints):
                    raise ValidationError(
                        f"point {point.point3d_id} track references keypoint "
                        f"{kp_index} out of range in image {image.name!r}")
                if image.keypoints[kp_index].point3d_id != point.point3d_id:
                    raise ValidationError(
                        f"point {point.point3d_id} track entry ({image.name!r}, {kp_index}) "
                        f"does not link back to the point")


def camera_center(pose: CameraPose) -> np.ndarray:
    """Camera center C = -Rᵀ t in world coordinates."""
    r = pose.rotation_matrix()
    return -(r.T @ pose.translation_wc)


def project_point(k: CameraIntrinsics, pose: CameraPose, p_world) -> Optional[tuple[float, float]]:
    """Pinhole projection of a world point; None when behind or out of view."""
    p = np.asarray(p_world, dtype=float)
    x_cam = pose.rotation_matrix() @ p + pose.translation_wc
    z = x_cam[2]
    if z <= MIN_PROJECTION_DEPTH:
        return None
    u = k.fx * x_cam[0] / z + k.cx
    v = k.fy * x_cam[1] / z + k.cy
    if not (0.0 <= u < k.width and 0.0 <= v < k.height):
        return None
    return float(u), float(v)


def transform_reconstruction(r: Reconstruction, t: SimilarityTransform,
                             geo_registered: bool = True) -> Reconstruction:
    """Map a model through a similarity: points via s R p + t, extrinsics so
    that camera-frame coordinates become metric (scaled by s)."""
    points = {
        pid: replace(p, xyz=apply_similarity(t, p.xyz))
        for pid, p in r.points.items()
    }
    images = {}
    for iid, img in r.images.items():
        r_wc = img.pose.rotation_matrix()
        r_new = r_wc @ t.rotation.T
        t_new = t.scale * img.pose.translation_wc - r_new @ t.translation
        images[iid] = replace(img, pose=CameraPose.from_matrix(r_new, t_new))
    return Reconstruction(cameras=dict(r.cameras), images=images, points=points,
                          geo_registered=geo_registered)


# --- text model parsing -----------------------------------------------------

_MODEL_FILES = ("cameras.txt", "images.txt", "points3D.txt")


def _fmt(x: float) -> str:
    return repr(float(x))


def _parse_float(token: str, path, line: int) -> float:
    try:
        return float(token)
    except ValueError as exc:
        raise ParseError(f"invalid float {token!r}", path=path, line=line) from exc


def _parse_int(token: str, path, line: int) -> int:
    try:
        return int(token)
    except ValueError as exc:
        raise ParseError(f"invalid integer {token!r}", path=path, line=line) from exc


def _parse_cameras(path) -> tuple[dict[int, CameraIntrinsics], bool]:
    cameras: dict[int, CameraIntrinsics] = {}
    geo_registered = False
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if line.startswith("#"):
                if "geo-registered:" in line:
                    geo_registered = line.rsplit(":", 1)[1].strip() == "1"
                continue
            if not line:
                continue
            tokens = line.split()
            if len(tokens) < 4:
                raise ParseError("camera line needs id, model, width, height",
                                 path=path, line=lineno)
            camera_id = _parse_int(tokens[0], path, lineno)
            if camera_id in cameras:
                raise ParseError(f"duplicate camera id {camera_id}", path=path, line=lineno)
            model_name = tokens[1]
            width = _parse_int(tokens[2], path, lineno)
            height = _parse_int(tokens[3], path, lineno)
            params = [_parse_float(tok, path, lineno) for tok in tokens[4:]]
            if model_name == "SIMPLE_PINHOLE":
                if len(params) != 3:
                    raise ParseError("SIMPLE_PINHOLE expects 3 params", path=path, line=lineno)
                f_, cx, cy = params
                model, fx, fy = CameraModel.SIMPLE_PINHOLE, f_, f_
            elif model_name == "PINHOLE":
                if len(params) != 4:
                    raise ParseError("PINHOLE expects 4 params", path=path, line=lineno)
                fx, fy, cx, cy = params
                model = CameraModel.PINHOLE
            elif model_name == "SIMPLE_RADIAL":
                if len(params) != 4:
                    raise ParseError("SIMPLE_RADIAL expects 4 params", path=path, line=lineno)
                f_, cx, cy, k1 = params
                warnings.warn(
                    f"camera {camera_id}: SIMPLE_RADIAL distortion k1={k1} ignored, "
                    "treating as SIMPLE_PINHOLE")
                model, fx, fy = CameraModel.SIMPLE_PINHOLE, f_, f_
            else:
                raise ParseError(f"unsupported camera model {model_name!r}",
                                 path=path, line=lineno)
            try:
                cameras[camera_id] = CameraIntrinsics(
                    camera_id, model, width, height, fx, fy, cx, cy)
            except ValidationError as exc:
                raise ParseError(str(exc), path=path, line=lineno) from exc
    return cameras, geo_registered


def _parse_images(path) -> dict[int, ImageRecord]:
    images: dict[int, ImageRecord] = {}
    with open(path, encoding="utf-8") as f:
        lines = f.readlines()
    i = 0
    n = len(lines)
    while i < n:
        lineno = i + 1
        line = lines[i].strip()
        i += 1
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if len(tokens) < 10:
            raise ParseError("image line needs id, quaternion, translation, camera, name",
                             path=path, line=lineno)
        image_id = _parse_int(tokens[0], path, lineno)
        if image_id in images:
            raise ParseError(f"duplicate image id {image_id}", path=path, line=lineno)
        q = np.array([_parse_float(t, path, lineno) for t in tokens[1:5]])
        t_wc = np.array([_parse_float(t, path, lineno) for t in tokens[5:8]])
        camera_id = _parse_int(tokens[8], path, lineno)
        name = " ".join(tokens[9:])
        if i >= n:
            raise ParseError(f"image {name!r} missing its keypoint line",
                             path=path, line=lineno)
        kp_lineno = i + 1
        kp_tokens = lines[i].split()
        i += 1
        if len(kp_tokens) % 3 != 0:
            raise ParseError("keypoint line must hold X Y POINT3D_ID triples",
                             path=path, line=kp_lineno)
        keypoints = []
        for j in range(0, len(kp_tokens), 3):
            x = _parse_float(kp_tokens[j], path, kp_lineno)
            y = _parse_float(kp_tokens[j + 1], path, kp_lineno)
            pid = _parse_int(kp_tokens[j + 2], path, kp_lineno)
            keypoints.append(Keypoint(x, y, None if pid == -1 else pid))
        norm = float(np.linalg.norm(q))
        if norm == 0.0:
            raise ParseError("zero-norm quaternion", path=path, line=lineno)
        if abs(norm - 1.0) > 1e-9:
            # tolerate mildly denormalized inputs; exact values pass through
            # untouched so canonical round trips stay bit-identical
            q = q / norm
        try:
            pose = CameraPose(q, t_wc)
        except ValidationError as exc:
            raise ParseError(str(exc), path=path, line=lineno) from exc
        images[image_id] = ImageRecord(image_id, name, pose, camera_id, tuple(keypoints))
    return images


def _parse_points(path) -> dict[int, ScenePoint]:
    points: dict[int, ScenePoint] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            if len(tokens) < 8 or (len(tokens) - 8) % 2 != 0:
                raise ParseError("point line needs id, xyz, rgb, error, track pairs",
                                 path=path, line=lineno)
            pid = _parse_int(tokens[0], path, lineno)
            if pid in points:
                raise ParseError(f"duplicate point3D id {pid}", path=path, line=lineno)
            xyz = [_parse_float(t, path, lineno) for t in tokens[1:4]]
            rgb = tuple(_parse_int(t, path, lineno) for t in tokens[4:7])
            err = _parse_float(tokens[7], path, lineno)
            track = []
            for j in range(8, len(tokens), 2):
                track.append((_parse_int(tokens[j], path, lineno),
                              _parse_int(tokens[j + 1], path, lineno)))
            try:
                points[pid] = ScenePoint(pid, np.array(xyz), rgb, err, tuple(track))
            except ValidationError as exc:
                raise ParseError(str(exc), path=path, line=lineno) from exc
    return points


def parse_model(directory) -> Reconstruction:
    """Parse a sparse text model directory into a validated Reconstruction."""
    directory = Path(directory)
    for fname in _MODEL_FILES:
        if not (directory / fname).is_file():
            raise ParseError(f"missing model file {fname}", path=directory)
    cameras, geo_registered = _parse_cameras(directory / "cameras.txt")
    images = _parse_images(directory / "images.txt")
    points = _parse_points(directory / "points3D.txt")
    r = Reconstruction(cameras=cameras, images=images, points=points,
                       geo_registered=geo_registered)
    r.validate()
    return r


def write_model(r: Reconstruction, directory) -> None:
    """Write the three model text files in canonical form."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    with open(directory / "cameras.txt", "w", encoding="utf-8") as f:
        f.write("# Camera list: CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]\n")
        f.write(f"# geo-registered: {1 if r.geo_registered else 0}\n")
        for cid in sorted(r.cameras):
            cam = r.cameras[cid]
            if cam.model is CameraModel.SIMPLE_PINHOLE:
                params = [cam.fx, cam.cx, cam.cy]
            else:
                params = [cam.fx, cam.fy, cam.cx, cam.cy]
            f.write(f"{cid} {cam.model.value} {cam.width} {cam.height} "
                    + " ".join(_fmt(p) for p in params) + "\n")

    with open(directory / "images.txt", "w", encoding="utf-8") as f:
        f.write("# Image list: IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME\n")
        f.write("#             then X Y POINT3D_ID triples (-1 when unmatched)\n")
        for iid in sorted(r.images):
            img = r.images[iid]
            q = img.pose.rotation_wc
            t = img.pose.translation_wc
            f.write(f"{iid} " + " ".join(_fmt(v) for v in q) + " "
                    + " ".join(_fmt(v) for v in t) + f" {img.camera_id} {img.name}\n")
            f.write(" ".join(
                f"{_fmt(kp.x)} {_fmt(kp.y)} {-1 if kp.point3d_id is None else kp.point3d_id}"
                for kp in img.keypoints) + "\n")

    with open(directory / "points3D.txt", "w", encoding="utf-8") as f:
        f.write("# 3D point list: POINT3D_ID X Y Z R G B ERROR TRACK[] as (IMAGE_ID, POINT2D_IDX)\n")
        for pid in sorted(r.points):
            p = r.points[pid]
            parts = [str(pid)] + [_fmt(v) for v in p.xyz] + [str(v) for v in p.rgb]
            parts.append(_fmt(p.reproj_error))
            for image_id, kp_index in p.track:
                parts.append(str(image_id))
                parts.append(str(kp_index))
            f.write(" ".join(parts) + "\n")
