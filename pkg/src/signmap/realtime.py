"""Pixel-wise 3D localization plumbing for the online layer.

Distance maps hold per-pixel camera-frame offsets B = (lateral, height,
depth) — the three-channel output contract of the depth network. World
positions follow P = R_cw · B + C. Sparse training labels are generated from
the reconstruction by inverting that relation at each registered keypoint.
"""

from __future__ import annotations

import datetime
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ParseError, ValidationError
from .pose import PoseEstimate
from .semantics import Detection
from .sfm import ImageRecord, Reconstruction, camera_center

B3DM_MAGIC = b"B3DM"

DEFAULT_RANGE_MIN_M = 3.0
DEFAULT_RANGE_MAX_M = 50.0
DEFAULT_ASSOCIATION_RADIUS_M = 10.0


@dataclass(frozen=True)
class RangeGate:
    """Camera-to-sign distance band outside which localizations are dropped."""

    u_min: float = DEFAULT_RANGE_MIN_M
    u_max: float = DEFAULT_RANGE_MAX_M

    def __post_init__(self):
        if not (0.0 <= self.u_min < self.u_max):
            raise ValidationError("range gate requires 0 <= u_min < u_max")

    def admits(self, distance: float) -> bool:
        return self.u_min <= distance <= self.u_max


@dataclass(frozen=True)
class DistanceMap:
    """(h, w, 3) float32 raster of camera-frame offsets; NaN = unlabeled."""

    image_name: str
    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValidationError("distance map must be (h, w, 3)")
        labeled = np.all(np.isfinite(arr), axis=2)
        if bool(np.any(labeled & (arr[..., 2] <= 0.0))):
            raise ValidationError("labeled distance-map pixels must have positive depth")
        object.__setattr__(self, "pixels", arr)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def at(self, x: int, y: int) -> np.ndarray:
        return self.pixels[y, x]

    def is_labeled(self, x: int, y: int) -> bool:
        return bool(np.all(np.isfinite(self.pixels[y, x])))


def empty_distance_map(image_name: str, width: int, height: int) -> np.ndarray:
    return np.full((height, width, 3), np.nan, dtype=np.float32)


def pixel_to_wcs(pose: PoseEstimate, b) -> np.ndarray:
    """World position of a labeled pixel: rotation_cw @ B + center."""
    b = np.asarray(b, dtype=float)
    if b.shape != (3,) or not np.all(np.isfinite(b)):
        raise ValidationError("pixel offset B must be a finite 3-vector (unlabeled pixel?)")
    if b[2] <= 0:
        raise ValidationError("pixel offset B must have positive depth")
    return pose.rotation_cw @ b + pose.center


def generate_sparse_labels(r: Reconstruction, image: ImageRecord) -> DistanceMap:
    """Sparse label map for one registered image: B = R_wc (P - C) written at
    each keypoint with a resolved 3D point; pixel collisions keep the
    smaller depth."""
    cam = r.cameras[image.camera_id]
    data = empty_distance_map(image.name, cam.width, cam.height)
    r_wc = image.pose.rotation_matrix()
    center = camera_center(image.pose)
    for kp in image.keypoints:
        if kp.point3d_id is None:
            continue
        ix, iy = int(round(kp.x)), int(round(kp.y))
        if not (0 <= ix < cam.width and 0 <= iy < cam.height):
            continue
        # compare depths at storage precision so exact ties resolve to the
        # first keypoint regardless of float32 rounding direction
        b = (r_wc @ (r.points[kp.point3d_id].xyz - center)).astype(np.float32)
        if b[2] <= 0:
            continue
        existing = data[iy, ix]
        if np.isfinite(existing[2]) and existing[2] <= b[2]:
            continue
        data[iy, ix] = b
    return DistanceMap(image.name, data)


def _nearest_labeled_in_bbox(dmap: DistanceMap, det: Detection,
                             cx: int, cy: int) -> tuple[int, int] | None:
    xmin, ymin, xmax, ymax = det.bbox
    x0 = max(0, int(math.ceil(xmin)))
    y0 = max(0, int(math.ceil(ymin)))
    x1 = min(dmap.width - 1, int(math.floor(xmax)))
    y1 = min(dmap.height - 1, int(math.floor(ymax)))
    if x0 > x1 or y0 > y1:
        return None
    region = dmap.pixels[y0:y1 + 1, x0:x1 + 1]
    labeled = np.all(np.isfinite(region), axis=2)
    if not labeled.any():
        return None
    ys, xs = np.nonzero(labeled)
    d2 = (xs + x0 - cx) ** 2 + (ys + y0 - cy) ** 2
    best = int(np.argmin(d2))
    return int(xs[best] + x0), int(ys[best] + y0)


def locate_detection(det: Detection, dmap: DistanceMap, pose: PoseEstimate,
                     gate: RangeGate = RangeGate()) -> tuple[str, np.ndarray] | None:
    """World position of a detected sign, read at the box center pixel.

    Sparse maps often miss the exact center, so an unlabeled center falls
    back to the nearest labeled pixel inside the box. Localizations outside
    the range gate are discarded (returns None)."""
    cx_f, cy_f = det.center()
    cx = min(max(int(round(cx_f)), 0), dmap.width - 1)
    cy = min(max(int(round(cy_f)), 0), dmap.height - 1)
    if not dmap.is_labeled(cx, cy):
        found = _nearest_labeled_in_bbox(dmap, det, cx, cy)
        if found is None:
            return None
        cx, cy = found
    b = np.asarray(dmap.at(cx, cy), dtype=float)
    if not gate.admits(float(np.linalg.norm(b))):
        return None
    return det.class_name, pixel_to_wcs(pose, b)


@dataclass
class ObservationTrack:
    """Running-mean cluster of online observations of one sign."""

    class_name: str
    mean_enu: np.ndarray
    count: int
    first_seen: datetime.date
    last_seen: datetime.date

    def __post_init__(self):
        self.mean_enu = np.asarray(self.mean_enu, dtype=float)
        if self.count < 1 or not np.all(np.isfinite(self.mean_enu)):
            raise ValidationError("track needs a finite mean and count >= 1")


def update_tracks(tracks: list[ObservationTrack],
                  obs: tuple[str, np.ndarray, datetime.date],
                  r_assoc: float = DEFAULT_ASSOCIATION_RADIUS_M) -> list[ObservationTrack]:
    """Fold one observation into the track list (mutates and returns it).

    The observation joins the nearest same-class track within r_assoc (ties
    go to the older track); otherwise it opens a new track. The running mean
    keeps the exact arithmetic mean of all member observations.
    """
    class_name, position, date = obs
    position = np.asarray(position, dtype=float)
    if not np.all(np.isfinite(position)):
        raise ValidationError("observation position must be finite")
    best = None
    best_dist = None
    for track in tracks:
        if track.class_name != class_name:
            continue
        dist = float(np.linalg.norm(track.mean_enu - position))
        if dist <= r_assoc and (best_dist is None or dist < best_dist):
            best, best_dist = track, dist
    if best is None:
        tracks.append(ObservationTrack(class_name, position, 1, date, date))
    else:
        best.mean_enu = best.mean_enu + (position - best.mean_enu) / (best.count + 1)
        best.count += 1
        best.first_seen = min(best.first_seen, date)
        best.last_seen = max(best.last_seen, date)
    return tracks


def finalize_tracks(tracks: list[ObservationTrack],
                    r_assoc: float = DEFAULT_ASSOCIATION_RADIUS_M) -> list[ObservationTrack]:
    """Consolidate a traversal's tracks before change detection.

    Online association is order-dependent: an early noisy observation can
    seed a duplicate track for a sign the rest of the drive then feeds
    separately. Same-class tracks whose means lie within r_assoc merge
    (transitively); the merged mean is the count-weighted combination, so it
    stays the exact arithmetic mean of every member observation.
    """
    by_class: dict[str, list[ObservationTrack]] = {}
    for track in tracks:
        by_class.setdefault(track.class_name, []).append(track)
    out: list[ObservationTrack] = []
    for class_name in sorted(by_class):
        group = by_class[class_name]
        n = len(group)
        parent = list(range(n))

        def find(a: int) -> int:
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for i in range(n):
            for j in range(i + 1, n):
                if np.linalg.norm(group[i].mean_enu - group[j].mean_enu) <= r_assoc:
                    ri, rj = find(i), find(j)
                    if ri != rj:
                        parent[max(ri, rj)] = min(ri, rj)
        clusters: dict[int, list[ObservationTrack]] = {}
        for i in range(n):
            clusters.setdefault(find(i), []).append(group[i])
        for root in sorted(clusters):
            members = clusters[root]
            total = sum(t.count for t in members)
            mean = sum((t.mean_enu * t.count for t in members),
                       start=np.zeros(3)) / total
            out.append(ObservationTrack(
                class_name, mean, total,
                min(t.first_seen for t in members),
                max(t.last_seen for t in members)))
    return out


# --- distance-map binary format ------------------------------------------------

def write_distance_map(dmap: DistanceMap, path) -> None:
    """Write the binary format: magic B3DM, u32 LE width, u32 LE height,
    then width*height little-endian f32 (lateral, height, depth) triples."""
    with open(path, "wb") as f:
        f.write(B3DM_MAGIC)
        f.write(struct.pack("<II", dmap.width, dmap.height))
        f.write(dmap.pixels.astype("<f4", copy=False).tobytes())


def read_distance_map(path, image_name: str | None = None) -> DistanceMap:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != B3DM_MAGIC:
        raise ParseError("bad distance-map magic (expected B3DM)", path=path)
    if len(data) < 12:
        raise ParseError("truncated distance-map header", path=path)
    width, height = struct.unpack("<II", data[4:12])
    expected = 12 + width * height * 3 * 4
    if len(data) != expected:
        raise ParseError(
            f"distance map should be {expected} bytes, found {len(data)}", path=path)
    pixels = np.frombuffer(data[12:], dtype="<f4").reshape(height, width, 3)
    return DistanceMap(image_name if image_name is not None else str(path),
                       pixels.copy())
