"""Online camera pose estimation for new drives.

Two sources: a registered pose (the image was matched into the point cloud)
or propagation — position straight from GPS, orientation carried forward via
R_t = R_{t-1} · R'ᵀ_{t-1} · R'_t, where R' are the orientations of the
nearest mapped reference images. The fixed-mount assumption behind the
propagation makes R_t R'ᵀ_t invariant along the drive.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import ParseError, ValidationError
from .geodesy import EnuFrame, GeodeticCoord, enu_project
from .rotations import check_rotation, nearest_rotation, orthonormality_defect
from .sfm import CameraPose, ImageRecord, Reconstruction, camera_center

DEFAULT_MAX_REF_DISTANCE_M = 50.0


@dataclass(frozen=True)
class GpsSample:
    t: float
    coord: GeodeticCoord

    def __post_init__(self):
        if not math.isfinite(self.t):
            raise ValidationError("GPS timestamp must be finite")


class GpsTrace:
    """Time-ordered GPS samples with nearest/interpolated lookup."""

    def __init__(self, samples: Sequence[GpsSample]):
        if not samples:
            raise ValidationError("GPS trace must hold at least one sample")
        times = [s.t for s in samples]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValidationError("GPS timestamps must be non-decreasing")
        self.samples = list(samples)
        self._times = np.array(times)

    def __len__(self) -> int:
        return len(self.samples)

    def at(self, t: float) -> GeodeticCoord:
        """Coordinate at time t: linear interpolation between bracketing
        samples, clamped to the ends of the trace."""
        samples = self.samples
        if t <= samples[0].t:
            return samples[0].coord
        if t >= samples[-1].t:
            return samples[-1].coord
        hi = int(np.searchsorted(self._times, t, side="right"))
        lo = hi - 1
        a, b = samples[lo], samples[hi]
        if b.t == a.t:
            return a.coord
        w = (t - a.t) / (b.t - a.t)
        return GeodeticCoord(
            a.coord.lat_deg + w * (b.coord.lat_deg - a.coord.lat_deg),
            a.coord.lon_deg + w * (b.coord.lon_deg - a.coord.lon_deg),
            a.coord.alt_m + w * (b.coord.alt_m - a.coord.alt_m),
        )


class PoseSource(enum.Enum):
    REGISTERED = "registered"
    PROPAGATED = "propagated"


@dataclass(frozen=True)
class PoseEstimate:
    """Camera-to-world rotation and ENU camera center for one frame."""

    image_name: str
    rotation_cw: np.ndarray
    center: np.ndarray
    source: PoseSource

    def __post_init__(self):
        object.__setattr__(self, "rotation_cw", check_rotation(self.rotation_cw, tol=1e-8))
        c = np.asarray(self.center, dtype=float)
        if c.shape != (3,) or not np.all(np.isfinite(c)):
            raise ValidationError("camera center must be a finite 3-vector")
        object.__setattr__(self, "center", c)


class ReferenceIndex:
    """Nearest-neighbor index over the mapped reference images' ENU centers."""

    def __init__(self, reconstruction: Reconstruction, frame: EnuFrame):
        if not reconstruction.geo_registered:
            raise ValidationError("reference index needs a geo-registered reconstruction")
        if not reconstruction.images:
            raise ValidationError("reference index needs at least one image")
        self.frame = frame
        self.image_ids = sorted(reconstruction.images)
        self.images = [reconstruction.images[i] for i in self.image_ids]
        self.centers = np.array([camera_center(img.pose) for img in self.images])
        self.rotations_cw = [img.pose.rotation_matrix().T for img in self.images]
        self._tree = cKDTree(self.centers)

    def __len__(self) -> int:
        return len(self.images)


def nearest_reference(index: ReferenceIndex, position) -> ImageRecord:
    """Reference image with the smallest ENU center distance; exact distance
    ties resolve to the lowest image id."""
    position = np.asarray(position, dtype=float)
    k = min(4, len(index))
    dists, idxs = index._tree.query(position, k=k)
    dists = np.atleast_1d(dists)
    idxs = np.atleast_1d(idxs)
    dmin = float(dists[0])
    tie_cut = dmin * (1.0 + 1e-12) + 1e-15
    best = min(int(i) for d, i in zip(dists, idxs) if float(d) <= tie_cut)
    return index.images[best]


def _reference_rotation_cw(index: ReferenceIndex, image: ImageRecord) -> np.ndarray:
    pos = index.image_ids.index(image.image_id)
    return index.rotations_cw[pos]


def propagate_orientation(r_prev, rref_prev, rref_cur) -> np.ndarray:
    """R_t = R_{t-1} · R'ᵀ_{t-1} · R'_t, re-orthonormalized to stop drift."""
    for name, r in (("R_prev", r_prev), ("Rref_prev", rref_prev), ("Rref_cur", rref_cur)):
        r = np.asarray(r, dtype=float)
        if r.shape != (3, 3) or orthonormality_defect(r) > 1e-6:
            raise ValidationError(f"{name} is not orthonormal within 1e-6")
    product = np.asarray(r_prev) @ np.asarray(rref_prev).T @ np.asarray(rref_cur)
    return nearest_rotation(product)


def estimate_pose(image_name: str,
                  gps: GpsSample,
                  index: ReferenceIndex,
                  prev: Optional[PoseEstimate] = None,
                  registered: Optional[CameraPose] = None,
                  max_ref_distance: float = DEFAULT_MAX_REF_DISTANCE_M) -> PoseEstimate:
    """Pose for one frame.

    A registered pose wins when present; otherwise the center comes from GPS
    and the orientation is propagated from the previous estimate through the
    nearest reference images. With neither source available there is nothing
    to estimate.
    """
    if registered is not None:
        return PoseEstimate(image_name,
                            registered.rotation_matrix().T,
                            camera_center(registered),
                            PoseSource.REGISTERED)
    if prev is None:
        raise ValidationError(
            f"frame {image_name!r}: no registered pose and no previous estimate")
    center = enu_project(index.frame, gps.coord)
    ref_cur = nearest_reference(index, center)
    ref_dist = float(np.linalg.norm(camera_center(ref_cur.pose) - center))
    if ref_dist > max_ref_distance:
        raise ValidationError(
            f"frame {image_name!r}: nearest reference image is {ref_dist:.1f} m away "
            f"(max {max_ref_distance} m); off the mapped area")
    ref_prev = nearest_reference(index, prev.center)
    rotation = propagate_orientation(prev.rotation_cw,
                                     _reference_rotation_cw(index, ref_prev),
                                     _reference_rotation_cw(index, ref_cur))
    return PoseEstimate(image_name, rotation, center, PoseSource.PROPAGATED)


# --- trace / pose file I/O ----------------------------------------------------

def read_gps_trace(path) -> GpsTrace:
    """Read a GPS trace CSV with header t_s,lat_deg,lon_deg,alt_m."""
    samples = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["t_s", "lat_deg", "lon_deg", "alt_m"]:
            raise ParseError("expected header t_s,lat_deg,lon_deg,alt_m", path=path, line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                samples.append(GpsSample(float(row[0]),
                                         GeodeticCoord(float(row[1]), float(row[2]),
                                                       float(row[3]))))
            except (ValueError, ValidationError, IndexError) as exc:
                raise ParseError(str(exc), path=path, line=lineno) from exc
    return GpsTrace(samples)


def write_gps_trace(trace: GpsTrace, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["t_s", "lat_deg", "lon_deg", "alt_m"])
        for s in trace.samples:
            writer.writerow([f"{s.t:.6f}", f"{s.coord.lat_deg:.9f}",
                             f"{s.coord.lon_deg:.9f}", f"{s.coord.alt_m:.6f}"])


def read_frame_times(path) -> list[tuple[str, float]]:
    """Read the frame-to-time CSV with header image_name,t_s."""
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["image_name", "t_s"]:
            raise ParseError("expected header image_name,t_s", path=path, line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append((row[0], float(row[1])))
            except (ValueError, IndexError) as exc:
                raise ParseError(str(exc), path=path, line=lineno) from exc
    return rows


def write_frame_times(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["image_name", "t_s"])
        for name, t in rows:
            writer.writerow([name, f"{t:.6f}"])


def read_registered_poses(path) -> dict[str, CameraPose]:
    """Read registered (world-to-camera) poses from a CSV with header
    image_name,qw,qx,qy,qz,tx,ty,tz; world coordinates are ENU meters."""
    out: dict[str, CameraPose] = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["image_name", "qw", "qx", "qy", "qz", "tx", "ty", "tz"]:
            raise ParseError("expected header image_name,qw,qx,qy,qz,tx,ty,tz",
                             path=path, line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                q = np.array([float(v) for v in row[1:5]])
                t = np.array([float(v) for v in row[5:8]])
                out[row[0]] = CameraPose(q / np.linalg.norm(q), t)
            except (ValueError, ValidationError, IndexError) as exc:
                raise ParseError(str(exc), path=path, line=lineno) from exc
    return out


def write_registered_poses(poses: dict[str, CameraPose], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["image_name", "qw", "qx", "qy", "qz", "tx", "ty", "tz"])
        for name in sorted(poses):
            pose = poses[name]
            writer.writerow([name]
                            + [repr(float(v)) for v in pose.rotation_wc]
                            + [repr(float(v)) for v in pose.translation_wc])
