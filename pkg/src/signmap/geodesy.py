"""WGS84 geodetic / ECEF / local-ENU conversions and similarity alignment.

All metric quantities in the pipeline (clustering thresholds, match radii,
range gates, reported errors) are Euclidean meters in a local East-North-Up
frame anchored at a geodetic origin; this module provides that frame plus
the least-squares similarity transform used to geo-register a model.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ParseError, ValidationError
from .rotations import check_rotation

# WGS84 ellipsoid
WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
WGS84_B = WGS84_A * (1.0 - WGS84_F)
_E2 = WGS84_F * (2.0 - WGS84_F)   # first eccentricity squared
_EP2 = _E2 / (1.0 - _E2)          # second eccentricity squared


@dataclass(frozen=True)
class GeodeticCoord:
    """Latitude/longitude in degrees, altitude in meters above the ellipsoid."""

    lat_deg: float
    lon_deg: float
    alt_m: float = 0.0

    def __post_init__(self):
        for name in ("lat_deg", "lon_deg", "alt_m"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (-90.0 <= self.lat_deg <= 90.0):
            raise ValidationError(f"latitude {self.lat_deg} outside [-90, 90]")
        if not (-180.0 < self.lon_deg <= 180.0):
            raise ValidationError(f"longitude {self.lon_deg} outside (-180, 180]")
        if not math.isfinite(self.alt_m):
            raise ValidationError("altitude must be finite")


@dataclass(frozen=True)
class EcefCoord:
    """Earth-centered Earth-fixed Cartesian coordinates in meters."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        for name in ("x", "y", "z"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise ValidationError("ECEF coordinates must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


def geodetic_to_ecef(g: GeodeticCoord) -> EcefCoord:
    """Closed-form WGS84 geodetic to ECEF conversion."""
    phi = math.radians(g.lat_deg)
    lam = math.radians(g.lon_deg)
    sin_phi, cos_phi = math.sin(phi), math.cos(phi)
    n = WGS84_A / math.sqrt(1.0 - _E2 * sin_phi * sin_phi)
    return EcefCoord(
        (n + g.alt_m) * cos_phi * math.cos(lam),
        (n + g.alt_m) * cos_phi * math.sin(lam),
        (n * (1.0 - _E2) + g.alt_m) * sin_phi,
    )


def ecef_to_geodetic(e: EcefCoord) -> GeodeticCoord:
    """Iterative (Bowring-seeded) inverse of geodetic_to_ecef."""
    p = math.hypot(e.x, e.y)
    if math.hypot(p, e.z) < 1.0:
        raise ValidationError("ECEF point too close to Earth center")
    lon = math.degrees(math.atan2(e.y, e.x))
    if lon <= -180.0:
        lon += 360.0
    theta = math.atan2(e.z * WGS84_A, p * WGS84_B)
    phi = math.atan2(e.z + _EP2 * WGS84_B * math.sin(theta) ** 3,
                     p - _E2 * WGS84_A * math.cos(theta) ** 3)
    for _ in range(12):
        s = math.sin(phi)
        n = WGS84_A / math.sqrt(1.0 - _E2 * s * s)
        phi_next = math.atan2(e.z + _E2 * n * s, p)
        done = abs(phi_next - phi) < 1e-14
        phi = phi_next
        if done:
            break
    s, c = math.sin(phi), math.cos(phi)
    # altitude formula valid at the poles where p / cos(phi) degenerates
    alt = p * c + e.z * s - WGS84_A * math.sqrt(1.0 - _E2 * s * s)
    lat = math.degrees(phi)
    lat = min(90.0, max(-90.0, lat))
    return GeodeticCoord(lat, lon, alt)


@dataclass(frozen=True)
class EnuFrame:
    """Local East-North-Up tangent frame at a geodetic origin.

    basis is the 3x3 rotation taking ECEF offsets into ENU components;
    its rows are the east, north and up unit vectors at the origin.
    """

    origin: GeodeticCoord
    basis: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.basis, dtype=float)
        if b.shape != (3, 3):
            raise ValidationError("ENU basis must be 3x3")
        if np.linalg.norm(b @ b.T - np.eye(3)) > 1e-12:
            raise ValidationError("ENU basis must be orthonormal")
        if np.linalg.det(b) < 0:
            raise ValidationError("ENU basis must be right-handed")
        object.__setattr__(self, "basis", b)

    @classmethod
    def at(cls, origin: GeodeticCoord) -> "EnuFrame":
        phi = math.radians(origin.lat_deg)
        lam = math.radians(origin.lon_deg)
        sl, cl = math.sin(lam), math.cos(lam)
        sp, cp = math.sin(phi), math.cos(phi)
        basis = np.array([
            [-sl, cl, 0.0],
            [-sp * cl, -sp * sl, cp],
            [cp * cl, cp * sl, sp],
        ])
        return cls(origin, basis)

    @cached_property
    def _origin_ecef(self) -> np.ndarray:
        return geodetic_to_ecef(self.origin).as_array()


def enu_project(frame: EnuFrame, g: GeodeticCoord) -> np.ndarray:
    """East/north/up offset of g from the frame origin, in meters."""
    e = geodetic_to_ecef(g).as_array()
    return frame.basis @ (e - frame._origin_ecef)


def enu_unproject(frame: EnuFrame, enu) -> GeodeticCoord:
    """Inverse of enu_project."""
    enu = np.asarray(enu, dtype=float)
    ecef = frame._origin_ecef + frame.basis.T @ enu
    return ecef_to_geodetic(EcefCoord(*ecef))


@dataclass(frozen=True)
class SimilarityTransform:
    """p -> scale * rotation @ p + translation."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ValidationError("scale must be positive and finite")
        object.__setattr__(self, "rotation", check_rotation(self.rotation, tol=1e-9))
        t = np.asarray(self.translation, dtype=float)
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise ValidationError("translation must be a finite 3-vector")
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(3), np.zeros(3))

    def inverse(self) -> "SimilarityTransform":
        rot_inv = self.rotation.T
        return SimilarityTransform(
            1.0 / self.scale, rot_inv, -(rot_inv @ self.translation) / self.scale
        )


def apply_similarity(t: SimilarityTransform, p) -> np.ndarray:
    """Apply s*R*p + t to a 3-vector or an (n, 3) array of points."""
    p = np.asarray(p, dtype=float)
    return t.scale * p @ t.rotation.T + t.translation


def estimate_similarity(src, dst) -> SimilarityTransform:
    """Least-squares similarity minimizing sum ||s R src_i + t - dst_i||^2.

    Closed form (Umeyama); requires >= 3 correspondences that are not
    collinear. Collinear or coincident configurations are rejected because
    a silently ill-determined registration corrupts every metric threshold
    downstream.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.ndim != 2 or src.shape[1] != 3 or src.shape != dst.shape:
        raise ValidationError("src and dst must be matching (n, 3) arrays")
    n = src.shape[0]
    if n < 3:
        raise ValidationError("similarity estimation needs at least 3 correspondences")
    mu_src = src.mean(axis=0)
    mu_dst = dst.mean(axis=0)
    d_src = src - mu_src
    d_dst = dst - mu_dst
    cov = d_dst.T @ d_src / n
    u, d, vt = np.linalg.svd(cov)
    # rank < 2 means the points are collinear (or coincident): degenerate
    if d[0] <= 0.0 or d[1] < 1e-12 * d[0]:
        raise ValidationError("degenerate correspondence set (collinear points)")
    s_fix = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_fix[2, 2] = -1.0
    rotation = u @ s_fix @ vt
    var_src = float((d_src ** 2).sum()) / n
    scale = float((d * np.diag(s_fix)).sum()) / var_src
    if scale <= 0:
        raise ValidationError("degenerate correspondence set (non-positive scale)")
    translation = mu_dst - scale * rotation @ mu_src
    return SimilarityTransform(scale, rotation, translation)


def read_georegistration(path) -> list[tuple[str, GeodeticCoord]]:
    """Read a geo-registration correspondence CSV.

    Expected header: image_name,lat_deg,lon_deg,alt_m — one row per
    reference image.
    """
    rows: list[tuple[str, GeodeticCoord]] = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["image_name", "lat_deg", "lon_deg", "alt_m"]:
            raise ParseError("expected header image_name,lat_deg,lon_deg,alt_m",
                             path=path, line=1)
        for i, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ParseError(f"expected 4 fields, got {len(row)}", path=path, line=i)
            try:
                coord = GeodeticCoord(float(row[1]), float(row[2]), float(row[3]))
            except (ValueError, ValidationError) as exc:
                raise ParseError(str(exc), path=path, line=i) from exc
            rows.append((row[0], coord))
    return rows


def write_georegistration(rows, path) -> None:
    # full-precision floats: correspondence quantization shifts the whole
    # registered model, so shortest round-trip formatting is used here
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["image_name", "lat_deg", "lon_deg", "alt_m"])
        for name, coord in rows:
            writer.writerow([name, repr(coord.lat_deg), repr(coord.lon_deg),
                             repr(coord.alt_m)])
