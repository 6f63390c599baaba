"""Initial 3D metadata generation: per-detection candidates, same-class
single-linkage clustering with the distance threshold, and the on-disk CSV
record format (latitude, longitude, class name, color, date detected)."""

from __future__ import annotations

import csv
import datetime
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

import numpy as np

from .errors import ParseError, ValidationError
from .geodesy import EnuFrame, GeodeticCoord, enu_project, enu_unproject
from .semantics import DetectionSet, SegmentationMask, keypoints_supporting
from .sfm import Reconstruction

DEFAULT_CLUSTER_DISTANCE_M = 5.0
DEFAULT_MIN_SUPPORT = 3


@dataclass(frozen=True)
class MetadataEntry:
    """One geo-referenced semantic landmark record."""

    lat_deg: float
    lon_deg: float
    class_name: str
    color: tuple[int, int, int]
    date_detected: datetime.date

    def __post_init__(self):
        object.__setattr__(self, "lat_deg", float(self.lat_deg))
        object.__setattr__(self, "lon_deg", float(self.lon_deg))
        if not (-90.0 <= self.lat_deg <= 90.0):
            raise ValidationError(f"latitude {self.lat_deg} outside [-90, 90]")
        if not (-180.0 < self.lon_deg <= 180.0):
            raise ValidationError(f"longitude {self.lon_deg} outside (-180, 180]")
        if not self.class_name:
            raise ValidationError("class_name must be non-empty")
        color = tuple(int(v) for v in self.color)
        if len(color) != 3 or any(not 0 <= v <= 255 for v in color):
            raise ValidationError("color must be an RGB byte triple")
        object.__setattr__(self, "color", color)


@dataclass
class MetadataStore:
    """Semantic map layer: entries plus the ENU frame for metric queries.

    Entries carry no altitude (the record format is 2-D geodetic), so metric
    distances involving entries are horizontal east/north distances; an
    entry's ENU position is reconstructed at the frame origin's altitude.
    """

    entries: list[MetadataEntry]
    enu_frame: EnuFrame

    def entry_enu(self, entry: MetadataEntry) -> np.ndarray:
        coord = GeodeticCoord(entry.lat_deg, entry.lon_deg, self.enu_frame.origin.alt_m)
        return enu_project(self.enu_frame, coord)

    def copy(self) -> "MetadataStore":
        return MetadataStore(list(self.entries), self.enu_frame)


def horizontal_distance(a, b) -> float:
    """East/north distance, ignoring the up component."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(math.hypot(a[0] - b[0], a[1] - b[1]))


@dataclass(frozen=True)
class MetadataGenConfig:
    t_d: float = DEFAULT_CLUSTER_DISTANCE_M
    min_support: int = DEFAULT_MIN_SUPPORT

    def __post_init__(self):
        if not (math.isfinite(self.t_d) and self.t_d > 0):
            raise ValidationError("clustering threshold t_d must be positive")
        if self.min_support < 1:
            raise ValidationError("min_support must be at least 1")


@dataclass(frozen=True)
class Candidate:
    """Per-detection localization: class, ENU centroid, mean point color."""

    class_name: str
    position: np.ndarray
    rgb: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        object.__setattr__(self, "rgb", np.asarray(self.rgb, dtype=float))


def candidate_points(r: Reconstruction,
                     detections: Mapping[str, DetectionSet],
                     masks: Mapping[str, SegmentationMask],
                     sign_family: frozenset[int] | set[int],
                     cfg: MetadataGenConfig = MetadataGenConfig()) -> list[Candidate]:
    """Localize each detection as the centroid of its supporting 3D points.

    Detections backed by fewer than cfg.min_support keypoints in the
    segment/box intersection yield nothing (the sign cannot be located).
    """
    if not r.geo_registered:
        raise ValidationError("reconstruction must be geo-registered before metadata generation")
    out: list[Candidate] = []
    for name in sorted(detections):
        ds = detections[name]
        try:
            image = r.image_by_name(name)
        except KeyError:
            continue
        mask = masks.get(name)
        if mask is None:
            continue
        for det in ds.detections:
            support = keypoints_supporting(image, det, mask, sign_family)
            if len(support) < cfg.min_support:
                continue
            pts = np.array([r.points[image.keypoints[i].point3d_id].xyz for i in support])
            rgbs = np.array([r.points[image.keypoints[i].point3d_id].rgb for i in support],
                            dtype=float)
            out.append(Candidate(det.class_name, pts.mean(axis=0), rgbs.mean(axis=0)))
    return out


def _single_linkage(positions: np.ndarray, threshold: float) -> list[list[int]]:
    """Union candidates whose pairwise distance <= threshold, transitively.

    Union order follows ascending candidate index, so the result is
    deterministic for a given input order; cluster membership itself is
    order-independent.
    """
    n = len(positions)
    parent = list(range(n))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(n):
        for j in range(i + 1, n):
            if np.linalg.norm(positions[i] - positions[j]) <= threshold:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    clusters: dict[int, list[int]] = {}
    for i in range(n):
        clusters.setdefault(find(i), []).append(i)
    return [clusters[root] for root in sorted(clusters)]


def cluster_candidates(cands: list[Candidate],
                       cfg: MetadataGenConfig,
                       frame: EnuFrame,
                       date: datetime.date) -> list[MetadataEntry]:
    """Merge same-class candidates within t_d of each other into one entry
    at the member centroid, with the members' mean color."""
    entries: list[tuple[int, MetadataEntry]] = []
    by_class: dict[str, list[int]] = {}
    for idx, cand in enumerate(cands):
        by_class.setdefault(cand.class_name, []).append(idx)
    for class_name in sorted(by_class):
        idxs = by_class[class_name]
        positions = np.array([cands[i].position for i in idxs])
        for members in _single_linkage(positions, cfg.t_d):
            member_idx = [idxs[m] for m in members]
            centroid = np.mean([cands[i].position for i in member_idx], axis=0)
            color = np.mean([cands[i].rgb for i in member_idx], axis=0)
            coord = enu_unproject(frame, centroid)
            entry = MetadataEntry(coord.lat_deg, coord.lon_deg, class_name,
                                  tuple(int(round(v)) for v in color), date)
            entries.append((min(member_idx), entry))
    entries.sort(key=lambda pair: pair[0])
    return [entry for _, entry in entries]


def generate_metadata(r: Reconstruction,
                      detections: Mapping[str, DetectionSet],
                      masks: Mapping[str, SegmentationMask],
                      sign_family: frozenset[int] | set[int],
                      frame: EnuFrame,
                      date: datetime.date,
                      cfg: MetadataGenConfig = MetadataGenConfig()) -> MetadataStore:
    cands = candidate_points(r, detections, masks, sign_family, cfg)
    return MetadataStore(cluster_candidates(cands, cfg, frame, date), frame)


# --- CSV persistence ---------------------------------------------------------

_HEADER = ["lat_deg", "lon_deg", "class_name", "color", "date_detected"]


def _parse_color(text: str) -> tuple[int, int, int]:
    if len(text) != 7 or not text.startswith("#"):
        raise ValueError(f"color must look like #RRGGBB, got {text!r}")
    return tuple(int(text[i:i + 2], 16) for i in (1, 3, 5))


def write_metadata(store: MetadataStore, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(_HEADER)
        for e in store.entries:
            writer.writerow([
                f"{e.lat_deg:.9f}", f"{e.lon_deg:.9f}", e.class_name,
                "#{:02X}{:02X}{:02X}".format(*e.color),
                e.date_detected.isoformat(),
            ])


def read_metadata(path, frame: EnuFrame) -> MetadataStore:
    entries: list[MetadataEntry] = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != _HEADER:
            raise ParseError(f"expected header {','.join(_HEADER)}", path=path, line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise ParseError(f"expected 5 fields, got {len(row)}", path=path, line=lineno)
            try:
                entries.append(MetadataEntry(
                    float(row[0]), float(row[1]), row[2],
                    _parse_color(row[3]), datetime.date.fromisoformat(row[4])))
            except (ValueError, ValidationError) as exc:
                raise ParseError(str(exc), path=path, line=lineno) from exc
    return MetadataStore(entries, frame)
