"""Wiring between pipeline stages and bundle files: geo-registration of a
parsed model, traversal processing (pose estimation, online localization,
track building), and directory-level loaders for masks and distance maps."""

from __future__ import annotations

import datetime
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .change import ChangeDetectConfig
from .errors import ValidationError
from .geodesy import (EnuFrame, GeodeticCoord, SimilarityTransform, apply_similarity,
                      enu_project, estimate_similarity)
from .pose import (GpsSample, GpsTrace, PoseEstimate, ReferenceIndex, estimate_pose)
from .realtime import (DistanceMap, ObservationTrack, finalize_tracks,
                       locate_detection, read_distance_map, update_tracks)
from .semantics import (ClassPalette, DetectionSet, SegmentationMask, filter_by_score,
                        read_mask)
from .sfm import CameraPose, Reconstruction, camera_center, transform_reconstruction


def georegister_model(r: Reconstruction,
                      correspondences: Sequence[tuple[str, GeodeticCoord]],
                      ) -> tuple[Reconstruction, EnuFrame, SimilarityTransform, float]:
    """Align a model with the world via its reference-image coordinates.

    The ENU frame anchors at the first correspondence; the similarity maps
    model-frame camera centers onto the ENU positions of the named images.
    Returns the registered reconstruction, the frame, the transform and the
    RMS alignment residual in meters.
    """
    if len(correspondences) < 3:
        raise ValidationError("geo-registration needs at least 3 reference images")
    frame = EnuFrame.at(correspondences[0][1])
    src = []
    dst = []
    for name, coord in correspondences:
        try:
            image = r.image_by_name(name)
        except KeyError:
            raise ValidationError(f"geo-registration names unknown image {name!r}") from None
        src.append(camera_center(image.pose))
        dst.append(enu_project(frame, coord))
    src = np.array(src)
    dst = np.array(dst)
    transform = estimate_similarity(src, dst)
    residual = float(np.sqrt(np.mean(np.sum(
        (apply_similarity(transform, src) - dst) ** 2, axis=1))))
    registered = transform_reconstruction(r, transform, geo_registered=True)
    return registered, frame, transform, residual


def load_masks(directory, names: Sequence[str],
               palette: Optional[ClassPalette] = None) -> dict[str, SegmentationMask]:
    """Load ``<image_name>.pgm`` masks for the given image names; images
    without a mask file are simply absent from the result."""
    directory = Path(directory)
    out = {}
    for name in names:
        path = directory / f"{name}.pgm"
        if path.is_file():
            out[name] = read_mask(path, image_name=name, palette=palette)
    return out


def load_distance_maps(directory, names: Sequence[str]) -> dict[str, DistanceMap]:
    directory = Path(directory)
    out = {}
    for name in names:
        path = directory / f"{name}.b3dm"
        if path.is_file():
            out[name] = read_distance_map(path, image_name=name)
    return out


def read_enu_origin(path) -> GeodeticCoord:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return GeodeticCoord(obj["lat_deg"], obj["lon_deg"], obj.get("alt_m", 0.0))


def write_enu_origin(origin: GeodeticCoord, path) -> None:
    Path(path).write_text(json.dumps(
        {"lat_deg": origin.lat_deg, "lon_deg": origin.lon_deg, "alt_m": origin.alt_m},
        indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class TraversalResult:
    poses: list[PoseEstimate] = field(default_factory=list)
    tracks: list[ObservationTrack] = field(default_factory=list)
    located: int = 0
    gated_out: int = 0


def run_traversal(index: ReferenceIndex,
                  detections: Mapping[str, DetectionSet],
                  distance_maps: Mapping[str, DistanceMap],
                  gps: GpsTrace,
                  frame_times: Sequence[tuple[str, float]],
                  registered: Mapping[str, CameraPose],
                  cfg: ChangeDetectConfig,
                  date: datetime.date,
                  r_assoc: float = 10.0,
                  max_ref_distance: float = 50.0) -> TraversalResult:
    """Process one drive: estimate a pose per frame (registered pose when one
    arrived, propagation otherwise), localize the score-filtered detections
    through the distance maps, and fold them into observation tracks."""
    result = TraversalResult()
    prev: Optional[PoseEstimate] = None
    for name, t in sorted(frame_times, key=lambda row: (row[1], row[0])):
        sample = GpsSample(t, gps.at(t))
        pose = estimate_pose(name, sample, index, prev=prev,
                             registered=registered.get(name),
                             max_ref_distance=max_ref_distance)
        result.poses.append(pose)
        prev = pose
        ds = detections.get(name)
        dmap = distance_maps.get(name)
        if ds is None or dmap is None:
            continue
        for det in filter_by_score(ds, cfg.score_threshold).detections:
            located = locate_detection(det, dmap, pose, cfg.gate)
            if located is None:
                result.gated_out += 1
                continue
            class_name, position = located
            result.located += 1
            update_tracks(result.tracks, (class_name, position, date), r_assoc)
    result.tracks = finalize_tracks(result.tracks, r_assoc)
    return result
