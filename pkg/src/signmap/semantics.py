"""Per-image perception inputs: segmentation masks, detections, point labeling.

Masks arrive as binary PGM rasters of class ids with a sidecar palette file;
detections arrive as JSON Lines. 3D points inherit classes by majority vote
over the mask pixels under their track keypoints, and a detection's
supporting keypoints are those inside its box whose mask pixel belongs to
the configured sign family.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

import numpy as np

from .errors import ParseError, ValidationError
from .sfm import ImageRecord, Reconstruction

UNLABELED_ID = 0
UNLABELED_NAME = "unlabeled"

DEFAULT_SCORE_THRESHOLD = 0.4


@dataclass(frozen=True)
class ClassPalette:
    """Mask class id -> class name; id 0 is reserved for unlabeled pixels."""

    id_to_name: dict[int, str]

    def __post_init__(self):
        mapping = dict(self.id_to_name)
        if mapping.get(UNLABELED_ID, UNLABELED_NAME) != UNLABELED_NAME:
            raise ValidationError("palette id 0 is reserved for 'unlabeled'")
        mapping.setdefault(UNLABELED_ID, UNLABELED_NAME)
        names = list(mapping.values())
        if len(set(names)) != len(names):
            raise ValidationError("palette class names must be unique")
        object.__setattr__(self, "id_to_name", mapping)

    def name_of(self, class_id: int) -> str:
        return self.id_to_name[class_id]

    def id_of(self, name: str) -> int:
        for cid, cname in self.id_to_name.items():
            if cname == name:
                return cid
        raise KeyError(name)

    def __contains__(self, class_id: int) -> bool:
        return class_id in self.id_to_name


def read_palette(path) -> ClassPalette:
    """Read an ``id<TAB>name`` palette file."""
    mapping: dict[int, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError("expected id<TAB>name", path=path, line=lineno)
            try:
                cid = int(parts[0])
            except ValueError as exc:
                raise ParseError(f"invalid class id {parts[0]!r}", path=path, line=lineno) from exc
            if cid in mapping:
                raise ParseError(f"duplicate class id {cid}", path=path, line=lineno)
            mapping[cid] = parts[1]
    return ClassPalette(mapping)


def write_palette(palette: ClassPalette, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for cid in sorted(palette.id_to_name):
            f.write(f"{cid}\t{palette.id_to_name[cid]}\n")


@dataclass(frozen=True)
class SegmentationMask:
    """Row-major u16 raster of class ids for one image."""

    image_name: str
    class_ids: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.class_ids)
        if arr.ndim != 2:
            raise ValidationError("mask raster must be 2-D")
        object.__setattr__(self, "class_ids", arr.astype(np.uint16, copy=False))

    @property
    def width(self) -> int:
        return self.class_ids.shape[1]

    @property
    def height(self) -> int:
        return self.class_ids.shape[0]

    def class_at(self, x: float, y: float) -> int:
        """Nearest-pixel class lookup, clamped to the raster border."""
        ix = min(max(int(round(x)), 0), self.width - 1)
        iy = min(max(int(round(y)), 0), self.height - 1)
        return int(self.class_ids[iy, ix])


def read_mask(path, image_name: Optional[str] = None,
              palette: Optional[ClassPalette] = None) -> SegmentationMask:
    """Read a P5 PGM mask; pixel values are class ids (maxval 255 or 65535)."""
    with open(path, "rb") as f:
        data = f.read()
    # header: magic, width, height, maxval; '#' comments allowed
    tokens = []
    pos = 0
    while len(tokens) < 4:
        m = re.match(rb"\s*(#[^\n]*\n|\S+)", data[pos:])
        if m is None:
            raise ParseError("truncated PGM header", path=path)
        pos += m.end()
        tok = m.group(1)
        if not tok.startswith(b"#"):
            tokens.append(tok)
    if tokens[0] != b"P5":
        raise ParseError("expected binary PGM magic P5", path=path)
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError as exc:
        raise ParseError("invalid PGM header numbers", path=path) from exc
    if maxval not in (255, 65535):
        raise ParseError(f"unsupported PGM maxval {maxval}", path=path)
    pos += 1  # single whitespace byte after maxval
    dtype = np.dtype(">u2") if maxval == 65535 else np.dtype("u1")
    expected = width * height * dtype.itemsize
    raw = data[pos:pos + expected]
    if len(raw) != expected:
        raise ParseError("truncated PGM pixel data", path=path)
    arr = np.frombuffer(raw, dtype=dtype).reshape(height, width).astype(np.uint16)
    if palette is not None:
        present = np.unique(arr)
        unknown = [int(v) for v in present if int(v) not in palette]
        if unknown:
            raise ValidationError(f"mask {path} holds class ids not in palette: {unknown}")
    return SegmentationMask(image_name if image_name is not None else str(path), arr)


def write_mask(mask: SegmentationMask, path) -> None:
    arr = mask.class_ids
    if arr.max(initial=0) > 255:
        maxval, out = 65535, arr.astype(">u2")
    else:
        maxval, out = 255, arr.astype("u1")
    with open(path, "wb") as f:
        f.write(f"P5\n{mask.width} {mask.height}\n{maxval}\n".encode("ascii"))
        f.write(out.tobytes())


@dataclass(frozen=True)
class Detection:
    class_name: str
    score: float
    bbox: tuple[float, float, float, float]   # xmin, ymin, xmax, ymax

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValidationError("detection score must be within [0, 1]")
        xmin, ymin, xmax, ymax = self.bbox
        if not all(math.isfinite(v) for v in self.bbox):
            raise ValidationError("bbox must be finite")
        if not (xmin < xmax and ymin < ymax):
            raise ValidationError("bbox must satisfy xmin < xmax and ymin < ymax")
        object.__setattr__(self, "bbox", tuple(float(v) for v in self.bbox))

    def clamped(self, width: int, height: int) -> "Detection":
        xmin, ymin, xmax, ymax = self.bbox
        return Detection(self.class_name, self.score,
                         (max(0.0, xmin), max(0.0, ymin),
                          min(float(width - 1), xmax), min(float(height - 1), ymax)))

    def center(self) -> tuple[float, float]:
        xmin, ymin, xmax, ymax = self.bbox
        return (xmin + xmax) / 2.0, (ymin + ymax) / 2.0

    def contains(self, x: float, y: float) -> bool:
        xmin, ymin, xmax, ymax = self.bbox
        return xmin <= x <= xmax and ymin <= y <= ymax


@dataclass(frozen=True)
class DetectionSet:
    image_name: str
    detections: tuple[Detection, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "detections", tuple(self.detections))


def filter_by_score(ds: DetectionSet, threshold: float = DEFAULT_SCORE_THRESHOLD) -> DetectionSet:
    """Drop detections scoring below threshold (>= comparison, order kept)."""
    if not (0.0 <= threshold <= 1.0):
        raise ValidationError("score threshold must be within [0, 1]")
    return DetectionSet(ds.image_name,
                        tuple(d for d in ds.detections if d.score >= threshold))


def read_detections(path) -> dict[str, DetectionSet]:
    """Read a JSON Lines detections file into a name -> DetectionSet map."""
    out: dict[str, DetectionSet] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                name = obj["image_name"]
                dets = tuple(
                    Detection(d["class"], float(d["score"]),
                              tuple(float(v) for v in d["bbox"]))
                    for d in obj["detections"]
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"bad detection record: {exc}", path=path, line=lineno) from exc
            if name in out:
                raise ParseError(f"duplicate image {name!r}", path=path, line=lineno)
            out[name] = DetectionSet(name, dets)
    return out


def write_detections(sets: Iterable[DetectionSet], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ds in sorted(sets, key=lambda s: s.image_name):
            f.write(json.dumps({
                "image_name": ds.image_name,
                "detections": [
                    {"class": d.class_name, "score": d.score, "bbox": list(d.bbox)}
                    for d in ds.detections
                ],
            }, separators=(", ", ": ")) + "\n")


@dataclass
class SegmentationOutcome:
    """Point labels plus counters for observations that could not vote."""

    labels: dict[int, int] = field(default_factory=dict)
    missing_mask_obs: int = 0
    out_of_bounds_obs: int = 0


def segment_point_cloud(r: Reconstruction,
                        masks: Mapping[str, SegmentationMask]) -> SegmentationOutcome:
    """Label every 3D point with the majority class of its track observations.

    Observations whose image has no mask, or whose rounded keypoint falls
    outside the raster, are skipped and counted. Vote ties go to the lowest
    class id; points with no countable observation get class 0.
    """
    outcome = SegmentationOutcome()
    for image in r.images.values():
        mask = masks.get(image.name)
        if mask is not None:
            cam = r.cameras[image.camera_id]
            if (mask.width, mask.height) != (cam.width, cam.height):
                raise ValidationError(
                    f"mask for {image.name!r} is {mask.width}x{mask.height}, "
                    f"camera expects {cam.width}x{cam.height}")
    for point in r.points.values():
        votes: dict[int, int] = {}
        for image_id, kp_index in point.track:
            image = r.images[image_id]
            mask = masks.get(image.name)
            if mask is None:
                outcome.missing_mask_obs += 1
                continue
            kp = image.keypoints[kp_index]
            ix, iy = int(round(kp.x)), int(round(kp.y))
            if not (0 <= ix < mask.width and 0 <= iy < mask.height):
                outcome.out_of_bounds_obs += 1
                continue
            cid = int(mask.class_ids[iy, ix])
            votes[cid] = votes.get(cid, 0) + 1
        if votes:
            winner = min(votes, key=lambda cid: (-votes[cid], cid))
        else:
            winner = UNLABELED_ID
        outcome.labels[point.point3d_id] = winner
    return outcome


def keypoints_supporting(image: ImageRecord, det: Detection,
                         mask: SegmentationMask,
                         sign_family: frozenset[int] | set[int]) -> list[int]:
    """Indices of registered keypoints inside det's box whose mask pixel is
    a sign-family class.

    The detector taxonomy is fine-grained while mask classes are coarse, so
    any sign detection matches any mask class in the configured family.
    """
    out = []
    for idx, kp in enumerate(image.keypoints):
        if kp.point3d_id is None:
            continue
        if not det.contains(kp.x, kp.y):
            continue
        if mask.class_at(kp.x, kp.y) in sign_family:
            out.append(idx)
    return out
