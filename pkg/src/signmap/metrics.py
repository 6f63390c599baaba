"""Evaluation statistics: per-pixel distance-map errors, pose error against a
reference trace, metadata localization error, and the change-detection
confusion matrix."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .change import ChangeEvent
from .errors import ValidationError
from .geodesy import EnuFrame, GeodeticCoord, enu_project
from .metadata import MetadataEntry, MetadataStore, horizontal_distance
from .pose import GpsSample, PoseEstimate
from .realtime import DistanceMap

CHANNEL_NAMES = ("lateral", "height", "depth")


@dataclass(frozen=True)
class ErrorStats:
    median: float
    std_dev: float
    mean: float
    n: int

    @classmethod
    def from_values(cls, values) -> "ErrorStats":
        values = np.asarray(values, dtype=float)
        if values.size == 0:
            return cls(math.nan, math.nan, math.nan, 0)
        return cls(float(np.median(values)), float(np.std(values)),
                   float(np.mean(values)), int(values.size))


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValidationError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else math.nan


@dataclass(frozen=True)
class ChannelErrors:
    """Pooled per-channel absolute and relative errors over labeled pixels."""

    abs_error: dict[str, float]
    rel_error: dict[str, float]
    labeled_pixels: int
    zero_gt_excluded: int


def pixel_errors(pred, gt) -> ChannelErrors:
    """Mean |PRED - GT| and |PRED/GT - 1| per channel over labeled GT pixels.

    Accepts a single (pred, gt) pair of DistanceMaps or two equal-length
    sequences; pixels pool across the set. Non-labeled GT pixels are masked
    out; GT values of exactly zero are excluded from the relative error
    (division guard) and counted.
    """
    preds = [pred] if isinstance(pred, DistanceMap) else list(pred)
    gts = [gt] if isinstance(gt, DistanceMap) else list(gt)
    if len(preds) != len(gts):
        raise ValidationError("prediction and ground-truth sets differ in length")
    abs_sums = np.zeros(3)
    rel_sums = np.zeros(3)
    rel_counts = np.zeros(3, dtype=int)
    labeled = 0
    zero_excluded = 0
    for p, g in zip(preds, gts):
        if p.pixels.shape != g.pixels.shape:
            raise ValidationError(
                f"dimension mismatch for {g.image_name!r}: "
                f"{p.pixels.shape} vs {g.pixels.shape}")
        mask = np.all(np.isfinite(g.pixels), axis=2)
        if not mask.any():
            continue
        gt_px = g.pixels[mask].astype(float)
        pred_px = p.pixels[mask].astype(float)
        labeled += int(mask.sum())
        abs_sums += np.abs(pred_px - gt_px).sum(axis=0)
        nonzero = gt_px != 0.0
        zero_excluded += int((~nonzero).sum())
        for c in range(3):
            sel = nonzero[:, c]
            rel_counts[c] += int(sel.sum())
            rel_sums[c] += np.abs(pred_px[sel, c] / gt_px[sel, c] - 1.0).sum()
    if labeled == 0:
        raise ValidationError("no labeled ground-truth pixels to compare")
    abs_error = {name: float(abs_sums[c] / labeled) for c, name in enumerate(CHANNEL_NAMES)}
    rel_error = {name: float(rel_sums[c] / rel_counts[c]) if rel_counts[c] else math.nan
                 for c, name in enumerate(CHANNEL_NAMES)}
    return ChannelErrors(abs_error, rel_error, labeled, zero_excluded)


def pose_error_vs_trace(estimates: Sequence[PoseEstimate],
                        reference: Sequence[GpsSample],
                        frame: EnuFrame) -> ErrorStats:
    """Distance of each estimated camera center to its closest reference
    position (the reference trace is treated as ground truth)."""
    if not estimates or not reference:
        raise ValidationError("need at least one estimate and one reference sample")
    ref_enu = np.array([enu_project(frame, s.coord) for s in reference])
    centers = np.array([e.center for e in estimates])
    tree = cKDTree(ref_enu)
    dists, _ = tree.query(centers, k=1)
    return ErrorStats.from_values(np.atleast_1d(dists))


def localization_error_stats(predicted: MetadataStore,
                             truth: MetadataStore,
                             match_radius: float) -> tuple[ErrorStats,
                                                           list[MetadataEntry],
                                                           list[MetadataEntry]]:
    """Greedy nearest same-class one-to-one matching within match_radius;
    statistics over matched-pair distances plus both unmatched lists."""
    pred_enu = [predicted.entry_enu(e) for e in predicted.entries]
    truth_enu = [truth.entry_enu(e) for e in truth.entries]
    pairs = []
    for pi, pe in enumerate(predicted.entries):
        for ti, te in enumerate(truth.entries):
            if pe.class_name != te.class_name:
                continue
            dist = horizontal_distance(pred_enu[pi], truth_enu[ti])
            if dist <= match_radius:
                pairs.append((dist, pi, ti))
    pairs.sort(key=lambda p: (p[0], p[1], p[2]))
    used_pred: set[int] = set()
    used_truth: set[int] = set()
    distances = []
    for dist, pi, ti in pairs:
        if pi in used_pred or ti in used_truth:
            continue
        used_pred.add(pi)
        used_truth.add(ti)
        distances.append(dist)
    unmatched_pred = [e for i, e in enumerate(predicted.entries) if i not in used_pred]
    unmatched_truth = [e for i, e in enumerate(truth.entries) if i not in used_truth]
    return ErrorStats.from_values(distances), unmatched_pred, unmatched_truth


def change_confusion(reported: Sequence[ChangeEvent],
                     truth_changes: Sequence[ChangeEvent],
                     truth_unchanged: Sequence[MetadataEntry],
                     frame: EnuFrame,
                     match_radius: float = 20.0) -> ConfusionMatrix:
    """Confusion matrix for a change report against ground truth.

    A report is a true positive when a true change of the same kind and
    class lies within match_radius; leftover reports are false positives.
    Unchanged ground-truth signs count as true negatives unless a leftover
    report of the same class sits within match_radius of them.
    """
    store = MetadataStore([], frame)

    def event_enu(event: ChangeEvent):
        return enu_project(frame, GeodeticCoord(event.position.lat_deg,
                                                event.position.lon_deg,
                                                frame.origin.alt_m))

    reported_enu = [event_enu(e) for e in reported]
    truth_enu = [event_enu(e) for e in truth_changes]
    pairs = []
    for ri, rev in enumerate(reported):
        for ti, tev in enumerate(truth_changes):
            if rev.kind is not tev.kind or rev.class_name != tev.class_name:
                continue
            dist = horizontal_distance(reported_enu[ri], truth_enu[ti])
            if dist <= match_radius:
                pairs.append((dist, ri, ti))
    pairs.sort(key=lambda p: (p[0], p[1], p[2]))
    matched_reports: set[int] = set()
    matched_truth: set[int] = set()
    for _, ri, ti in pairs:
        if ri in matched_reports or ti in matched_truth:
            continue
        matched_reports.add(ri)
        matched_truth.add(ti)
    tp = len(matched_truth)
    fn = len(truth_changes) - tp
    leftover = [i for i in range(len(reported)) if i not in matched_reports]
    fp = len(leftover)
    unchanged_enu = [store.entry_enu(e) for e in truth_unchanged]
    tn = 0
    for ui, entry in enumerate(truth_unchanged):
        hit = any(
            reported[ri].class_name == entry.class_name
            and horizontal_distance(reported_enu[ri], unchanged_enu[ui]) <= match_radius
            for ri in leftover)
        if not hit:
            tn += 1
    return ConfusionMatrix(tp=tp, fp=fp, fn=fn, tn=tn)
