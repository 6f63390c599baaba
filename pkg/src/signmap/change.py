"""Change detection against the temporary metadata layer.

A finalized traversal's observation tracks are matched one-to-one against
the effective metadata (base copy plus still-pending changes). Tracks with
no same-class entry within the match radius report appearances; observable
entries that no track matched report removals. Reported changes accumulate
observations in the temporary layer until enough distinct vehicles over
enough distinct days promote them into the semantic layer.
"""

from __future__ import annotations

import datetime
import enum
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ParseError, ValidationError
from .geodesy import GeodeticCoord, enu_unproject
from .metadata import (MetadataEntry, MetadataStore, horizontal_distance,
                       read_metadata, write_metadata)
from .pose import PoseEstimate
from .realtime import ObservationTrack, RangeGate
from .semantics import DEFAULT_SCORE_THRESHOLD
from .sfm import CameraIntrinsics

DEFAULT_MATCH_RADIUS_M = 20.0
PROMOTED_ENTRY_COLOR = (128, 128, 128)


@dataclass(frozen=True)
class ChangeDetectConfig:
    match_radius_r: float = DEFAULT_MATCH_RADIUS_M
    gate: RangeGate = RangeGate()
    score_threshold: float = DEFAULT_SCORE_THRESHOLD
    min_track_count: int = 2
    removal_min_visible_frames: int = 5
    fov_margin_deg: float = 5.0

    def __post_init__(self):
        if not (math.isfinite(self.match_radius_r) and self.match_radius_r > 0):
            raise ValidationError("match radius must be positive")
        if self.min_track_count < 1 or self.removal_min_visible_frames < 1:
            raise ValidationError("count thresholds must be at least 1")


class ChangeKind(enum.Enum):
    APPEARED = "appeared"
    REMOVED = "removed"


@dataclass(frozen=True)
class Evidence:
    vehicle_id: str
    date: datetime.date
    observation_count: int


@dataclass(frozen=True)
class ChangeEvent:
    kind: ChangeKind
    class_name: str
    position: GeodeticCoord
    evidence: Evidence
    distance_to_nearest_same_class: Optional[float] = None


@dataclass(frozen=True)
class PendingChange:
    event: ChangeEvent
    log: tuple[tuple[str, datetime.date], ...]

    def __post_init__(self):
        if not self.log:
            raise ValidationError("pending change must carry at least one observation")
        object.__setattr__(self, "log", tuple(self.log))

    def vehicles(self) -> set[str]:
        return {v for v, _ in self.log}

    def days(self) -> set[datetime.date]:
        return {d for _, d in self.log}


@dataclass(frozen=True)
class TemporaryLayer:
    """Working copy of the semantic layer plus unconfirmed changes."""

    base: MetadataStore
    pending: tuple[PendingChange, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "pending", tuple(self.pending))

    def effective_entries(self) -> list[MetadataEntry]:
        """Base entries with pending changes applied: pending removals hide
        their matched entry, pending appearances add one."""
        entries = list(self.base.entries)
        for change in self.pending:
            event = change.event
            if event.kind is ChangeKind.REMOVED:
                idx = _nearest_entry_index(entries, self.base, event.class_name,
                                           _event_enu(self.base, event))
                if idx is not None:
                    del entries[idx]
            else:
                entries.append(_entry_from_event(event))
        return entries

    def effective_store(self) -> MetadataStore:
        return MetadataStore(self.effective_entries(), self.base.enu_frame)


@dataclass(frozen=True)
class PermanenceConfig:
    min_vehicles: int
    min_days: int

    def __post_init__(self):
        if self.min_vehicles < 1 or self.min_days < 1:
            raise ValidationError("permanence thresholds must be at least 1")


def _event_enu(store: MetadataStore, event: ChangeEvent) -> np.ndarray:
    coord = GeodeticCoord(event.position.lat_deg, event.position.lon_deg,
                          store.enu_frame.origin.alt_m)
    from .geodesy import enu_project
    return enu_project(store.enu_frame, coord)


def _entry_from_event(event: ChangeEvent) -> MetadataEntry:
    return MetadataEntry(event.position.lat_deg, event.position.lon_deg,
                         event.class_name, PROMOTED_ENTRY_COLOR,
                         event.evidence.date)


def _nearest_entry_index(entries: Sequence[MetadataEntry], store: MetadataStore,
                         class_name: str, position: np.ndarray,
                         max_distance: float = DEFAULT_MATCH_RADIUS_M) -> Optional[int]:
    best, best_dist = None, None
    for idx, entry in enumerate(entries):
        if entry.class_name != class_name:
            continue
        dist = horizontal_distance(store.entry_enu(entry), position)
        if dist <= max_distance and (best_dist is None or dist < best_dist):
            best, best_dist = idx, dist
    return best


def match_tracks_to_entries(tracks: Sequence[ObservationTrack],
                            entries: Sequence[MetadataEntry],
                            store: MetadataStore,
                            radius: float) -> tuple[dict[int, int], list[int], list[int]]:
    """Greedy nearest-first one-to-one assignment of tracks to same-class
    entries within radius. Returns (track->entry map, unmatched track
    indices, unmatched entry indices). Distances are horizontal meters."""
    entry_enu = [store.entry_enu(e) for e in entries]
    pairs = []
    for ti, track in enumerate(tracks):
        for ei, entry in enumerate(entries):
            if entry.class_name != track.class_name:
                continue
            dist = horizontal_distance(track.mean_enu, entry_enu[ei])
            if dist <= radius:
                pairs.append((dist, ti, ei))
    pairs.sort(key=lambda p: (p[0], p[1], p[2]))
    assigned: dict[int, int] = {}
    used_entries: set[int] = set()
    for _, ti, ei in pairs:
        if ti in assigned or ei in used_entries:
            continue
        assigned[ti] = ei
        used_entries.add(ei)
    unmatched_tracks = [ti for ti in range(len(tracks)) if ti not in assigned]
    unmatched_entries = [ei for ei in range(len(entries)) if ei not in used_entries]
    return assigned, unmatched_tracks, unmatched_entries


def _qualifying(tracks: Sequence[ObservationTrack], cfg: ChangeDetectConfig):
    return [t for t in tracks if t.count >= cfg.min_track_count]


def detect_appearances(tracks: Sequence[ObservationTrack],
                       layer: TemporaryLayer,
                       cfg: ChangeDetectConfig,
                       vehicle_id: str,
                       date: datetime.date) -> list[ChangeEvent]:
    """Appeared events for tracks with no same-class entry within the match
    radius in the effective metadata."""
    tracks = _qualifying(tracks, cfg)
    entries = layer.effective_entries()
    store = layer.base
    _, unmatched, _ = match_tracks_to_entries(tracks, entries, store, cfg.match_radius_r)
    events = []
    for ti in unmatched:
        track = tracks[ti]
        coord = enu_unproject(store.enu_frame, track.mean_enu)
        nearest = None
        for entry in entries:
            if entry.class_name != track.class_name:
                continue
            dist = horizontal_distance(track.mean_enu, store.entry_enu(entry))
            if nearest is None or dist < nearest:
                nearest = dist
        events.append(ChangeEvent(
            ChangeKind.APPEARED, track.class_name,
            GeodeticCoord(coord.lat_deg, coord.lon_deg, 0.0),
            Evidence(vehicle_id, date, track.count),
            nearest))
    return events


def entry_observable_frames(entry_enu: np.ndarray,
                            poses: Sequence[PoseEstimate],
                            intrinsics: CameraIntrinsics,
                            cfg: ChangeDetectConfig) -> int:
    """Number of traversal poses whose horizontal field of view and range
    gate contain the entry position."""
    half_fov = math.atan((intrinsics.width / 2.0) / intrinsics.fx)
    limit = half_fov + math.radians(cfg.fov_margin_deg)
    count = 0
    for pose in poses:
        v_world = entry_enu - pose.center
        v_cam = pose.rotation_cw.T @ v_world
        depth = v_cam[2]
        if depth <= 0:
            continue
        if not cfg.gate.admits(float(np.linalg.norm(v_cam))):
            continue
        if abs(math.atan2(v_cam[0], depth)) <= limit:
            count += 1
    return count


def detect_removals(tracks: Sequence[ObservationTrack],
                    layer: TemporaryLayer,
                    poses: Sequence[PoseEstimate],
                    intrinsics: CameraIntrinsics,
                    cfg: ChangeDetectConfig,
                    vehicle_id: str,
                    date: datetime.date) -> list[ChangeEvent]:
    """Removed events for entries the traversal should have seen but did not:
    inside the field of view and range gate of enough poses, yet matched by
    no track."""
    tracks = _qualifying(tracks, cfg)
    entries = layer.effective_entries()
    store = layer.base
    _, _, unmatched_entries = match_tracks_to_entries(tracks, entries, store,
                                                      cfg.match_radius_r)
    events = []
    for ei in unmatched_entries:
        entry = entries[ei]
        seen = entry_observable_frames(store.entry_enu(entry), poses, intrinsics, cfg)
        if seen < cfg.removal_min_visible_frames:
            continue
        events.append(ChangeEvent(
            ChangeKind.REMOVED, entry.class_name,
            GeodeticCoord(entry.lat_deg, entry.lon_deg, 0.0),
            Evidence(vehicle_id, date, seen),
            None))
    return events


def _events_equivalent(a: ChangeEvent, b: ChangeEvent, store: MetadataStore,
                       radius: float) -> bool:
    if a.kind is not b.kind or a.class_name != b.class_name:
        return False
    return horizontal_distance(_event_enu(store, a), _event_enu(store, b)) <= radius


def apply_to_temporary(layer: TemporaryLayer,
                       events: Sequence[ChangeEvent],
                       vehicle_id: str,
                       date: datetime.date,
                       match_radius: float = DEFAULT_MATCH_RADIUS_M) -> TemporaryLayer:
    """Record events on the temporary layer.

    A re-observation of an equivalent pending event (same kind and class,
    position within the match radius) extends its observation log instead of
    duplicating the event; log entries are unique per (vehicle, date)."""
    pending = list(layer.pending)
    for event in events:
        for idx, existing in enumerate(pending):
            if _events_equivalent(existing.event, event, layer.base, match_radius):
                if (vehicle_id, date) not in existing.log:
                    pending[idx] = replace(existing,
                                           log=existing.log + ((vehicle_id, date),))
                break
        else:
            pending.append(PendingChange(event, ((vehicle_id, date),)))
    return TemporaryLayer(layer.base, tuple(pending))


def promote_permanent(layer: TemporaryLayer,
                      pcfg: PermanenceConfig,
                      semantic: MetadataStore) -> tuple[MetadataStore, TemporaryLayer]:
    """Apply pending changes observed by enough vehicles over enough days to
    the semantic store; promoted events leave the pending list and the
    returned layer re-bases on the updated store."""
    entries = list(semantic.entries)
    remaining: list[PendingChange] = []
    for change in layer.pending:
        if len(change.vehicles()) < pcfg.min_vehicles or len(change.days()) < pcfg.min_days:
            remaining.append(change)
            continue
        event = change.event
        if event.kind is ChangeKind.APPEARED:
            entries.append(_entry_from_event(event))
        else:
            idx = _nearest_entry_index(entries, semantic, event.class_name,
                                       _event_enu(semantic, event))
            if idx is None:
                warnings.warn(
                    f"promoted removal of {event.class_name!r} matches no entry; dropped")
                continue
            del entries[idx]
    new_semantic = MetadataStore(entries, semantic.enu_frame)
    new_layer = TemporaryLayer(new_semantic.copy(), tuple(remaining))
    return new_semantic, new_layer


# --- persistence ------------------------------------------------------------

def _event_to_json(event: ChangeEvent) -> dict:
    return {
        "kind": event.kind.value,
        "class": event.class_name,
        "lat_deg": event.position.lat_deg,
        "lon_deg": event.position.lon_deg,
        "vehicle_id": event.evidence.vehicle_id,
        "date": event.evidence.date.isoformat(),
        "nearest_same_class_m": event.distance_to_nearest_same_class,
    }


def _event_from_json(obj: dict) -> ChangeEvent:
    return ChangeEvent(
        ChangeKind(obj["kind"]), obj["class"],
        GeodeticCoord(obj["lat_deg"], obj["lon_deg"], 0.0),
        Evidence(obj["vehicle_id"], datetime.date.fromisoformat(obj["date"]),
                 int(obj.get("observation_count", 1))),
        obj.get("nearest_same_class_m"))


def write_change_report(events: Sequence[ChangeEvent], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for event in events:
            f.write(json.dumps(_event_to_json(event), separators=(", ", ": ")) + "\n")


def read_change_report(path) -> list[ChangeEvent]:
    events = []
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                events.append(_event_from_json(json.loads(line)))
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"bad change record: {exc}", path=path, line=lineno) from exc
    return events


def write_temporary_layer(layer: TemporaryLayer, directory) -> None:
    """Persist as a metadata CSV plus a pending-events JSON Lines file; the
    ENU origin rides along so downstream commands can rebuild the frame."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_metadata(layer.base, directory / "metadata.csv")
    origin = layer.base.enu_frame.origin
    (directory / "enu_origin.json").write_text(json.dumps(
        {"lat_deg": origin.lat_deg, "lon_deg": origin.lon_deg,
         "alt_m": origin.alt_m}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    with open(directory / "pending.jsonl", "w", encoding="utf-8") as f:
        for change in layer.pending:
            obj = _event_to_json(change.event)
            obj["observation_count"] = change.event.evidence.observation_count
            obj["log"] = [{"vehicle_id": v, "date": d.isoformat()} for v, d in change.log]
            f.write(json.dumps(obj, separators=(", ", ": ")) + "\n")


def read_temporary_layer(directory, frame) -> TemporaryLayer:
    directory = Path(directory)
    base = read_metadata(directory / "metadata.csv", frame)
    pending = []
    pending_path = directory / "pending.jsonl"
    if pending_path.exists():
        with open(pending_path, encoding="utf-8") as f:
            for lineno, raw in enumerate(f, start=1):
                line = raw.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                    event = _event_from_json(obj)
                    log = tuple((o["vehicle_id"], datetime.date.fromisoformat(o["date"]))
                                for o in obj["log"])
                except (KeyError, TypeError, ValueError) as exc:
                    raise ParseError(f"bad pending record: {exc}",
                                     path=pending_path, line=lineno) from exc
                pending.append(PendingChange(event, log))
    return TemporaryLayer(base, tuple(pending))
