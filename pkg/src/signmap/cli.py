"""Command-line front end.

Subcommands mirror the pipeline stages: simulate, georegister, segment,
metadata-gen, labels-gen, detect-changes, promote, eval. Every command is a
run-to-completion batch job: machine-readable outputs (CSV / JSON Lines /
JSON) plus a rendered figure land in --out, a short human summary goes to
stdout. Exit codes: 0 success, 1 validation error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime
import json
import sys
from pathlib import Path

import numpy as np

from . import change as change_mod
from . import figures, metadata, metrics, pipeline, pose, realtime, semantics, sfm, synth
from .errors import ValidationError
from .geodesy import EnuFrame, GeodeticCoord, enu_project, read_georegistration


@dataclasses.dataclass
class PipelineConfig:
    """Every tunable threshold, overridable per-run from file or flags."""

    t_d: float = metadata.DEFAULT_CLUSTER_DISTANCE_M
    min_support: int = metadata.DEFAULT_MIN_SUPPORT
    score_threshold: float = semantics.DEFAULT_SCORE_THRESHOLD
    u_min: float = realtime.DEFAULT_RANGE_MIN_M
    u_max: float = realtime.DEFAULT_RANGE_MAX_M
    r_assoc: float = realtime.DEFAULT_ASSOCIATION_RADIUS_M
    match_radius_r: float = change_mod.DEFAULT_MATCH_RADIUS_M
    min_track_count: int = 2
    removal_min_visible_frames: int = 5
    fov_margin_deg: float = 5.0
    max_ref_distance: float = pose.DEFAULT_MAX_REF_DISTANCE_M
    min_vehicles: int = 2
    min_days: int = 2
    sign_family: tuple[int, ...] = (synth.SIGN_CLASS_ID,)
    enu_origin: GeodeticCoord | None = None

    def change_config(self) -> change_mod.ChangeDetectConfig:
        return change_mod.ChangeDetectConfig(
            match_radius_r=self.match_radius_r,
            gate=realtime.RangeGate(self.u_min, self.u_max),
            score_threshold=self.score_threshold,
            min_track_count=self.min_track_count,
            removal_min_visible_frames=self.removal_min_visible_frames,
            fov_margin_deg=self.fov_margin_deg)

    def metadata_config(self) -> metadata.MetadataGenConfig:
        return metadata.MetadataGenConfig(t_d=self.t_d, min_support=self.min_support)


_CONFIG_FIELDS = {f.name for f in dataclasses.fields(PipelineConfig)}


def load_config(path) -> PipelineConfig:
    """Read a config file: JSON object or ``key=value`` lines."""
    text = Path(path).read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("{"):
        raw = json.loads(text)
    else:
        raw = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            raw[key.strip()] = value.strip()
    cfg = PipelineConfig()
    for key, value in raw.items():
        if key not in _CONFIG_FIELDS:
            raise ValidationError(f"unknown config key {key!r}")
        if key == "enu_origin":
            if isinstance(value, str):
                value = [float(v) for v in value.split(",")]
            cfg.enu_origin = GeodeticCoord(*[float(v) for v in value])
        elif key == "sign_family":
            if isinstance(value, str):
                value = value.split(",")
            cfg.sign_family = tuple(int(v) for v in value)
        else:
            current = getattr(cfg, key)
            setattr(cfg, key, type(current)(value))
    return cfg


_THRESHOLD_FLAGS = [
    ("--t-d", "t_d", float, "same-class clustering distance threshold [m] (default 5)"),
    ("--min-support", "min_support", int, "keypoints required to localize a detection"),
    ("--score-threshold", "score_threshold", float,
     "detection confidence cutoff (default 0.4)"),
    ("--u-min", "u_min", float, "range gate lower bound [m] (default 3)"),
    ("--u-max", "u_max", float, "range gate upper bound [m] (default 50)"),
    ("--r-assoc", "r_assoc", float, "track association radius [m] (default 10)"),
    ("--match-radius", "match_radius_r", float,
     "metadata match radius R [m] (default 20)"),
    ("--min-track-count", "min_track_count", int,
     "observations needed before a track can report changes"),
    ("--removal-min-visible-frames", "removal_min_visible_frames", int,
     "poses that must see an entry before a removal is reported"),
    ("--fov-margin-deg", "fov_margin_deg", float, "observability FOV margin [deg]"),
    ("--max-ref-distance", "max_ref_distance", float,
     "maximum distance to the nearest mapped image [m]"),
]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _common(parser):
    parser.add_argument("--config", help="config file (JSON or key=value lines)")
    parser.add_argument("--seed", type=int, default=None, help="random seed override")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--enu-origin", default=None,
                        help="ENU origin override as lat_deg,lon_deg,alt_m")
    for flag, dest, ftype, help_text in _THRESHOLD_FLAGS:
        parser.add_argument(flag, dest=dest, type=ftype, default=None, help=help_text)


def _resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    for _, dest, _, _ in _THRESHOLD_FLAGS:
        value = getattr(args, dest, None)
        if value is not None:
            setattr(cfg, dest, value)
    if getattr(args, "enu_origin", None):
        parts = [float(v) for v in args.enu_origin.split(",")]
        if len(parts) == 2:
            parts.append(0.0)
        cfg.enu_origin = GeodeticCoord(*parts)
    return cfg


def _resolve_frame(cfg: PipelineConfig, *candidate_dirs) -> EnuFrame:
    if cfg.enu_origin is not None:
        return EnuFrame.at(cfg.enu_origin)
    for directory in candidate_dirs:
        if directory is None:
            continue
        path = Path(directory) / "enu_origin.json"
        if path.is_file():
            return EnuFrame.at(pipeline.read_enu_origin(path))
    raise ValidationError(
        "no ENU origin: pass --enu-origin or point at a directory with enu_origin.json")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _entry_positions(store: metadata.MetadataStore) -> np.ndarray:
    if not store.entries:
        return np.zeros((0, 2))
    return np.array([store.entry_enu(e)[:2] for e in store.entries])


# --- subcommands ---------------------------------------------------------------

def cmd_simulate(args) -> int:
    out = _out_dir(args)
    if args.scene:
        scene = synth.load_scene(args.scene)
    else:
        scene = synth.preset_scene(args.preset)
    if args.seed is not None:
        scene = dataclasses.replace(scene, seed=args.seed)
    world = synth.render_scene(scene, out)
    print(f"rendered {len(scene.signs)} signs over {len(scene.trajectory)} frames "
          f"into {out}")
    if world.invisible_signs:
        print(f"warning: {len(world.invisible_signs)} signs never visible: "
              + ", ".join(world.invisible_signs))
    return 0


def cmd_georegister(args) -> int:
    out = _out_dir(args)
    r = sfm.parse_model(args.model)
    rows = read_georegistration(args.correspondences)
    registered, frame, transform, residual = pipeline.georegister_model(r, rows)
    sfm.write_model(registered, out)
    pipeline.write_enu_origin(frame.origin, out / "enu_origin.json")
    print(f"geo-registered {len(r.images)} images against {len(rows)} references: "
          f"scale {transform.scale:.6f}, residual RMS {residual:.3e} m")
    return 0


def cmd_segment(args) -> int:
    out = _out_dir(args)
    r = sfm.parse_model(args.model)
    palette = semantics.read_palette(args.palette)
    names = [img.name for img in r.images.values()]
    masks = pipeline.load_masks(args.masks, names, palette)
    outcome = semantics.segment_point_cloud(r, masks)
    with open(out / "point_classes.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["point3d_id", "class_id", "class_name"])
        for pid in sorted(outcome.labels):
            cid = outcome.labels[pid]
            writer.writerow([pid, cid, palette.name_of(cid)])
    by_class: dict[int, list[np.ndarray]] = {}
    for pid, cid in outcome.labels.items():
        by_class.setdefault(cid, []).append(r.points[pid].xyz[:2])
    figures.save_sign_map(
        out / "segmentation_map.png",
        [(palette.name_of(cid), np.array(pts)) for cid, pts in sorted(by_class.items())],
        title="point cloud classes (top view)")
    labeled = sum(1 for cid in outcome.labels.values() if cid != semantics.UNLABELED_ID)
    print(f"labeled {labeled}/{len(outcome.labels)} points "
          f"({outcome.missing_mask_obs} observations without mask, "
          f"{outcome.out_of_bounds_obs} out of bounds)")
    return 0


def cmd_metadata_gen(args) -> int:
    out = _out_dir(args)
    cfg = _resolve_config(args)
    r = sfm.parse_model(args.model)
    frame = _resolve_frame(cfg, args.model)
    palette = semantics.read_palette(args.palette)
    names = [img.name for img in r.images.values()]
    masks = pipeline.load_masks(args.masks, names, palette)
    detections = {
        name: semantics.filter_by_score(ds, cfg.score_threshold)
        for name, ds in semantics.read_detections(args.detections).items()
    }
    date = datetime.date.fromisoformat(args.date) if args.date else datetime.date.today()
    store = metadata.generate_metadata(r, detections, masks, frozenset(cfg.sign_family),
                                       frame, date, cfg.metadata_config())
    metadata.write_metadata(store, out / "metadata.csv")
    figures.save_sign_map(out / "metadata_map.png",
                          [("metadata", _entry_positions(store))],
                          title="generated metadata (top view)")
    print(f"generated {len(store.entries)} metadata entries -> {out / 'metadata.csv'}")
    return 0


def cmd_labels_gen(args) -> int:
    out = _out_dir(args)
    r = sfm.parse_model(args.model)
    dmap_dir = out / "dmaps"
    dmap_dir.mkdir(exist_ok=True)
    total_labeled = 0
    for iid in sorted(r.images):
        image = r.images[iid]
        dmap = realtime.generate_sparse_labels(r, image)
        realtime.write_distance_map(dmap, dmap_dir / f"{image.name}.b3dm")
        total_labeled += int(np.all(np.isfinite(dmap.pixels), axis=2).sum())
    print(f"wrote sparse label maps for {len(r.images)} images "
          f"({total_labeled} labeled pixels) -> {dmap_dir}")
    return 0


def cmd_detect_changes(args) -> int:
    out = _out_dir(args)
    cfg = _resolve_config(args)
    ccfg = cfg.change_config()
    r = sfm.parse_model(args.model)
    frame = _resolve_frame(cfg, args.model, args.layer)
    layer_path = Path(args.layer)
    if layer_path.is_dir():
        layer = change_mod.read_temporary_layer(layer_path, frame)
    else:
        layer = change_mod.TemporaryLayer(metadata.read_metadata(layer_path, frame))
    index = pose.ReferenceIndex(r, frame)
    detections = semantics.read_detections(args.detections)
    names = sorted(detections)
    dmaps = pipeline.load_distance_maps(args.dmaps, names)
    gps = pose.read_gps_trace(args.gps)
    frame_times = pose.read_frame_times(args.frame_times)
    registered = (pose.read_registered_poses(args.registered_poses)
                  if args.registered_poses else {})
    date = datetime.date.fromisoformat(args.date) if args.date else datetime.date.today()
    result = pipeline.run_traversal(index, detections, dmaps, gps, frame_times,
                                    registered, ccfg, date, r_assoc=cfg.r_assoc,
                                    max_ref_distance=cfg.max_ref_distance)
    intrinsics = r.cameras[min(r.cameras)]
    events = change_mod.detect_appearances(result.tracks, layer, ccfg,
                                           args.vehicle, date)
    events += change_mod.detect_removals(result.tracks, layer, result.poses,
                                         intrinsics, ccfg, args.vehicle, date)
    updated = change_mod.apply_to_temporary(layer, events, args.vehicle, date,
                                            ccfg.match_radius_r)
    change_mod.write_change_report(events, out / "changes.jsonl")
    change_mod.write_temporary_layer(updated, out / "layer")
    pose.write_registered_poses(
        {p.image_name: sfm.CameraPose.from_matrix(p.rotation_cw.T,
                                                  -(p.rotation_cw.T @ p.center))
         for p in result.poses},
        out / "poses.csv")
    track_pos = np.array([t.mean_enu[:2] for t in result.tracks]) \
        if result.tracks else np.zeros((0, 2))
    event_pos = np.array([
        enu_project(frame, GeodeticCoord(e.position.lat_deg, e.position.lon_deg,
                                         frame.origin.alt_m))[:2]
        for e in events]) if events else np.zeros((0, 2))
    figures.save_sign_map(out / "changes_map.png",
                          [("metadata", _entry_positions(layer.base)),
                           ("tracks", track_pos),
                           ("changes", event_pos)],
                          title="change detection (top view)")
    appeared = sum(1 for e in events if e.kind is change_mod.ChangeKind.APPEARED)
    removed = len(events) - appeared
    print(f"traversal: {len(result.poses)} poses, {result.located} localizations "
          f"({result.gated_out} outside gate), {len(result.tracks)} tracks")
    print(f"changes: {appeared} appeared, {removed} removed -> {out / 'changes.jsonl'}")
    return 0


def cmd_promote(args) -> int:
    out = _out_dir(args)
    cfg = _resolve_config(args)
    frame = _resolve_frame(cfg, args.layer)
    layer = change_mod.read_temporary_layer(args.layer, frame)
    semantic = metadata.read_metadata(args.semantic, frame)
    pcfg = change_mod.PermanenceConfig(args.min_vehicles, args.min_days)
    new_semantic, new_layer = change_mod.promote_permanent(layer, pcfg, semantic)
    metadata.write_metadata(new_semantic, out / "semantic.csv")
    change_mod.write_temporary_layer(new_layer, out / "layer")
    promoted = len(layer.pending) - len(new_layer.pending)
    print(f"promoted {promoted} pending changes; semantic layer now has "
          f"{len(new_semantic.entries)} entries")
    return 0


def _eval_pose(args, cfg, out) -> None:
    frame = _resolve_frame(cfg, None)
    registered = pose.read_registered_poses(args.poses)
    estimates = []
    for name in sorted(registered):
        p = registered[name]
        estimates.append(pose.PoseEstimate(name, p.rotation_matrix().T,
                                           sfm.camera_center(p),
                                           pose.PoseSource.REGISTERED))
    reference = pose.read_gps_trace(args.reference)
    stats = metrics.pose_error_vs_trace(estimates, reference.samples, frame)
    ref_enu = np.array([enu_project(frame, s.coord) for s in reference.samples])
    centers = np.array([e.center for e in estimates])
    from scipy.spatial import cKDTree
    dists, _ = cKDTree(ref_enu).query(centers, k=1)
    (out / "stats.json").write_text(json.dumps({
        "kind": "pose", "median_m": stats.median, "std_dev_m": stats.std_dev,
        "mean_m": stats.mean, "n": stats.n}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    with open(out / "per_item.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["image_name", "error_m"])
        for est, d in zip(estimates, np.atleast_1d(dists)):
            writer.writerow([est.image_name, f"{float(d):.6f}"])
    figures.save_trajectory(out / "figure.png", centers[:, :2], ref_enu[:, :2],
                            title=f"pose error median {stats.median:.2f} m")


def _eval_pixel(args, cfg, out) -> None:
    pred_dir, gt_dir = Path(args.pred), Path(args.truth)
    names = sorted(p.name[:-5] for p in gt_dir.glob("*.b3dm"))
    if not names:
        raise ValidationError(f"no .b3dm ground-truth maps under {gt_dir}")
    preds = [realtime.read_distance_map(pred_dir / f"{n}.b3dm", n) for n in names]
    gts = [realtime.read_distance_map(gt_dir / f"{n}.b3dm", n) for n in names]
    errors = metrics.pixel_errors(preds, gts)
    (out / "stats.json").write_text(json.dumps({
        "kind": "pixel", "abs_error_m": errors.abs_error,
        "rel_error": errors.rel_error, "labeled_pixels": errors.labeled_pixels,
        "zero_gt_excluded": errors.zero_gt_excluded}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    with open(out / "per_item.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["image_name", "channel", "abs_error_m", "rel_error"])
        for p, g in zip(preds, gts):
            item = metrics.pixel_errors(p, g)
            for channel in metrics.CHANNEL_NAMES:
                writer.writerow([p.image_name, channel,
                                 f"{item.abs_error[channel]:.6f}",
                                 f"{item.rel_error[channel]:.6f}"])
    figures.save_channel_errors(out / "figure.png", errors,
                                title="pixel-wise localization error")


def _eval_localization(args, cfg, out) -> None:
    frame = _resolve_frame(cfg, None)
    predicted = metadata.read_metadata(args.pred, frame)
    truth = metadata.read_metadata(args.truth, frame)
    stats, unmatched_pred, unmatched_truth = metrics.localization_error_stats(
        predicted, truth, cfg.match_radius_r)
    (out / "stats.json").write_text(json.dumps({
        "kind": "localization", "median_m": stats.median, "std_dev_m": stats.std_dev,
        "mean_m": stats.mean, "matched": stats.n,
        "unmatched_predicted": len(unmatched_pred),
        "unmatched_truth": len(unmatched_truth)}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    with open(out / "per_item.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["class_name", "status"])
        for e in unmatched_pred:
            writer.writerow([e.class_name, "unmatched_predicted"])
        for e in unmatched_truth:
            writer.writerow([e.class_name, "unmatched_truth"])
    figures.save_sign_map(out / "figure.png",
                          [("truth", _entry_positions(truth)),
                           ("predicted", _entry_positions(predicted))],
                          title=f"localization median {stats.median:.2f} m "
                                f"({stats.n} matched)")


def _eval_changes(args, cfg, out) -> None:
    frame = _resolve_frame(cfg, None)
    reported = change_mod.read_change_report(args.report)
    truth_changes = change_mod.read_change_report(args.truth_changes) \
        if args.truth_changes else []
    truth_unchanged = metadata.read_metadata(args.truth_unchanged, frame).entries \
        if args.truth_unchanged else []
    cm = metrics.change_confusion(reported, truth_changes, truth_unchanged, frame,
                                  cfg.match_radius_r)
    (out / "stats.json").write_text(json.dumps({
        "kind": "changes", "tp": cm.tp, "fp": cm.fp, "fn": cm.fn, "tn": cm.tn,
        "accuracy": cm.accuracy}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    with open(out / "per_item.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["kind", "class_name", "lat_deg", "lon_deg"])
        for e in reported:
            writer.writerow([e.kind.value, e.class_name,
                             f"{e.position.lat_deg:.9f}", f"{e.position.lon_deg:.9f}"])
    figures.save_confusion_matrix(out / "figure.png", cm)


def cmd_eval(args) -> int:
    out = _out_dir(args)
    cfg = _resolve_config(args)
    handlers = {"pose": _eval_pose, "pixel": _eval_pixel,
                "localization": _eval_localization, "changes": _eval_changes}
    handlers[args.kind](args, cfg, out)
    stats = json.loads((out / "stats.json").read_text(encoding="utf-8"))
    print(json.dumps(stats, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="signmap",
                     description="Traffic-sign map metadata generation and "
                                 "change detection from sparse SfM models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[], help="render a synthetic input bundle")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--scene", help="scene description JSON")
    group.add_argument("--preset", choices=["residential_before", "residential_after",
                                            "campus", "grid20"])
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("georegister", help="align a model with world coordinates")
    p.add_argument("model", help="sparse model directory")
    p.add_argument("correspondences", help="image_name,lat_deg,lon_deg,alt_m CSV")
    _common(p)
    p.set_defaults(func=cmd_georegister)

    p = sub.add_parser("segment", help="label 3D points from segmentation masks")
    p.add_argument("model", help="sparse model directory")
    p.add_argument("masks", help="directory of <image_name>.pgm masks")
    p.add_argument("palette", help="id<TAB>name palette file")
    _common(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("metadata-gen", help="generate the semantic map layer")
    p.add_argument("model", help="geo-registered model directory")
    p.add_argument("detections", help="detections JSON Lines file")
    p.add_argument("masks", help="directory of <image_name>.pgm masks")
    p.add_argument("palette", help="id<TAB>name palette file")
    p.add_argument("--date", default=None, help="detection date (ISO, default today)")
    _common(p)
    p.set_defaults(func=cmd_metadata_gen)

    p = sub.add_parser("labels-gen", help="generate sparse training label maps")
    p.add_argument("model", help="sparse model directory")
    _common(p)
    p.set_defaults(func=cmd_labels_gen)

    p = sub.add_parser("detect-changes", help="detect changes from one traversal")
    p.add_argument("--model", required=True, help="geo-registered reference model")
    p.add_argument("--layer", required=True,
                   help="temporary layer directory or semantic metadata CSV")
    p.add_argument("--detections", required=True)
    p.add_argument("--dmaps", required=True, help="directory of <image_name>.b3dm maps")
    p.add_argument("--gps", required=True, help="GPS trace CSV")
    p.add_argument("--frame-times", required=True, help="image_name,t_s CSV")
    p.add_argument("--registered-poses", default=None,
                   help="optional registered poses CSV (re-anchoring)")
    p.add_argument("--vehicle", required=True, help="reporting vehicle id")
    p.add_argument("--date", default=None, help="traversal date (ISO, default today)")
    _common(p)
    p.set_defaults(func=cmd_detect_changes)

    p = sub.add_parser("promote", help="promote permanent changes into the semantic layer")
    p.add_argument("--layer", required=True, help="temporary layer directory")
    p.add_argument("--semantic", required=True, help="semantic metadata CSV")
    p.add_argument("--min-vehicles", type=int, required=True)
    p.add_argument("--min-days", type=int, required=True)
    _common(p)
    p.set_defaults(func=cmd_promote)

    p = sub.add_parser("eval", help="evaluation statistics, CSV and figures")
    p.add_argument("--kind", choices=["pose", "pixel", "localization", "changes"],
                   required=True)
    p.add_argument("--poses", help="pose kind: estimated poses CSV")
    p.add_argument("--reference", help="pose kind: reference trace CSV (e.g. RTK)")
    p.add_argument("--pred", help="pixel/localization kinds: predictions")
    p.add_argument("--truth", help="pixel/localization kinds: ground truth")
    p.add_argument("--report", help="changes kind: change report JSONL")
    p.add_argument("--truth-changes", help="changes kind: true changes JSONL")
    p.add_argument("--truth-unchanged", help="changes kind: unchanged truth CSV")
    _common(p)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
