import datetime

import numpy as np
import pytest

from signmap.change import ChangeEvent, ChangeKind, Evidence
from signmap.errors import ValidationError
from signmap.geodesy import EnuFrame, GeodeticCoord, enu_unproject
from signmap.metadata import MetadataEntry, MetadataStore
from signmap.metrics import (ChannelErrors, ConfusionMatrix, ErrorStats,
                             change_confusion, localization_error_stats,
                             pixel_errors, pose_error_vs_trace)
from signmap.pose import GpsSample, PoseEstimate, PoseSource
from signmap.realtime import DistanceMap, empty_distance_map

FRAME = EnuFrame.at(GeodeticCoord(60.19, 24.83, 20.0))
DATE = datetime.date(2026, 2, 1)


def dmap(values, width=8, height=6, name="f.png"):
    data = empty_distance_map(name, width, height)
    for (x, y), b in values.items():
        data[y, x] = b
    return DistanceMap(name, data)


def entry_at(east, north, class_name="stop"):
    coord = enu_unproject(FRAME, [east, north, 0.0])
    return MetadataEntry(coord.lat_deg, coord.lon_deg, class_name, (1, 2, 3),
                         datetime.date(2026, 1, 2))


def estimate_at(enu, name="e.png"):
    return PoseEstimate(name, np.eye(3), np.asarray(enu, dtype=float),
                        PoseSource.REGISTERED)


def event_at(east, north, kind=ChangeKind.APPEARED, class_name="stop"):
    coord = enu_unproject(FRAME, [east, north, 0.0])
    return ChangeEvent(kind, class_name,
                       GeodeticCoord(coord.lat_deg, coord.lon_deg, 0.0),
                       Evidence("v1", DATE, 3), None)


class TestPixelErrors:
    def test_identical_maps_zero_error(self):
        gt = dmap({(1, 1): [1.0, 2.0, 10.0], (2, 3): [0.5, 0.5, 5.0]})
        errors = pixel_errors(gt, gt)
        assert all(v == 0.0 for v in errors.abs_error.values())
        assert all(v == 0.0 for v in errors.rel_error.values())

    def test_single_pixel_hand_case(self):
        gt = dmap({(1, 1): [10.0, 10.0, 10.0]})
        pred = dmap({(1, 1): [12.0, 12.0, 12.0]})
        errors = pixel_errors(pred, gt)
        assert errors.abs_error["depth"] == pytest.approx(2.0, abs=1e-12)
        assert errors.rel_error["depth"] == pytest.approx(0.2, abs=1e-12)

    def test_two_pixel_hand_case(self):
        gt = dmap({(1, 1): [10.0, 10.0, 10.0], (2, 2): [20.0, 20.0, 20.0]})
        pred = dmap({(1, 1): [12.0, 12.0, 12.0], (2, 2): [18.0, 18.0, 18.0]})
        errors = pixel_errors(pred, gt)
        assert errors.abs_error["depth"] == pytest.approx(2.0, abs=1e-12)
        assert errors.rel_error["depth"] == pytest.approx(0.15, abs=1e-12)

    def test_prediction_only_counted_where_gt_labeled(self):
        gt = dmap({(1, 1): [10.0, 10.0, 10.0]})
        pred = dmap({(1, 1): [10.0, 10.0, 10.0], (5, 5): [99.0, 99.0, 99.0]})
        errors = pixel_errors(pred, gt)
        assert errors.labeled_pixels == 1
        assert errors.abs_error["depth"] == 0.0

    def test_zero_gt_excluded_from_relative(self):
        gt = dmap({(1, 1): [0.0, 5.0, 10.0]})
        pred = dmap({(1, 1): [1.0, 6.0, 12.0]})
        errors = pixel_errors(pred, gt)
        assert errors.zero_gt_excluded == 1
        assert np.isnan(errors.rel_error["lateral"])
        assert errors.abs_error["lateral"] == pytest.approx(1.0)
        assert errors.rel_error["depth"] == pytest.approx(0.2)

    def test_pooling_over_image_set(self):
        gt1 = dmap({(1, 1): [10.0, 10.0, 10.0]}, name="a.png")
        gt2 = dmap({(1, 1): [20.0, 20.0, 20.0]}, name="b.png")
        pred1 = dmap({(1, 1): [12.0, 12.0, 12.0]}, name="a.png")
        pred2 = dmap({(1, 1): [18.0, 18.0, 18.0]}, name="b.png")
        pooled = pixel_errors([pred1, pred2], [gt1, gt2])
        assert pooled.abs_error["depth"] == pytest.approx(2.0, abs=1e-12)
        assert pooled.rel_error["depth"] == pytest.approx(0.15, abs=1e-12)
        swapped = pixel_errors([pred2, pred1], [gt2, gt1])
        assert swapped.abs_error == pooled.abs_error

    def test_unlabeled_count_does_not_affect_result(self):
        gt_small = dmap({(1, 1): [10.0, 10.0, 10.0]}, width=4, height=4)
        pred_small = dmap({(1, 1): [12.0, 12.0, 12.0]}, width=4, height=4)
        gt_large = dmap({(1, 1): [10.0, 10.0, 10.0]}, width=64, height=64)
        pred_large = dmap({(1, 1): [12.0, 12.0, 12.0]}, width=64, height=64)
        assert pixel_errors(pred_small, gt_small).abs_error == \
            pixel_errors(pred_large, gt_large).abs_error

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            pixel_errors(dmap({}, width=4), dmap({}, width=8))

    def test_no_labeled_pixels_rejected(self):
        with pytest.raises(ValidationError):
            pixel_errors(dmap({}), dmap({}))


class TestPoseError:
    def test_coinciding_estimates_zero(self):
        samples = [GpsSample(float(i), enu_unproject(FRAME, [i * 10.0, 0.0, 0.0]))
                   for i in range(5)]
        estimates = [estimate_at([i * 10.0, 0.0, 0.0]) for i in range(5)]
        stats = pose_error_vs_trace(estimates, samples, FRAME)
        # geodetic round trip of the sample coordinates costs up to ~1e-6 m
        assert stats.median == pytest.approx(0.0, abs=2e-6)
        assert stats.n == 5

    def test_pythagorean_offset(self):
        samples = [GpsSample(0.0, enu_unproject(FRAME, [0.0, 0.0, 0.0]))]
        stats = pose_error_vs_trace([estimate_at([3.0, 4.0, 0.0])], samples, FRAME)
        assert stats.median == pytest.approx(5.0, abs=1e-6)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(23)
        ref_enu = rng.uniform(-500, 500, size=(200, 3))
        samples = [GpsSample(float(i), enu_unproject(FRAME, p))
                   for i, p in enumerate(ref_enu)]
        est_enu = rng.uniform(-500, 500, size=(100, 3))
        estimates = [estimate_at(p, name=f"e{i}.png") for i, p in enumerate(est_enu)]
        stats = pose_error_vs_trace(estimates, samples, FRAME)
        ref_back = np.array([[*map(float, p)] for p in ref_enu])
        brute = np.array([np.min(np.linalg.norm(ref_back - e, axis=1))
                          for e in est_enu])
        assert stats.median == pytest.approx(float(np.median(brute)), abs=1e-6)
        assert stats.mean == pytest.approx(float(np.mean(brute)), abs=1e-6)

    def test_empty_inputs_rejected(self):
        with pytest.raises(ValidationError):
            pose_error_vs_trace([], [], FRAME)


class TestLocalizationError:
    def test_identical_stores_all_match(self):
        store = MetadataStore([entry_at(0, 0), entry_at(50, 0, "yield")], FRAME)
        stats, up, ut = localization_error_stats(store, store, 20.0)
        assert stats.n == 2
        assert stats.median == pytest.approx(0.0, abs=1e-9)
        assert up == [] and ut == []

    def test_extra_prediction_unmatched(self):
        truth = MetadataStore([entry_at(0, 0)], FRAME)
        pred = MetadataStore([entry_at(1, 0), entry_at(100, 0)], FRAME)
        stats, up, ut = localization_error_stats(pred, truth, 20.0)
        assert stats.n == 1
        assert len(up) == 1 and ut == []

    def test_known_offsets_median(self):
        truth = MetadataStore([entry_at(0, 0), entry_at(100, 0), entry_at(200, 0)],
                              FRAME)
        pred = MetadataStore([entry_at(1, 0), entry_at(102, 0), entry_at(203, 0)],
                             FRAME)
        stats, _, _ = localization_error_stats(pred, truth, 20.0)
        assert stats.median == pytest.approx(2.0, abs=1e-6)

    def test_classes_never_cross_match(self):
        truth = MetadataStore([entry_at(0, 0, "stop")], FRAME)
        pred = MetadataStore([entry_at(0.5, 0, "yield")], FRAME)
        stats, up, ut = localization_error_stats(pred, truth, 20.0)
        assert stats.n == 0
        assert len(up) == 1 and len(ut) == 1

    def test_matched_bounded_by_min_size(self):
        truth = MetadataStore([entry_at(float(i), 0) for i in range(5)], FRAME)
        pred = MetadataStore([entry_at(float(i) + 0.1, 0) for i in range(3)], FRAME)
        stats, _, ut = localization_error_stats(pred, truth, 20.0)
        assert stats.n == 3
        assert len(ut) == 2


class TestChangeConfusion:
    def test_perfect_report(self):
        truth_changes = [event_at(0, 0, ChangeKind.REMOVED)]
        unchanged = [entry_at(100, 0, "yield")]
        reported = [event_at(1, 0, ChangeKind.REMOVED)]
        cm = change_confusion(reported, truth_changes, unchanged, FRAME)
        assert (cm.tp, cm.fp, cm.fn, cm.tn) == (1, 0, 0, 1)
        assert cm.accuracy == 1.0

    def test_empty_everything(self):
        cm = change_confusion([], [], [], FRAME)
        assert (cm.tp, cm.fp, cm.fn, cm.tn) == (0, 0, 0, 0)
        assert np.isnan(cm.accuracy)

    def test_missed_change_is_false_negative(self):
        cm = change_confusion([], [event_at(0, 0)], [], FRAME)
        assert cm.fn == 1

    def test_spurious_report_is_false_positive_and_kills_tn(self):
        unchanged = [entry_at(0, 0, "stop"), entry_at(100, 0, "yield")]
        reported = [event_at(1, 0, ChangeKind.REMOVED, "stop")]
        cm = change_confusion(reported, [], unchanged, FRAME)
        assert (cm.tp, cm.fp, cm.fn, cm.tn) == (0, 1, 0, 1)

    def test_kind_must_match(self):
        truth_changes = [event_at(0, 0, ChangeKind.REMOVED)]
        reported = [event_at(0, 0, ChangeKind.APPEARED)]
        cm = change_confusion(reported, truth_changes, [], FRAME)
        assert cm.tp == 0 and cm.fp == 1 and cm.fn == 1

    def test_campus_shaped_arithmetic(self):
        # 20 unchanged signs, 3 erroneous reports near 3 of them -> 0.85
        unchanged = [entry_at(float(30 * i), 0.0, f"class_{i}") for i in range(20)]
        reported = [
            event_at(0.0, 1.0, ChangeKind.APPEARED, "class_0"),
            event_at(30.0, 1.0, ChangeKind.APPEARED, "class_1"),
            event_at(60.0, 1.0, ChangeKind.REMOVED, "class_2"),
        ]
        cm = change_confusion(reported, [], unchanged, FRAME)
        assert (cm.tp, cm.fp, cm.fn, cm.tn) == (0, 3, 0, 17)
        assert cm.accuracy == pytest.approx(0.85, abs=1e-12)

    def test_counts_validated(self):
        with pytest.raises(ValidationError):
            ConfusionMatrix(-1, 0, 0, 0)


class TestErrorStats:
    def test_from_values(self):
        stats = ErrorStats.from_values([1.0, 2.0, 3.0])
        assert stats.median == 2.0
        assert stats.mean == 2.0
        assert stats.n == 3

    def test_empty(self):
        stats = ErrorStats.from_values([])
        assert stats.n == 0
        assert np.isnan(stats.median)
