import datetime
import math

import numpy as np
import pytest

from signmap.errors import ParseError, ValidationError
from signmap.pose import PoseEstimate, PoseSource
from signmap.realtime import (DistanceMap, ObservationTrack, RangeGate,
                              empty_distance_map, generate_sparse_labels,
                              locate_detection, pixel_to_wcs, read_distance_map,
                              update_tracks, write_distance_map)
from signmap.rotations import rot_z
from signmap.semantics import Detection
from signmap.sfm import (CameraIntrinsics, CameraModel, ImageRecord, Keypoint,
                         Reconstruction, ScenePoint)

from helpers import pose_from_rotation, random_rotation

DATE = datetime.date(2026, 2, 1)
CAM = CameraIntrinsics(1, CameraModel.PINHOLE, 64, 48, 50.0, 50.0, 32.0, 24.0)


def estimate(rotation_cw=None, center=(0.0, 0.0, 0.0)):
    return PoseEstimate("f.png", np.eye(3) if rotation_cw is None else rotation_cw,
                        np.asarray(center, dtype=float), PoseSource.REGISTERED)


def dmap_with(values, width=64, height=48):
    data = empty_distance_map("f.png", width, height)
    for (x, y), b in values.items():
        data[y, x] = b
    return DistanceMap("f.png", data)


class TestPixelToWcs:
    def test_identity_frame(self):
        assert np.allclose(pixel_to_wcs(estimate(), [1.0, 2.0, 3.0]), [1, 2, 3])

    def test_rotated_frame(self):
        # world->camera rotation Rz(90 deg); camera->world applies its transpose
        est = estimate(rotation_cw=rot_z(math.pi / 2).T, center=(10.0, 0.0, 0.0))
        got = pixel_to_wcs(est, [1.0, 0.0, 1e-9])
        assert np.allclose(got, [10.0, -1.0, 0.0], atol=1e-8)

    def test_unlabeled_pixel_is_an_error(self):
        with pytest.raises(ValidationError):
            pixel_to_wcs(estimate(), [np.nan, np.nan, np.nan])

    def test_nonpositive_depth_is_an_error(self):
        with pytest.raises(ValidationError):
            pixel_to_wcs(estimate(), [0.0, 0.0, -1.0])

    def test_encode_decode_identity(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            r_cw = random_rotation(rng)
            center = rng.normal(scale=100.0, size=3)
            p_world = rng.normal(scale=50.0, size=3)
            b = r_cw.T @ (p_world - center)
            if b[2] <= 0:
                continue
            est = estimate(rotation_cw=r_cw, center=center)
            assert np.allclose(pixel_to_wcs(est, b), p_world, atol=1e-9)


def one_point_reconstruction(point_xyz, kp_xy, extra=(), width=64, height=48):
    keypoints = [Keypoint(kp_xy[0], kp_xy[1], 1)] + [Keypoint(x, y, pid)
                                                     for x, y, pid in extra]
    track = [(1, 0)]
    points = {1: ScenePoint(1, np.asarray(point_xyz, dtype=float), (9, 9, 9), 0.0,
                            tuple(track))}
    for i, (_, _, pid) in enumerate(extra, start=1):
        if pid is not None and pid != 1:
            points[pid] = ScenePoint(pid, np.asarray(point_xyz, dtype=float) + 1.0,
                                     (1, 1, 1), 0.0, ((1, i),))
    cam = CameraIntrinsics(1, CameraModel.PINHOLE, width, height, 50.0, 50.0,
                           width / 2, height / 2)
    image = ImageRecord(1, "f.png", pose_from_rotation(np.eye(3), [0.0, 0.0, 0.0]),
                        1, tuple(keypoints))
    r = Reconstruction(cameras={1: cam}, images={1: image}, points=points)
    r.validate()
    return r


class TestSparseLabels:
    def test_no_registered_keypoints_all_nan(self):
        cam = CAM
        image = ImageRecord(1, "f.png", pose_from_rotation(np.eye(3), [0, 0, 0]), 1,
                            (Keypoint(5.0, 5.0, None),))
        r = Reconstruction(cameras={1: cam}, images={1: image}, points={})
        dmap = generate_sparse_labels(r, image)
        assert not np.isfinite(dmap.pixels).any()

    def test_point_on_optical_axis(self):
        r = one_point_reconstruction([0.0, 0.0, 10.0], (32.0, 24.0))
        dmap = generate_sparse_labels(r, r.images[1])
        assert np.allclose(dmap.at(32, 24), [0.0, 0.0, 10.0], atol=1e-9)

    def test_labeled_count_matches_registered_keypoints(self):
        r = one_point_reconstruction([0.0, 0.0, 10.0], (32.0, 24.0),
                                     extra=((10.0, 10.0, 2), (50.0, 40.0, None)))
        dmap = generate_sparse_labels(r, r.images[1])
        labeled = int(np.all(np.isfinite(dmap.pixels), axis=2).sum())
        assert labeled == 2

    def test_collision_keeps_smaller_depth(self):
        r = one_point_reconstruction([0.0, 0.0, 10.0], (32.0, 24.0),
                                     extra=((32.2, 24.2, 2),))
        dmap = generate_sparse_labels(r, r.images[1])
        assert dmap.at(32, 24)[2] == pytest.approx(10.0)

    def test_labels_round_trip_to_world(self):
        rng = np.random.default_rng(3)
        r_cw = random_rotation(rng)
        center = rng.normal(scale=10.0, size=3)
        p = center + r_cw @ np.array([0.1, -0.2, 7.0])
        pose = pose_from_rotation(r_cw.T, center)
        image = ImageRecord(1, "f.png", pose, 1, (Keypoint(30.0, 20.0, 1),))
        r = Reconstruction(cameras={1: CAM}, images={1: image},
                           points={1: ScenePoint(1, p, (0, 0, 0), 0.0, ((1, 0),))})
        dmap = generate_sparse_labels(r, image)
        est = estimate(rotation_cw=r_cw, center=center)
        assert np.allclose(pixel_to_wcs(est, dmap.at(30, 20)), p, atol=1e-5)


class TestLocateDetection:
    def test_inside_gate_emits_position(self):
        det = Detection("stop", 1.0, (30.0, 22.0, 34.0, 26.0))
        dmap = dmap_with({(32, 24): [0.0, 0.0, 30.0]})
        got = locate_detection(det, dmap, estimate(), RangeGate(3.0, 50.0))
        assert got is not None
        assert got[0] == "stop"
        assert np.allclose(got[1], [0.0, 0.0, 30.0], atol=1e-6)

    def test_beyond_gate_discarded(self):
        det = Detection("stop", 1.0, (30.0, 22.0, 34.0, 26.0))
        dmap = dmap_with({(32, 24): [0.0, 0.0, 60.0]})
        assert locate_detection(det, dmap, estimate(), RangeGate(3.0, 50.0)) is None

    def test_too_close_discarded(self):
        det = Detection("stop", 1.0, (30.0, 22.0, 34.0, 26.0))
        dmap = dmap_with({(32, 24): [0.0, 0.0, 1.0]})
        assert locate_detection(det, dmap, estimate(), RangeGate(3.0, 50.0)) is None

    def test_unlabeled_bbox_returns_none(self):
        det = Detection("stop", 1.0, (30.0, 22.0, 34.0, 26.0))
        assert locate_detection(det, dmap_with({}), estimate(), RangeGate()) is None

    def test_center_falls_back_to_nearest_labeled(self):
        det = Detection("stop", 1.0, (28.0, 20.0, 36.0, 28.0))
        dmap = dmap_with({(30, 23): [0.0, 0.0, 20.0], (35, 28): [0.0, 0.0, 25.0]})
        got = locate_detection(det, dmap, estimate(), RangeGate())
        assert got is not None
        assert got[1][2] == pytest.approx(20.0)


class TestTracks:
    def test_first_observation_opens_track(self):
        tracks = update_tracks([], ("stop", np.array([1.0, 2.0, 3.0]), DATE))
        assert len(tracks) == 1
        assert tracks[0].count == 1
        assert np.allclose(tracks[0].mean_enu, [1, 2, 3])

    def test_two_observations_average(self):
        tracks = update_tracks([], ("stop", np.array([0.0, 0.0, 0.0]), DATE))
        update_tracks(tracks, ("stop", np.array([2.0, 0.0, 0.0]), DATE))
        assert len(tracks) == 1
        assert tracks[0].count == 2
        assert np.allclose(tracks[0].mean_enu, [1.0, 0.0, 0.0])

    def test_distant_same_class_opens_new_track(self):
        tracks = update_tracks([], ("stop", np.array([0.0, 0.0, 0.0]), DATE))
        update_tracks(tracks, ("stop", np.array([30.0, 0.0, 0.0]), DATE))
        assert len(tracks) == 2

    def test_other_class_never_associates(self):
        tracks = update_tracks([], ("stop", np.array([0.0, 0.0, 0.0]), DATE))
        update_tracks(tracks, ("yield", np.array([0.5, 0.0, 0.0]), DATE))
        assert len(tracks) == 2

    def test_running_mean_is_exact_arithmetic_mean(self):
        rng = np.random.default_rng(11)
        obs = rng.normal(scale=1.0, size=(40, 3))
        for order in (range(40), reversed(range(40))):
            tracks = []
            for i in order:
                update_tracks(tracks, ("stop", obs[i] * 0.1, DATE), r_assoc=1e9)
            assert len(tracks) == 1
            expected = (obs * 0.1).mean(axis=0)
            assert np.allclose(tracks[0].mean_enu, expected, rtol=1e-12, atol=1e-15)

    def test_tie_association_prefers_older_track(self):
        tracks = [ObservationTrack("stop", np.array([0.0, 0.0, 0.0]), 1, DATE, DATE),
                  ObservationTrack("stop", np.array([2.0, 0.0, 0.0]), 1, DATE, DATE)]
        update_tracks(tracks, ("stop", np.array([1.0, 0.0, 0.0]), DATE))
        assert tracks[0].count == 2
        assert tracks[1].count == 1


class TestDistanceMapFile:
    def test_round_trip(self, tmp_path):
        data = empty_distance_map("f.png", 5, 4)
        data[1, 2] = [1.5, -0.5, 20.0]
        dmap = DistanceMap("f.png", data)
        path = tmp_path / "f.b3dm"
        write_distance_map(dmap, path)
        back = read_distance_map(path, "f.png")
        assert back.width == 5 and back.height == 4
        assert np.allclose(back.at(2, 1), [1.5, -0.5, 20.0])
        finite_back = np.isfinite(back.pixels)
        assert np.array_equal(finite_back, np.isfinite(dmap.pixels))

    def test_magic_checked(self, tmp_path):
        path = tmp_path / "bad.b3dm"
        path.write_bytes(b"NOPE" + b"\x00" * 8)
        with pytest.raises(ParseError, match="magic"):
            read_distance_map(path)

    def test_truncation_detected(self, tmp_path):
        path = tmp_path / "short.b3dm"
        import struct
        path.write_bytes(b"B3DM" + struct.pack("<II", 4, 4) + b"\x00" * 10)
        with pytest.raises(ParseError):
            read_distance_map(path)

    def test_gate_validation(self):
        with pytest.raises(ValidationError):
            RangeGate(10.0, 5.0)
        with pytest.raises(ValidationError):
            RangeGate(-1.0, 5.0)

    def test_labeled_pixels_require_positive_depth(self):
        data = empty_distance_map("f.png", 4, 4)
        data[1, 1] = [0.5, 0.5, -2.0]
        with pytest.raises(ValidationError):
            DistanceMap("f.png", data)
