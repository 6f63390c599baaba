import math

import numpy as np
import pytest

from signmap.errors import ValidationError
from signmap.geodesy import EnuFrame, GeodeticCoord, enu_unproject
from signmap.pose import (GpsSample, GpsTrace, PoseEstimate, PoseSource,
                          ReferenceIndex, estimate_pose, nearest_reference,
                          propagate_orientation, read_frame_times, read_gps_trace,
                          read_registered_poses, write_frame_times, write_gps_trace,
                          write_registered_poses)
from signmap.rotations import orthonormality_defect, rot_z, rotation_angle
from signmap.sfm import (CameraIntrinsics, CameraModel, ImageRecord, Reconstruction,
                         camera_center)

from helpers import pose_from_rotation, random_rotation

FRAME = EnuFrame.at(GeodeticCoord(60.19, 24.83, 20.0))
CAM = CameraIntrinsics(1, CameraModel.PINHOLE, 640, 480, 600.0, 600.0, 320.0, 240.0)


def line_reconstruction(n=10, spacing=5.0):
    """Reference images along +east, all looking east."""
    r_cw = np.column_stack([[0, -1, 0], [0, 0, -1], [1, 0, 0]]).astype(float)
    images = {}
    for i in range(n):
        center = np.array([i * spacing, 0.0, 1.5])
        images[i + 1] = ImageRecord(i + 1, f"ref_{i:03d}.png",
                                    pose_from_rotation(r_cw.T, center), 1, ())
    return Reconstruction(cameras={1: CAM}, images=images, points={},
                          geo_registered=True)


class TestGpsTrace:
    def test_timestamps_must_not_decrease(self):
        samples = [GpsSample(1.0, GeodeticCoord(60, 24, 0)),
                   GpsSample(0.5, GeodeticCoord(60, 24, 0))]
        with pytest.raises(ValidationError):
            GpsTrace(samples)

    def test_interpolates_between_brackets(self):
        trace = GpsTrace([GpsSample(0.0, GeodeticCoord(60.0, 24.0, 0.0)),
                          GpsSample(2.0, GeodeticCoord(60.2, 24.4, 10.0))])
        mid = trace.at(1.0)
        assert mid.lat_deg == pytest.approx(60.1)
        assert mid.lon_deg == pytest.approx(24.2)
        assert mid.alt_m == pytest.approx(5.0)

    def test_clamps_to_ends(self):
        trace = GpsTrace([GpsSample(0.0, GeodeticCoord(60.0, 24.0, 0.0)),
                          GpsSample(2.0, GeodeticCoord(60.2, 24.4, 10.0))])
        assert trace.at(-5.0) == trace.samples[0].coord
        assert trace.at(99.0) == trace.samples[-1].coord

    def test_csv_round_trip(self, tmp_path):
        trace = GpsTrace([GpsSample(0.0, GeodeticCoord(60.0, 24.0, 1.0)),
                          GpsSample(0.1, GeodeticCoord(60.000001, 24.0, 1.0))])
        path = tmp_path / "gps.csv"
        write_gps_trace(trace, path)
        back = read_gps_trace(path)
        assert len(back) == 2
        assert back.samples[1].coord.lat_deg == pytest.approx(60.000001, abs=1e-9)


class TestNearestReference:
    def test_query_at_reference_returns_it(self):
        index = ReferenceIndex(line_reconstruction(), FRAME)
        hit = nearest_reference(index, [10.0, 0.0, 1.5])
        assert hit.name == "ref_002.png"

    def test_midpoint_tie_resolves_to_lower_id(self):
        index = ReferenceIndex(line_reconstruction(), FRAME)
        hit = nearest_reference(index, [2.5, 0.0, 1.5])
        assert hit.image_id == 1

    def test_matches_linear_scan_oracle(self):
        r = line_reconstruction(n=40, spacing=3.7)
        index = ReferenceIndex(r, FRAME)
        centers = {iid: camera_center(img.pose) for iid, img in r.images.items()}
        rng = np.random.default_rng(19)
        for _ in range(100):
            q = rng.uniform(-20, 160, 3)
            hit = nearest_reference(index, q)
            brute = min(centers, key=lambda iid: (np.linalg.norm(centers[iid] - q), iid))
            assert hit.image_id == brute


class TestPropagateOrientation:
    def test_unchanged_reference_returns_previous(self):
        r_prev = random_rotation(np.random.default_rng(1))
        ref = random_rotation(np.random.default_rng(2))
        out = propagate_orientation(r_prev, ref, ref)
        assert np.allclose(out, r_prev, atol=1e-12)

    def test_rotating_reference_rotates_output(self):
        out = propagate_orientation(np.eye(3), np.eye(3), rot_z(math.pi / 2))
        assert np.allclose(out, rot_z(math.pi / 2), atol=1e-12)

    def test_fixed_mount_chain_is_exact(self):
        # camera = fixed offset M composed with the reference orientation:
        # the propagated chain must keep M invariant to 1e-9 rad over 100 steps
        rng = np.random.default_rng(3)
        mount = random_rotation(rng)
        refs = [rot_z(math.radians(1.0 * k)) for k in range(101)]
        r = mount @ refs[0]
        for k in range(1, 101):
            r = propagate_orientation(r, refs[k - 1], refs[k])
            assert rotation_angle(r @ (mount @ refs[k]).T) < 1e-9

    def test_output_always_orthonormal(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            wobble = 1e-7 * rng.normal(size=(3, 3))
            out = propagate_orientation(random_rotation(rng) + wobble,
                                        random_rotation(rng),
                                        random_rotation(rng))
            assert orthonormality_defect(out) < 1e-12
            assert np.linalg.det(out) > 0

    def test_rejects_non_orthonormal(self):
        bad = np.eye(3) * 1.5
        with pytest.raises(ValidationError):
            propagate_orientation(bad, np.eye(3), np.eye(3))

    def test_jitter_error_grows_at_most_linearly(self):
        rng = np.random.default_rng(5)
        eps_deg = 0.1
        mount = random_rotation(rng)
        true_refs = [rot_z(math.radians(0.5 * k)) for k in range(101)]
        jittered = []
        for ref in true_refs:
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            angle = math.radians(eps_deg)
            k_mat = np.array([[0, -axis[2], axis[1]],
                              [axis[2], 0, -axis[0]],
                              [-axis[1], axis[0], 0]])
            jitter = (np.eye(3) + math.sin(angle) * k_mat
                      + (1 - math.cos(angle)) * k_mat @ k_mat)
            jittered.append(jitter @ ref)
        r = mount @ true_refs[0]
        for k in range(1, 101):
            r = propagate_orientation(r, jittered[k - 1], jittered[k])
            err = rotation_angle(r @ (mount @ true_refs[k]).T)
            assert err <= math.radians(2 * eps_deg) * k + 1e-12


class TestEstimatePose:
    def make_gps(self, enu):
        return GpsSample(0.0, enu_unproject(FRAME, enu))

    def test_registered_pose_passthrough(self):
        index = ReferenceIndex(line_reconstruction(), FRAME)
        registered = pose_from_rotation(rot_z(0.3), [1.0, 2.0, 3.0])
        est = estimate_pose("f.png", self.make_gps([0, 0, 0]), index,
                            registered=registered)
        assert est.source is PoseSource.REGISTERED
        assert np.allclose(est.center, [1.0, 2.0, 3.0], atol=1e-9)
        assert np.allclose(est.rotation_cw, registered.rotation_matrix().T, atol=1e-12)

    def test_no_source_is_an_error(self):
        index = ReferenceIndex(line_reconstruction(), FRAME)
        with pytest.raises(ValidationError):
            estimate_pose("f.png", self.make_gps([0, 0, 0]), index)

    def test_off_map_is_an_error(self):
        index = ReferenceIndex(line_reconstruction(), FRAME)
        prev = PoseEstimate("p.png", np.eye(3), np.zeros(3), PoseSource.REGISTERED)
        with pytest.raises(ValidationError, match="off the mapped"):
            estimate_pose("f.png", self.make_gps([500.0, 0, 1.5]), index, prev=prev)

    def test_propagation_from_gps(self):
        r = line_reconstruction()
        index = ReferenceIndex(r, FRAME)
        ref_cw = r.images[1].pose.rotation_matrix().T
        prev = PoseEstimate("p.png", ref_cw, np.array([0.0, 0.0, 1.5]),
                            PoseSource.REGISTERED)
        est = estimate_pose("f.png", self.make_gps([5.0, 0.0, 1.5]), index, prev=prev)
        assert est.source is PoseSource.PROPAGATED
        assert np.allclose(est.center, [5.0, 0.0, 1.5], atol=1e-6)
        assert np.allclose(est.rotation_cw, ref_cw, atol=1e-9)


class TestPoseFiles:
    def test_frame_times_round_trip(self, tmp_path):
        rows = [("a.png", 0.0), ("b.png", 0.1)]
        path = tmp_path / "ft.csv"
        write_frame_times(rows, path)
        back = read_frame_times(path)
        assert back[0][0] == "a.png"
        assert back[1][1] == pytest.approx(0.1)

    def test_registered_poses_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        poses = {"a.png": pose_from_rotation(random_rotation(rng), rng.normal(size=3))}
        path = tmp_path / "poses.csv"
        write_registered_poses(poses, path)
        back = read_registered_poses(path)
        assert np.allclose(back["a.png"].rotation_wc, poses["a.png"].rotation_wc)
        assert np.allclose(back["a.png"].translation_wc, poses["a.png"].translation_wc)
