"""Shared builders for the test suite."""

from __future__ import annotations

import numpy as np

from signmap.rotations import rotmat_to_quat
from signmap.sfm import (CameraIntrinsics, CameraModel, CameraPose, ImageRecord,
                         Keypoint, Reconstruction, ScenePoint)


def random_rotation(rng) -> np.ndarray:
    from signmap.rotations import quat_to_rotmat
    q = rng.normal(size=4)
    return quat_to_rotmat(q / np.linalg.norm(q))


def random_pose(rng) -> CameraPose:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return CameraPose(q, rng.normal(scale=10.0, size=3))


def random_reconstruction(rng, n_points: int = 50, n_images: int = 6,
                          unmatched_per_image: int = 2) -> Reconstruction:
    """A structurally valid random model: every point is observed by 2..4
    consecutive images, plus a few unmatched keypoints per image.

    RNG draws are batched so large models (10^4 points) build quickly.
    """
    cameras = {
        1: CameraIntrinsics(1, CameraModel.PINHOLE, 1280, 960,
                            float(rng.uniform(500, 1500)), float(rng.uniform(500, 1500)),
                            float(rng.uniform(500, 700)), float(rng.uniform(400, 500))),
        2: CameraIntrinsics(2, CameraModel.SIMPLE_PINHOLE, 640, 480,
                            800.0, 800.0, 320.0, 240.0),
    }
    image_ids = list(range(1, n_images + 1))
    n_obs = rng.integers(2, min(4, n_images) + 1, size=n_points)
    starts = rng.integers(0, n_images, size=n_points)
    xyz = rng.normal(scale=50.0, size=(n_points, 3))
    rgb = rng.integers(0, 256, size=(n_points, 3))
    errors = rng.uniform(0, 2, size=n_points)
    total_obs = int(n_obs.sum())
    kp_x = rng.uniform(0, 1280, size=total_obs)
    kp_y = rng.uniform(0, 960, size=total_obs)
    keypoints: dict[int, list[Keypoint]] = {i: [] for i in image_ids}
    points = {}
    obs = 0
    for idx in range(n_points):
        pid = idx + 1
        ids = sorted({(int(starts[idx]) + j) % n_images + 1
                      for j in range(int(n_obs[idx]))})
        track = []
        for iid in ids:
            kps = keypoints[iid]
            track.append((iid, len(kps)))
            kps.append(Keypoint(float(kp_x[obs]), float(kp_y[obs]), pid))
            obs += 1
        points[pid] = ScenePoint(pid, xyz[idx],
                                 tuple(int(v) for v in rgb[idx]),
                                 float(errors[idx]), tuple(track))
    for iid in image_ids:
        for _ in range(unmatched_per_image):
            keypoints[iid].append(Keypoint(float(rng.uniform(0, 1280)),
                                           float(rng.uniform(0, 960)), None))
    images = {
        iid: ImageRecord(iid, f"img_{iid:04d}.png", random_pose(rng),
                         1 if iid % 2 else 2, tuple(keypoints[iid]))
        for iid in image_ids
    }
    r = Reconstruction(cameras=cameras, images=images, points=points,
                       geo_registered=bool(rng.integers(0, 2)))
    r.validate()
    return r


def assert_reconstruction_equal(a: Reconstruction, b: Reconstruction) -> None:
    assert a.geo_registered == b.geo_registered
    assert set(a.cameras) == set(b.cameras)
    for cid, cam_a in a.cameras.items():
        assert cam_a == b.cameras[cid]
    assert set(a.images) == set(b.images)
    for iid, img_a in a.images.items():
        img_b = b.images[iid]
        assert img_a.name == img_b.name
        assert img_a.camera_id == img_b.camera_id
        assert np.array_equal(img_a.pose.rotation_wc, img_b.pose.rotation_wc)
        assert np.array_equal(img_a.pose.translation_wc, img_b.pose.translation_wc)
        assert img_a.keypoints == img_b.keypoints
    assert set(a.points) == set(b.points)
    for pid, p_a in a.points.items():
        p_b = b.points[pid]
        assert np.array_equal(p_a.xyz, p_b.xyz)
        assert p_a.rgb == p_b.rgb
        assert p_a.reproj_error == p_b.reproj_error
        assert p_a.track == p_b.track


def pose_from_rotation(r_wc, center) -> CameraPose:
    r_wc = np.asarray(r_wc, dtype=float)
    center = np.asarray(center, dtype=float)
    return CameraPose(rotmat_to_quat(r_wc), -(r_wc @ center))
