import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splat4d.camera import (
    CameraIntrinsics,
    CameraPose,
    CameraView,
    compute_ray_map,
    look_at,
    plucker_encode,
    project_gaussian,
    project_points,
    projection_jacobian,
    read_cameras,
    write_cameras,
)
from splat4d.exceptions import BehindCameraError, FormatError, InvalidInputError
from splat4d.gaussians import ConditionalGaussian3

from conftest import orbit


def identity_view(w=8, h=6, f=10.0):
    return CameraView(CameraIntrinsics(f, f, w / 2, h / 2, w, h), CameraPose(np.eye(4)))


def test_intrinsics_validation():
    with pytest.raises(InvalidInputError):
        CameraIntrinsics(0, 1, 1, 1, 2, 2)
    with pytest.raises(InvalidInputError):
        CameraIntrinsics(1, 1, 3, 1, 2, 2)
    with pytest.raises(InvalidInputError):
        CameraIntrinsics(1, 1, 1, 1, 0, 2)


def test_pose_validation():
    bad = np.eye(4)
    bad[3, 0] = 1
    with pytest.raises(InvalidInputError):
        CameraPose(bad)
    skew = np.eye(4)
    skew[0, 1] = 0.1
    with pytest.raises(InvalidInputError):
        CameraPose(skew)


def test_principal_ray_is_forward():
    view = identity_view()
    rays = compute_ray_map(view)
    # pixel (4, 3) has centre (4.5, 3.5); pixel (3, 2) straddles it, so use a tiny odd-free camera
    view = CameraView(CameraIntrinsics(10, 10, 4.5, 3.5, 9, 7), CameraPose(np.eye(4)))
    rays = compute_ray_map(view)
    assert np.allclose(rays.directions[3, 4], [0, 0, 1], atol=1e-15)
    assert np.array_equal(rays.origins[0, 0], [0, 0, 0])


def test_ray_offset_direction():
    view = identity_view(f=10.0)
    d = compute_ray_map(view).directions[3, 6]
    expected = np.array([(6.5 - 4) / 10, (3.5 - 3) / 10, 1])
    assert np.allclose(d, expected / np.linalg.norm(expected), atol=1e-15)


def test_rotated_rays_match_per_pixel_transform():
    view = orbit(37, 12, size=16)
    rays = compute_ray_map(view)
    intr, rot = view.intrinsics, view.pose.rotation
    for v in range(16):
        for u in range(16):
            local = np.array([(u + 0.5 - intr.cx) / intr.fx, (v + 0.5 - intr.cy) / intr.fy, 1.0])
            world = rot @ local
            assert np.allclose(rays.directions[v, u], world / np.linalg.norm(world), atol=1e-14)
    assert np.abs(np.linalg.norm(rays.directions, axis=-1) - 1).max() < 1e-12
    assert np.allclose(rays.origins, view.pose.center)


def test_ray_reprojection_consistency():
    view = orbit(200, -20, size=24)
    rays = compute_ray_map(view)
    grid = np.stack(np.meshgrid(np.arange(24) + 0.5, np.arange(24) + 0.5), -1)
    for depth in (0.5, 2.7, 10.0):
        uv, _ = project_points(rays.origins + depth * rays.directions, view)
        assert np.abs(uv - grid).max() < 1e-4


def test_plucker_examples():
    d = np.array([0.0, 0.6, 0.8])
    assert np.array_equal(plucker_encode(np.zeros(3), d), np.concatenate([d, np.zeros(3)]))
    assert np.array_equal(plucker_encode([1, 0, 0], [0, 0, 1]), [0, 0, 1, 1, 0, 0])
    with pytest.raises(InvalidInputError):
        plucker_encode(np.zeros(3), [0, 0, 2])


@settings(max_examples=200, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5))
def test_plucker_origin_slide(c, shift):
    d = np.array([2.0, -1.0, 2.0]) / 3.0
    o = np.array([0.3, 1.2, -0.7])
    assert np.allclose(plucker_encode(c * d, d), plucker_encode(np.zeros(3), d), atol=1e-12)
    assert np.allclose(plucker_encode(o + shift * d, d), plucker_encode(o, d), atol=1e-12)


def test_projection_jacobian_closed_forms():
    intr = CameraIntrinsics(30, 40, 16, 16, 32, 32)
    assert np.array_equal(projection_jacobian([0, 0, 2], intr), [[15, 0, 0], [0, 20, 0]])
    assert projection_jacobian([0.5, 0, 2], intr)[0, 2] == pytest.approx(-30 * 0.5 / 4)
    with pytest.raises(BehindCameraError):
        projection_jacobian([0, 0, 1e-7], intr)


def test_projection_jacobian_finite_differences(rng):
    intr = CameraIntrinsics(30, 40, 16, 16, 32, 32)

    def proj(p):
        return np.array([intr.fx * p[0] / p[2] + intr.cx, intr.fy * p[1] / p[2] + intr.cy])

    for _ in range(20):
        p = np.array([*rng.uniform(-1, 1, 2), rng.uniform(0.5, 4)])
        num = np.stack([(proj(p + e) - proj(p - e)) / 2e-6 for e in np.eye(3) * 1e-6], axis=1)
        ana = projection_jacobian(p, intr)
        assert np.max(np.abs(ana - num) / np.maximum(np.abs(ana), 1e-3)) < 1e-6


def test_project_axis_closed_form():
    view = CameraView(CameraIntrinsics(30, 40, 16, 16, 32, 32), CameraPose(np.eye(4)))
    s = 0.1
    near = project_gaussian(ConditionalGaussian3([0, 0, 2.0], s * s * np.eye(3), 1.0, np.ones(3), 0.5), view)
    far = project_gaussian(ConditionalGaussian3([0, 0, 4.0], s * s * np.eye(3), 1.0, np.ones(3), 0.5), view)
    assert np.allclose(near.cov_uv, np.diag([(30 * s / 2) ** 2, (40 * s / 2) ** 2]), atol=1e-14)
    assert np.allclose(far.cov_uv, near.cov_uv / 4, atol=1e-14)
    assert near.depth == 2.0
    assert np.array_equal(near.mean_uv, [16, 16])
    assert project_gaussian(ConditionalGaussian3([0, 0, -1.0], np.eye(3), 1.0, np.ones(3), 0.5), view) is None


def test_project_monte_carlo(rng):
    view = orbit(30, 15, size=64)
    a = rng.normal(size=(3, 3)) * 0.02
    cov = a @ a.T + 1e-4 * np.eye(3)
    mean = np.array([0.1, -0.2, 0.05])
    splat = project_gaussian(ConditionalGaussian3(mean, cov, 1.0, np.ones(3), 0.5), view)
    uv, _ = project_points(mean, view)
    assert np.allclose(splat.mean_uv, uv, atol=1e-12)
    samples = rng.multivariate_normal(mean, cov, 10 ** 6)
    pts, _ = project_points(samples, view)
    mc = np.cov(pts.T)
    assert np.abs(mc - splat.cov_uv).max() / np.abs(splat.cov_uv).max() < 0.03
    assert np.all(np.linalg.eigvalsh(splat.cov_uv) >= 0)


def test_camera_file_roundtrip(tmp_path, rng):
    views = [orbit(a, e, t, size=s) for a, e, t, s in zip(rng.uniform(0, 360, 6), rng.uniform(-30, 30, 6),
                                                          rng.uniform(-1, 1, 6), (8, 16, 32, 32, 7, 9))]
    path = tmp_path / "cams.json"
    write_cameras(path, views)
    back = read_cameras(path)
    for a, b in zip(views, back):
        assert np.array_equal(a.pose.c2w, b.pose.c2w)
        assert a.intrinsics == b.intrinsics and a.time == b.time


def test_camera_file_errors(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(FormatError):
        read_cameras(path)
    path.write_text(json.dumps([{"fx": 1}]))
    with pytest.raises(FormatError):
        read_cameras(path)
    path.write_text(json.dumps([{"fx": 1, "fy": 1, "cx": 1, "cy": 1, "width": 2, "height": 2, "c2w": [1, 0]}]))
    with pytest.raises(FormatError):
        read_cameras(path)


def test_look_at_faces_target():
    pose = look_at([3.0, 0, 0])
    assert np.allclose(pose.rotation[:, 2], [-1, 0, 0])
    assert np.allclose(pose.rotation[:, 1], [0, 0, -1])
    with pytest.raises(InvalidInputError):
        look_at([0, 0, 3.0])
