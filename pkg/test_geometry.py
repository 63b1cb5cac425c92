"""
Tests du modèle caméra sténopé : validation, projection, adjoint, fichiers.
"""
import sys

import numpy as np
import pytest

from utils.errors import ProjectionError, ValidationError
from utils.geometry import (
    CameraModel,
    camera_center,
    in_front,
    load_cameras,
    look_at_camera,
    project,
    project_batch,
    project_points,
    project_points_vjp,
    save_cameras,
)
from utils.script_runner import collect, run_tests


def identity_camera(width=100, height=100):
    return CameraModel(name="id", width=width, height=height, K=np.eye(3), R=np.eye(3), t=np.zeros(3))


def test_project_identity_camera():
    cam = identity_camera()
    np.testing.assert_allclose(project(cam.P, [2.0, 4.0, 2.0]), [1.0, 2.0])


def test_point_on_camera_plane_raises():
    with pytest.raises(ProjectionError):
        project(identity_camera().P, [1.0, 1.0, 0.0])


def test_non_orthonormal_rotation_rejected():
    cam = CameraModel(name="bad", width=10, height=10, K=np.eye(3), R=2.0 * np.eye(3), t=np.zeros(3))
    with pytest.raises(ValidationError) as info:
        cam.validate()
    assert info.value.check == "R_orthonormal"


def test_reflection_rejected():
    R = np.diag([1.0, 1.0, -1.0])
    cam = CameraModel(name="mirror", width=10, height=10, K=np.eye(3), R=R, t=np.zeros(3))
    with pytest.raises(ValidationError) as info:
        cam.validate()
    assert info.value.check == "R_det"


def test_projection_matrix_cached():
    cam = identity_camera()
    first = cam.P
    for _ in range(5):
        assert cam.P is first
    assert not first.flags.writeable
    np.testing.assert_array_equal(first, np.hstack([np.eye(3), np.zeros((3, 1))]))


def test_invalid_camera_P_raises_on_every_access():
    cam = CameraModel(name="bad", width=10, height=10, K=np.eye(3), R=2.0 * np.eye(3), t=np.zeros(3))
    for _ in range(2):
        with pytest.raises(ValidationError):
            cam.P


def test_look_at_camera_sees_target_at_principal_point():
    cam = look_at_camera("c", (5000.0, 0.0, 1000.0), (0.0, 0.0, 850.0), 250.0, 128, 128)
    cam.validate()
    np.testing.assert_allclose(project(cam.P, [0.0, 0.0, 850.0]), [63.5, 63.5], atol=1e-9)
    np.testing.assert_allclose(camera_center(cam.P), [5000.0, 0.0, 1000.0], atol=1e-6)


def test_project_points_matches_scalar_projection():
    rng = np.random.default_rng(0)
    cam = look_at_camera("c", (3000.0, 2000.0, 500.0), (0.0, 0.0, 0.0), 300.0, 64, 48)
    X = rng.normal(0.0, 400.0, (20, 3))
    uv, w = project_points(cam.P, X)
    for i in range(len(X)):
        np.testing.assert_allclose(uv[i], project(cam.P, X[i]), rtol=1e-12)
    assert np.all(in_front(w))


def test_project_points_vjp_matches_finite_differences():
    rng = np.random.default_rng(1)
    cam = look_at_camera("c", (2500.0, -1500.0, 800.0), (0.0, 0.0, 0.0), 60.0, 48, 40)
    P = cam.P
    X = rng.normal(0.0, 300.0, (4, 3))
    g = rng.standard_normal((4, 2))
    uv, w = project_points(P, X)
    analytic = project_points_vjp(P, uv, w, g)

    h = 1e-3
    numeric = np.zeros_like(X)
    for i in range(X.shape[0]):
        for k in range(3):
            Xp, Xm = X.copy(), X.copy()
            Xp[i, k] += h
            Xm[i, k] -= h
            numeric[i, k] = (np.sum(project_points(P, Xp)[0] * g) - np.sum(project_points(P, Xm)[0] * g)) / (2 * h)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-10)


def test_project_batch_collects_errors():
    batch = project_batch(identity_camera().P, [[0.0, 0.0, 1.0], [1.0, 1.0, 0.0], [2.0, 2.0, 2.0]])
    assert len(batch) == 3
    assert batch[1] is None
    assert list(batch.errors) == [1]
    np.testing.assert_allclose(batch[2], [1.0, 1.0])


def test_depth_sign_convention():
    w = np.array([2.0, -2.0, 0.0])
    assert in_front(w).tolist() == [True, False, False]
    assert in_front(w, depth_sign=-1.0).tolist() == [False, True, False]


def test_camera_file_roundtrip(tmp_path):
    cams = [look_at_camera(f"cam{i}", (4000.0 * np.cos(a), 4000.0 * np.sin(a), 1200.0), (0.0, 0.0, 0.0),
                           200.0, 64, 64) for i, a in enumerate([0.3, 1.9])]
    path = tmp_path / "cameras.json"
    save_cameras(path, cams)
    loaded = load_cameras(path)
    assert [c.name for c in loaded] == ["cam0", "cam1"]
    for a, b in zip(cams, loaded):
        np.testing.assert_allclose(a.P, b.P)


def test_raw_projection_matrix_accepted(tmp_path):
    P = identity_camera().P * 3.0
    cam = CameraModel.from_dict({"name": "raw", "P": P.ravel().tolist(), "width": 10, "height": 10})
    np.testing.assert_allclose(project(cam.P, [2.0, 4.0, 2.0]), [1.0, 2.0])


def test_missing_camera_file_names_path(tmp_path):
    path = tmp_path / "absent.json"
    with pytest.raises(FileNotFoundError) as info:
        load_cameras(path)
    assert str(path) in str(info.value)


if __name__ == "__main__":
    sys.exit(run_tests(collect(globals())))
