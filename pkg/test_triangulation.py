"""
Tests de la triangulation DLT : données exactes, bruit contre un raffinement
Gauss–Newton de l'erreur de reprojection, cas sous-déterminés.
"""
import sys

import cv2
import numpy as np
import pytest

from utils.errors import UnderdeterminedError, ValidationError
from utils.geometry import look_at_camera, project
from utils.script_runner import collect, run_tests
from utils.triangulation import Observation, reprojection_error, triangulate_dlt, triangulate_points


def ring_projections(n_views=4, seed=0):
    rng = np.random.default_rng(seed)
    cams = []
    for i in range(n_views):
        a = 2.0 * np.pi * i / n_views + rng.uniform(-0.3, 0.3)
        pos = (5000.0 * np.cos(a), 5000.0 * np.sin(a), rng.uniform(500.0, 2000.0))
        cams.append(look_at_camera(f"c{i}", pos, (0.0, 0.0, 0.0), 500.0, 640, 480))
    return [c.P for c in cams]


def gauss_newton(Ps, obs, X0, iterations=20):
    """Minimise Σ‖project(P, X) − x‖² depuis X0."""
    X = np.array(X0, dtype=np.float64)
    for _ in range(iterations):
        rows, res = [], []
        for o in obs:
            P = Ps[o.view_index]
            x = P @ np.append(X, 1.0)
            w = x[2]
            u, v = x[:2] / w
            rows.append((P[0, :3] - u * P[2, :3]) / w)
            rows.append((P[1, :3] - v * P[2, :3]) / w)
            res.extend([u - o.point2d[0], v - o.point2d[1]])
        step, *_ = np.linalg.lstsq(np.array(rows), -np.array(res), rcond=None)
        X = X + step
        if np.linalg.norm(step) < 1e-12:
            break
    return X


def squared_residual(Ps, X, obs):
    return sum(float(np.sum((project(Ps[o.view_index], X) - o.point2d) ** 2)) for o in obs)


def test_exact_recovery_1000_points():
    Ps = ring_projections()
    rng = np.random.default_rng(1)
    points = rng.uniform(-1000.0, 1000.0, (1000, 3))
    worst = 0.0
    for X in points:
        obs = [Observation(i, project(P, X)) for i, P in enumerate(Ps)]
        worst = max(worst, np.linalg.norm(triangulate_dlt(Ps, obs).point - X))
    assert worst < 1e-6


def test_noisy_dlt_close_to_gauss_newton():
    Ps = ring_projections(seed=2)
    rng = np.random.default_rng(3)
    points = rng.uniform(-500.0, 500.0, (300, 3))
    within = 0
    for X in points:
        obs = [Observation(i, project(P, X) + rng.normal(0.0, 1.0, 2)) for i, P in enumerate(Ps)]
        dlt = triangulate_dlt(Ps, obs).point
        refined = gauss_newton(Ps, obs, dlt)
        if np.linalg.norm(dlt - X) <= 2.0 * np.linalg.norm(refined - X):
            within += 1
        assert squared_residual(Ps, refined, obs) <= squared_residual(Ps, dlt, obs) + 1e-9
    assert within >= 0.95 * len(points)


def test_single_view_is_underdetermined():
    Ps = ring_projections()
    X = np.array([10.0, 20.0, 30.0])
    with pytest.raises(UnderdeterminedError):
        triangulate_dlt(Ps, [Observation(0, project(Ps[0], X))])


def test_duplicate_view_counts_once():
    Ps = ring_projections()
    x = project(Ps[1], [0.0, 0.0, 0.0])
    with pytest.raises(UnderdeterminedError):
        triangulate_dlt(Ps, [Observation(1, x), Observation(1, x)])


def test_zero_weight_view_ignored_for_view_count():
    Ps = ring_projections()
    X = np.zeros(3)
    obs = [Observation(0, project(Ps[0], X)), Observation(1, project(Ps[1], X), weight=0.0)]
    with pytest.raises(UnderdeterminedError):
        triangulate_dlt(Ps, obs)


def test_negative_weight_rejected():
    with pytest.raises(ValidationError):
        Observation(0, [1.0, 2.0], weight=-1.0)


def test_view_index_out_of_range():
    Ps = ring_projections(n_views=2)
    with pytest.raises(ValidationError):
        triangulate_dlt(Ps, [Observation(0, [1.0, 1.0]), Observation(5, [1.0, 1.0])])


def test_reprojection_error_zero_on_exact_data():
    Ps = ring_projections()
    X = np.array([120.0, -40.0, 300.0])
    obs = [Observation(i, project(P, X)) for i, P in enumerate(Ps)]
    assert reprojection_error(Ps, X, obs) < 1e-9
    shifted = [Observation(o.view_index, o.point2d + [3.0, 4.0]) for o in obs]
    assert abs(reprojection_error(Ps, X, shifted) - 5.0) < 1e-9


def test_triangulate_points_handles_missing_observations():
    Ps = ring_projections(n_views=3)
    A = np.array([0.0, 0.0, 0.0])
    B = np.array([200.0, 100.0, -50.0])
    keypoints2d = [
        [project(Ps[0], A).tolist(), project(Ps[0], B).tolist()],
        [project(Ps[1], A).tolist(), None],
        [None, None],
    ]
    results = triangulate_points(Ps, keypoints2d)
    assert len(results) == 2
    np.testing.assert_allclose(results[0].point, A, atol=1e-6)
    assert results[1] is None




def rigid_motion(seed):
    rng = np.random.default_rng(seed)
    R, _ = cv2.Rodrigues(rng.normal(0.0, 1.0, (3, 1)))
    t = rng.uniform(-300.0, 300.0, 3)
    return R, t


def moved_projections(Ps, R, t):
    """Caméras vues dans le repère déplacé : P' = P · [Rᵀ | −Rᵀt]."""
    inverse = np.eye(4)
    inverse[:3, :3] = R.T
    inverse[:3, 3] = -R.T @ t
    return [P @ inverse for P in Ps]


def test_dlt_follows_rigid_motion_on_exact_data():
    Ps = ring_projections(n_views=5, seed=4)
    R, t = rigid_motion(5)
    moved = moved_projections(Ps, R, t)
    rng = np.random.default_rng(6)
    for X in rng.uniform(-500.0, 500.0, (50, 3)):
        Y = R @ X + t
        obs = [Observation(i, project(P, X)) for i, P in enumerate(Ps)]
        obs_moved = [Observation(i, project(P, Y)) for i, P in enumerate(moved)]
        np.testing.assert_allclose(obs_moved[0].point2d, obs[0].point2d, atol=1e-6)
        got = triangulate_dlt(moved, obs_moved).point
        np.testing.assert_allclose(got, R @ triangulate_dlt(Ps, obs).point + t, atol=1e-5)


def test_dlt_follows_rotation_on_noisy_data():
    Ps = ring_projections(n_views=5, seed=7)
    R, _ = rigid_motion(8)
    moved = moved_projections(Ps, R, np.zeros(3))
    rng = np.random.default_rng(9)
    for X in rng.uniform(-500.0, 500.0, (50, 3)):
        obs = [Observation(i, project(P, X) + rng.normal(0.0, 2.0, 2)) for i, P in enumerate(Ps)]
        reference = triangulate_dlt(Ps, obs).point
        got = triangulate_dlt(moved, obs).point
        np.testing.assert_allclose(got, R @ reference, rtol=1e-6, atol=1e-6)


def test_reprojection_error_one_view_off_by_five_pixels():
    Ps = ring_projections(n_views=5, seed=10)
    X = np.array([-80.0, 150.0, 40.0])
    obs = [Observation(i, project(P, X)) for i, P in enumerate(Ps)]
    obs[2] = Observation(2, obs[2].point2d + [3.0, 4.0])
    assert reprojection_error(Ps, X, obs) == pytest.approx(1.0, abs=1e-9)


if __name__ == "__main__":
    sys.exit(run_tests(collect(globals())))
