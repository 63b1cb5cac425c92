"""
Script de test pour l'API de découverte de points clés 3D
Teste tous les endpoints via le client de test Flask (aucun serveur requis).
"""
import sys

import numpy as np

from app import app
from utils.geometry import look_at_camera, project
from utils.script_runner import collect, run_tests


def client():
    app.config['TESTING'] = True
    return app.test_client()


def cameras(n=3):
    return [look_at_camera(f"cam{i}", (5000.0 * np.cos(a), 5000.0 * np.sin(a), 1200.0), (0.0, 0.0, 800.0),
                           300.0, 128, 128)
            for i, a in enumerate(2.0 * np.pi * np.arange(n) / n)]


def test_health():
    response = client().get('/health')
    assert response.status_code == 200
    data = response.get_json()
    assert data['status'] == 'ok'
    assert set(data['endpoints']) == {'/health', '/project', '/triangulate', '/evaluate'}


def test_project():
    cam = cameras(1)[0]
    points = [[0.0, 0.0, 800.0], [100.0, -50.0, 900.0]]
    response = client().post('/project', json={'camera': cam.to_dict(), 'points': points})
    assert response.status_code == 200
    data = response.get_json()
    np.testing.assert_allclose(data['points2d'][0], [63.5, 63.5], atol=1e-9)
    np.testing.assert_allclose(data['points2d'][1], project(cam.P, points[1]), atol=1e-9)
    assert data['in_front'] == [True, True]


def test_project_point_on_camera_plane():
    cam = cameras(1)[0]
    center = [5000.0, 0.0, 1200.0]
    response = client().post('/project', json={'camera': cam.to_dict(), 'points': [center]})
    assert response.status_code == 400
    assert response.get_json()['error'] == 'ProjectionError'


def test_project_invalid_camera():
    bad = cameras(1)[0].to_dict()
    bad['R'] = [2.0, 0, 0, 0, 2.0, 0, 0, 0, 2.0]
    response = client().post('/project', json={'camera': bad, 'points': [[0.0, 0.0, 0.0]]})
    assert response.status_code == 400
    assert 'R_orthonormal' in response.get_json()['message']


def test_triangulate():
    cams = cameras()
    X = np.array([[10.0, 20.0, 850.0], [-150.0, 60.0, 1200.0]])
    views = [[project(cam.P, p).tolist() for p in X] for cam in cams]
    views[2][1] = None
    views[1][1] = None
    payload = {'cameras': [c.to_dict() for c in cams], 'keypoints2d': views}
    response = client().post('/triangulate', json=payload)
    assert response.status_code == 200
    data = response.get_json()
    np.testing.assert_allclose(data['points3d'][0], X[0], atol=1e-6)
    assert data['points3d'][1] is None
    assert data['reprojection_px'][0] < 1e-6


def test_triangulate_single_view_only():
    cams = cameras(2)
    payload = {'cameras': [c.to_dict() for c in cams], 'keypoints2d': [[[10.0, 10.0]], [None]]}
    response = client().post('/triangulate', json=payload)
    assert response.status_code == 400
    assert response.get_json()['error'] == 'UnderdeterminedError'


def test_evaluate():
    rng = np.random.default_rng(0)
    gt = rng.normal(0.0, 300.0, (3, 9, 3))
    pred = 2.0 * gt + 100.0
    response = client().post('/evaluate', json={'pred': pred.tolist(), 'gt': gt.tolist()})
    assert response.status_code == 200
    data = response.get_json()
    assert data['pmpjpe_mm'] < 1e-6
    assert data['pmpjpe_noscale_mm'] > 1.0
    assert data['mpjpe_mm'] > 1.0
    assert len(data['per_joint_mm']) == 9


def test_evaluate_with_regression():
    rng = np.random.default_rng(1)
    disc = rng.normal(0.0, 100.0, (40, 4, 3))
    gt = 1.5 * disc
    payload = {'pred': disc[30:].tolist(), 'gt': gt[30:].tolist(),
               'disc_train': disc[:30].tolist(), 'gt_train': gt[:30].tolist()}
    data = client().post('/evaluate', json=payload).get_json()
    assert data['regressor']['kind'] == 'linear'
    assert data['mpjpe_mm'] < 1e-6


def test_missing_fields():
    response = client().post('/evaluate', json={'pred': [[[0.0, 0.0, 0.0]]]})
    assert response.status_code == 400
    assert 'gt' in response.get_json()['message']
    assert client().post('/project', data='pas du json').status_code == 400


def test_unknown_route():
    response = client().get('/extract')
    assert response.status_code == 404


if __name__ == "__main__":
    sys.exit(run_tests(collect(globals())))
