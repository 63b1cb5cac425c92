"""
API Flask du pipeline de découverte de points clés 3D
Géométrie (projection, triangulation) et métriques d'évaluation, sans état.
"""
import os
import sys
import time

import numpy as np
from flask import Flask, jsonify, request

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from evaluation import fit_linear_regressor, mpjpe, procrustes_errors
from utils.errors import ProjectionError, UnderdeterminedError, ValidationError
from utils.geometry import DEPTH_EPS, CameraModel, project_points, validate_camera
from utils.triangulation import Observation, reprojection_error, triangulate_points
from worker_pool import WorkerPool

app = Flask(__name__)
app.config['MAX_CONTENT_LENGTH'] = 16 * 1024 * 1024

ENDPOINTS = ('/health', '/project', '/triangulate', '/evaluate')


def _json_body():
    data = request.get_json(silent=True)
    if not isinstance(data, dict):
        raise ValidationError("request_json", "corps JSON (objet) requis")
    return data


def _require(data, *keys):
    missing = [k for k in keys if k not in data]
    if missing:
        raise ValidationError("request_fields", f"champs requis manquants: {', '.join(missing)}")


def _camera(data) -> CameraModel:
    cam = CameraModel.from_dict(data)
    validate_camera(cam)
    return cam


def _points3d(raw, name):
    points = np.asarray(raw, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValidationError(f"{name}_shape", f"{name}: N×3 attendu, reçu {points.shape}")
    return points


def _poses(raw, name):
    poses = np.asarray(raw, dtype=np.float64)
    if poses.ndim == 2:
        poses = poses[None]
    if poses.ndim != 3 or poses.shape[2] != 3:
        raise ValidationError(f"{name}_shape", f"{name}: N×J×3 attendu, reçu {poses.shape}")
    if not np.all(np.isfinite(poses)):
        raise ValidationError(f"{name}_finite", f"{name} contient des valeurs non finies")
    return poses


@app.route('/health', methods=['GET'])
def health_check():
    return jsonify({
        'status': 'ok',
        'service': 'Multi-view Keypoint Discovery API',
        'version': '1.0.0',
        'endpoints': list(ENDPOINTS),
        'threads': WorkerPool.threads(),
    }), 200


@app.route('/project', methods=['POST'])
def project_endpoint():
    """{"camera": {...}, "points": [[x,y,z], ...]} -> pixels (u, v) et profondeur homogène."""
    data = _json_body()
    _require(data, 'camera', 'points')
    cam = _camera(data['camera'])
    points = _points3d(data['points'], 'points')

    uv, w = project_points(cam.P, points)
    on_plane = np.flatnonzero(np.abs(w) <= DEPTH_EPS)
    if on_plane.size:
        raise ProjectionError(f"point(s) {on_plane.tolist()} sur le plan caméra (|w| ≤ {DEPTH_EPS})")
    return jsonify({
        'success': True,
        'camera': cam.name,
        'points2d': uv.tolist(),
        'depth': w.tolist(),
        'in_front': (w > 0).tolist(),
    }), 200


@app.route('/triangulate', methods=['POST'])
def triangulate_endpoint():
    """
    {"cameras": [...], "keypoints2d": [[[u, v] | null, ...] par vue]}
    Un point vu dans moins de deux vues donne null.
    """
    start_time = time.time()
    data = _json_body()
    _require(data, 'cameras', 'keypoints2d')
    cams = [_camera(c) for c in data['cameras']]
    views = data['keypoints2d']
    if not isinstance(views, list) or len(views) != len(cams):
        raise ValidationError("keypoints2d_views", f"{len(cams)} listes de points attendues (une par caméra)")

    Ps = [cam.P for cam in cams]
    results = triangulate_points(Ps, views, WorkerPool())
    points, errors, degenerate = [], [], []
    for j, res in enumerate(results):
        if res is None:
            points.append(None)
            errors.append(None)
            degenerate.append(None)
            continue
        obs = [Observation(view_index=i, point2d=views[i][j])
               for i in range(len(views)) if j < len(views[i]) and views[i][j] is not None]
        points.append(res.point.tolist())
        errors.append(reprojection_error(Ps, res.point, obs))
        degenerate.append(res.degenerate)

    if results and all(p is None for p in points):
        raise UnderdeterminedError("aucun point vu dans au moins deux vues distinctes")

    return jsonify({
        'success': True,
        'points3d': points,
        'reprojection_px': errors,
        'degenerate': degenerate,
        'processing_time': {'total_seconds': round(time.time() - start_time, 4)},
    }), 200


@app.route('/evaluate', methods=['POST'])
def evaluate_endpoint():
    """
    {"pred": N×J×3, "gt": N×J×3, "scale": true, "per_frame": true}
    Avec "disc_train"/"gt_train", pred est d'abord passé par le régresseur linéaire.
    """
    data = _json_body()
    _require(data, 'pred', 'gt')
    pred = _poses(data['pred'], 'pred')
    gt = _poses(data['gt'], 'gt')
    regressor = None
    if 'disc_train' in data or 'gt_train' in data:
        _require(data, 'disc_train', 'gt_train')
        reg = fit_linear_regressor(_poses(data['disc_train'], 'disc_train'), _poses(data['gt_train'], 'gt_train'))
        pred = reg.predict(pred)
        regressor = {'kind': reg.kind, 'rank': reg.rank, 'rank_deficient': reg.rank_deficient}
    if pred.shape != gt.shape:
        raise ValidationError("metric_shapes", f"formes incompatibles {pred.shape} et {gt.shape}")

    scale = bool(data.get('scale', True))
    errors = procrustes_errors(pred, gt, scale=scale)
    return jsonify({
        'success': True,
        'mpjpe_mm': mpjpe(pred, gt, per_frame=bool(data.get('per_frame', True))),
        'pmpjpe_mm': float(errors.mean()),
        'pmpjpe_noscale_mm': float(procrustes_errors(pred, gt, scale=False).mean()),
        'per_joint_mm': errors.mean(axis=0).tolist(),
        'n_frames': int(pred.shape[0]),
        'regressor': regressor,
    }), 200


@app.errorhandler(ValueError)
def invalid_input(error):
    return jsonify({
        'error': type(error).__name__,
        'message': str(error)
    }), 400


@app.errorhandler(413)
def request_entity_too_large(error):
    return jsonify({
        'error': 'Requête trop volumineuse',
        'message': 'La taille maximale autorisée est de 16MB'
    }), 413


@app.errorhandler(404)
def not_found(error):
    return jsonify({
        'error': 'Route non trouvée',
        'message': f'Endpoint non disponible. Utilisez {", ".join(ENDPOINTS)}'
    }), 404


@app.errorhandler(500)
def internal_error(error):
    return jsonify({
        'error': 'Erreur interne du serveur',
        'message': 'Une erreur inattendue s\'est produite'
    }), 500


if __name__ == '__main__':
    threads = int(os.environ.get('MVKD_THREADS', '1'))
    WorkerPool.configure(threads)
    print("=" * 70)
    print("Démarrage de l'API de découverte de points clés 3D")
    print("=" * 70)
    print(f"Threads de calcul: {threads}")
    print(f"Taille max des requêtes: {app.config['MAX_CONTENT_LENGTH'] / (1024*1024):.0f}MB")
    print("\nEndpoints disponibles:")
    print("  GET  /health      - Vérification de l'état du service")
    print("  POST /project     - Projection de points 3D dans une caméra")
    print("  POST /triangulate - Triangulation DLT multi-vue + erreur de reprojection")
    print("  POST /evaluate    - MPJPE / PMPJPE (régression linéaire optionnelle)")
    print("=" * 70)
    print("\nServeur démarré sur http://0.0.0.0:5000")
    print("Appuyez sur Ctrl+C pour arrêter\n")

    app.run(host='0.0.0.0', port=5000, debug=False)
