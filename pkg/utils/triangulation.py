"""
Triangulation DLT (SVD) et erreur de reprojection.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from utils.errors import ProjectionError, UnderdeterminedError, ValidationError
from utils.geometry import project

logger = logging.getLogger(__name__)

DEGENERATE_RATIO = 0.99


@dataclass
class Observation:
    view_index: int
    point2d: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        self.point2d = np.asarray(self.point2d, dtype=np.float64).reshape(2)
        if self.weight < 0:
            raise ValidationError("observation_weight", f"poids négatif ({self.weight})")


@dataclass
class TriangulationResult:
    point: np.ndarray
    singular_ratio: float
    n_views: int
    warning: Optional[str] = None

    @property
    def degenerate(self) -> bool:
        return self.warning is not None


def _check_observations(cams: Sequence[np.ndarray], obs: Sequence[Observation]) -> None:
    for o in obs:
        if not 0 <= o.view_index < len(cams):
            raise ValidationError("view_index", f"indice de vue {o.view_index} hors de [0, {len(cams)})")


def dlt_system(cams: Sequence[np.ndarray], obs: Sequence[Observation]) -> np.ndarray:
    """
    Système 2M×4 : lignes (u·P3 − P1, v·P3 − P2), chaque ligne ramenée à une
    norme unitaire puis multipliée par le poids de l'observation.
    """
    rows = []
    for o in obs:
        P = np.asarray(cams[o.view_index], dtype=np.float64)
        u, v = o.point2d
        for row in (u * P[2] - P[0], v * P[2] - P[1]):
            norm = np.linalg.norm(row)
            if norm > 0:
                row = row / norm
            rows.append(o.weight * row)
    return np.vstack(rows)


def triangulate_dlt(cams: Sequence[np.ndarray], obs: Sequence[Observation]) -> TriangulationResult:
    """
    Triangulation linéaire : vecteur singulier droit de plus petite valeur
    singulière, déshomogénéisé.
    """
    _check_observations(cams, obs)
    views = {o.view_index for o in obs if o.weight > 0}
    if len(views) < 2:
        raise UnderdeterminedError(
            f"triangulation sous-déterminée: {len(views)} vue(s) distincte(s), au moins 2 requises"
        )

    A = dlt_system(cams, obs)
    _, s, vt = np.linalg.svd(A)
    X = vt[-1]
    if abs(X[3]) < 1e-12:
        raise ProjectionError("solution à l'infini (rayons parallèles)")

    ratio = float(s[-1] / s[-2]) if s[-2] > 0 else 1.0
    warning = None
    if ratio > DEGENERATE_RATIO:
        warning = f"géométrie dégénérée (rapport des valeurs singulières {ratio:.4f})"
        logger.warning(f"[WARN] {warning}")

    return TriangulationResult(point=X[:3] / X[3], singular_ratio=ratio,
                               n_views=len(views), warning=warning)


def reprojection_error(cams: Sequence[np.ndarray], X, obs: Sequence[Observation]) -> float:
    """Moyenne sur les observations de la distance euclidienne en pixels."""
    _check_observations(cams, obs)
    if not obs:
        return 0.0
    dists = [np.linalg.norm(project(cams[o.view_index], X) - o.point2d) for o in obs]
    return float(np.mean(dists))


def triangulate_points(
    cams: Sequence[np.ndarray],
    keypoints2d: Sequence[Sequence[Optional[Sequence[float]]]],
    pool=None,
) -> List[Optional[TriangulationResult]]:
    """
    Triangule J points clés. keypoints2d[i][j] = (u, v) du point j dans la vue i,
    ou None si absent. Un point sous-déterminé donne None.
    """
    n_views = len(keypoints2d)
    n_joints = max((len(k) for k in keypoints2d), default=0)

    def solve(j: int) -> Optional[TriangulationResult]:
        obs = [
            Observation(view_index=i, point2d=keypoints2d[i][j])
            for i in range(n_views)
            if j < len(keypoints2d[i]) and keypoints2d[i][j] is not None
        ]
        try:
            return triangulate_dlt(cams, obs)
        except (UnderdeterminedError, ProjectionError) as e:
            logger.debug(f"[TRIANGULATE] point {j} ignoré: {e}")
            return None

    if pool is None:
        return [solve(j) for j in range(n_joints)]
    return pool.map_ordered(solve, range(n_joints))
