"""
Géométrie caméra : modèle sténopé, matrice de projection P = K·[R|t],
projection 3D -> 2D et lecture/écriture du fichier caméras JSON.

Unités : mm pour le monde, pixels pour l'image.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from utils.errors import ProjectionError, ValidationError

logger = logging.getLogger(__name__)

DEPTH_EPS = 1e-9
ORTHONORMAL_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class CameraModel:
    name: str
    width: int
    height: int
    K: Optional[np.ndarray] = None
    R: Optional[np.ndarray] = None
    t: Optional[np.ndarray] = None
    raw_P: Optional[np.ndarray] = field(default=None, repr=False)
    _P: Optional[np.ndarray] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        for attr in ("K", "R", "t", "raw_P"):
            value = getattr(self, attr)
            if value is not None:
                arr = np.array(value, dtype=np.float64)
                arr.setflags(write=False)
                object.__setattr__(self, attr, arr)
        if self.raw_P is None and (self.K is None or self.R is None or self.t is None):
            raise ValidationError("camera_fields", f"caméra '{self.name}': K, R, t ou P requis")

    @property
    def P(self) -> np.ndarray:
        """P validée au premier accès puis gardée en lecture seule (caméra immuable)."""
        if self._P is None:
            P = projection_matrix(self)
            P.setflags(write=False)
            object.__setattr__(self, "_P", P)
        return self._P

    def validate(self) -> "CameraModel":
        validate_camera(self)
        return self

    def to_dict(self) -> Dict:
        if self.raw_P is not None:
            return {
                "name": self.name,
                "P": [float(v) for v in self.raw_P.ravel()],
                "width": int(self.width),
                "height": int(self.height),
            }
        return {
            "name": self.name,
            "K": [float(v) for v in self.K.ravel()],
            "R": [float(v) for v in self.R.ravel()],
            "t": [float(v) for v in self.t.ravel()],
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "CameraModel":
        name = str(data.get("name", "camera"))
        try:
            width = int(data["width"])
            height = int(data["height"])
        except KeyError as e:
            raise ValidationError("camera_fields", f"caméra '{name}': champ {e} manquant")

        if "P" in data:
            P = np.asarray(data["P"], dtype=np.float64)
            if P.size != 12:
                raise ValidationError("camera_P_size", f"caméra '{name}': P doit avoir 12 valeurs")
            return cls(name=name, width=width, height=height, raw_P=P.reshape(3, 4))

        missing = [k for k in ("K", "R", "t") if k not in data]
        if missing:
            raise ValidationError("camera_fields", f"caméra '{name}': champs manquants {missing}")

        K = np.asarray(data["K"], dtype=np.float64)
        R = np.asarray(data["R"], dtype=np.float64)
        t = np.asarray(data["t"], dtype=np.float64)
        if K.size != 9 or R.size != 9 or t.size != 3:
            raise ValidationError("camera_KRt_size", f"caméra '{name}': tailles K(9), R(9), t(3) attendues")
        return cls(name=name, width=width, height=height,
                   K=K.reshape(3, 3), R=R.reshape(3, 3), t=t.reshape(3))


def validate_camera(cam: CameraModel) -> None:
    """
    Vérifie les invariants du modèle caméra.
    Lève ValidationError en nommant la vérification en échec.
    """
    if cam.width <= 0 or cam.height <= 0:
        raise ValidationError("image_size", f"caméra '{cam.name}': dimensions {cam.width}x{cam.height}")

    if cam.raw_P is None:
        K, R, t = cam.K, cam.R, cam.t
        if K.shape != (3, 3) or R.shape != (3, 3) or t.shape != (3,):
            raise ValidationError("camera_shapes", f"caméra '{cam.name}'")
        if not (np.all(np.isfinite(K)) and np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValidationError("finite", f"caméra '{cam.name}': valeurs non finies")
        if np.max(np.abs(R @ R.T - np.eye(3))) > ORTHONORMAL_TOL:
            raise ValidationError("R_orthonormal", f"caméra '{cam.name}': R n'est pas orthonormale")
        if abs(np.linalg.det(R) - 1.0) > ORTHONORMAL_TOL:
            raise ValidationError("R_det", f"caméra '{cam.name}': det(R) != +1")
        if np.any(np.abs(np.tril(K, -1)) > 0):
            raise ValidationError("K_upper_triangular", f"caméra '{cam.name}'")
        if np.any(np.diag(K) <= 0):
            raise ValidationError("K_positive_diagonal", f"caméra '{cam.name}'")
        P = K @ np.hstack([R, t.reshape(3, 1)])
    else:
        P = cam.raw_P
        if P.shape != (3, 4) or not np.all(np.isfinite(P)):
            raise ValidationError("P_shape", f"caméra '{cam.name}'")

    if np.linalg.matrix_rank(P) != 3:
        raise ValidationError("P_rank", f"caméra '{cam.name}': rang(P) != 3")


def projection_matrix(cam: CameraModel) -> np.ndarray:
    """Retourne P = K·[R|t] (ou la matrice P brute fournie)."""
    validate_camera(cam)
    if cam.raw_P is not None:
        return np.array(cam.raw_P, dtype=np.float64)
    return cam.K @ np.hstack([cam.R, cam.t.reshape(3, 1)])


def camera_center(P: np.ndarray) -> np.ndarray:
    """Centre optique : noyau de P, déshomogénéisé."""
    _, _, vt = np.linalg.svd(np.asarray(P, dtype=np.float64))
    c = vt[-1]
    return c[:3] / c[3]


def homogeneous_depth(P: np.ndarray, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return X @ P[2, :3] + P[2, 3]


def project(P: np.ndarray, X, eps: float = DEPTH_EPS) -> np.ndarray:
    """
    Projette un point 3D : (ligne1·X̃/w, ligne2·X̃/w) avec w = ligne3·X̃.
    """
    P = np.asarray(P, dtype=np.float64)
    Xh = np.append(np.asarray(X, dtype=np.float64).reshape(3), 1.0)
    if not np.all(np.isfinite(Xh)):
        raise ProjectionError("point non fini")
    x = P @ Xh
    w = x[2]
    if abs(w) <= eps:
        raise ProjectionError(f"point sur le plan caméra (|w|={abs(w):.3e} <= {eps:.1e})")
    return np.array([x[0] / w, x[1] / w])


@dataclass
class ProjectionBatch:
    points: List[Optional[np.ndarray]]
    errors: Dict[int, str]

    def __len__(self):
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    def __getitem__(self, i):
        return self.points[i]


def project_batch(P: np.ndarray, points: Sequence, eps: float = DEPTH_EPS) -> ProjectionBatch:
    """
    Projection élément par élément ; une erreur sur un point est collectée
    sans interrompre le lot.
    """
    out: List[Optional[np.ndarray]] = []
    errors: Dict[int, str] = {}
    for i, X in enumerate(points):
        try:
            out.append(project(P, X, eps=eps))
        except ProjectionError as e:
            out.append(None)
            errors[i] = str(e)
    if errors:
        logger.debug(f"[PROJECT] {len(errors)}/{len(out)} points non projetables")
    return ProjectionBatch(points=out, errors=errors)


def project_points(P: np.ndarray, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Version vectorisée sans contrôle : X (N×3) -> (uv N×2, w N).
    Les appelants filtrent eux-mêmes les profondeurs dégénérées.
    """
    P = np.asarray(P, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    x = X @ P[:, :3].T + P[:, 3]
    w = x[:, 2]
    safe = np.where(np.abs(w) > DEPTH_EPS, w, np.nan)
    uv = x[:, :2] / safe[:, None]
    return uv, w


def project_points_vjp(P: np.ndarray, uv: np.ndarray, w: np.ndarray, g_uv: np.ndarray) -> np.ndarray:
    """
    Adjoint de project_points par rapport à X.
    du/dX = (P[0,:3] - u P[2,:3]) / w ; dv/dX = (P[1,:3] - v P[2,:3]) / w
    """
    P = np.asarray(P, dtype=np.float64)
    gu = g_uv[:, 0:1]
    gv = g_uv[:, 1:2]
    u = uv[:, 0:1]
    v = uv[:, 1:2]
    g = gu * (P[0, :3] - u * P[2, :3]) + gv * (P[1, :3] - v * P[2, :3])
    return g / w[:, None]


def in_front(w: np.ndarray, depth_sign: float = 1.0, eps: float = DEPTH_EPS) -> np.ndarray:
    """Masque des points devant la caméra selon la convention de signe."""
    return np.asarray(w) * depth_sign > eps


def look_at_camera(
    name: str,
    position: Sequence[float],
    target: Sequence[float],
    focal: float,
    width: int,
    height: int,
    up: Sequence[float] = (0.0, 0.0, 1.0),
) -> CameraModel:
    """
    Caméra sténopé placée en `position` et regardant `target`
    (axe x image vers la droite, y vers le bas, z vers l'avant).
    """
    C = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - C
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        raise ValidationError("look_at_up", f"caméra '{name}': direction de visée parallèle à 'up'")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.vstack([right, down, forward])
    t = -R @ C
    K = np.array([
        [focal, 0.0, (width - 1) / 2.0],
        [0.0, focal, (height - 1) / 2.0],
        [0.0, 0.0, 1.0],
    ])
    return CameraModel(name=name, width=width, height=height, K=K, R=R, t=t)


def load_cameras(path) -> List[CameraModel]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Fichier caméras introuvable: {path}")
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, list):
        raise ValidationError("camera_file", f"{path}: tableau JSON attendu")
    cams = [CameraModel.from_dict(item) for item in data]
    for cam in cams:
        validate_camera(cam)
    return cams


def save_cameras(path, cams: Sequence[CameraModel]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump([cam.to_dict() for cam in cams], f, indent=2)
