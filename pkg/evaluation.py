"""
Protocole d'évaluation : régression des points découverts vers la vérité
terrain (linéaire sans biais, ou MLP), puis MPJPE et PMPJPE sur les images
de test.
"""
import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from diff_engine import Adam
from io_formats import load_gt_keypoints, load_keypoints3d
from utils.errors import ValidationError

logger = logging.getLogger(__name__)

RCOND = 1e-10


def _flatten(points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return points.reshape(points.shape[0], -1)


def _check_finite(name: str, values: np.ndarray) -> None:
    if not np.all(np.isfinite(values)):
        raise ValidationError(f"{name}_finite", f"{name} contient des valeurs non finies")


# =========================================================
# Régresseurs
# =========================================================
@dataclass
class RegressionMap:
    """Y ≈ X·W, sans ordonnée à l'origine. W : (3·J_disc)×(3·J_gt)."""
    W: np.ndarray
    rank: int
    rank_deficient: bool = False
    kind: str = "linear"

    def predict(self, disc: np.ndarray) -> np.ndarray:
        X = _flatten(disc)
        if X.shape[1] != self.W.shape[0]:
            raise ValidationError("regressor_input", f"{X.shape[1]} colonnes, {self.W.shape[0]} attendues")
        return (X @ self.W).reshape(X.shape[0], -1, 3)


def fit_linear_regressor(disc_train: np.ndarray, gt_train: np.ndarray) -> RegressionMap:
    X = _flatten(disc_train)
    Y = _flatten(gt_train)
    if X.shape[0] != Y.shape[0]:
        raise ValidationError("regressor_rows", f"{X.shape[0]} lignes contre {Y.shape[0]}")
    _check_finite("disc_train", X)
    _check_finite("gt_train", Y)
    if X.shape[0] < X.shape[1]:
        logger.warning(f"[WARN] régression sous-échantillonnée : N={X.shape[0]} < 3J={X.shape[1]}")

    s = np.linalg.svd(X, compute_uv=False)
    rank = int(np.sum(s > RCOND * s[0])) if s.size and s[0] > 0 else 0
    deficient = rank < X.shape[1]
    if deficient:
        logger.warning(f"[WARN] matrice de conception de rang {rank} < {X.shape[1]}, SVD tronquée")
    W = np.linalg.pinv(X, rcond=RCOND) @ Y
    return RegressionMap(W=W, rank=rank, rank_deficient=deficient)


class MLPRegressor:
    """Deux couches, ReLU, entrées et sorties centrées-réduites, Adam plein lot."""

    kind = "mlp"

    def __init__(self, hidden: int = 50, steps: int = 2000, learning_rate: float = 1e-3, seed: int = 0):
        self.hidden = hidden
        self.steps = steps
        self.learning_rate = learning_rate
        self.seed = seed
        self.params: Dict[str, np.ndarray] = {}
        self.stats: Dict[str, np.ndarray] = {}

    def _forward(self, Xn: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        p = self.params
        pre = Xn @ p["w1"] + p["b1"]
        h = np.maximum(pre, 0.0)
        return pre, h, h @ p["w2"] + p["b2"]

    def fit(self, disc_train: np.ndarray, gt_train: np.ndarray) -> "MLPRegressor":
        X = _flatten(disc_train)
        Y = _flatten(gt_train)
        _check_finite("disc_train", X)
        _check_finite("gt_train", Y)
        self.stats = {
            "x_mean": X.mean(axis=0), "x_std": X.std(axis=0) + 1e-8,
            "y_mean": Y.mean(axis=0), "y_std": Y.std(axis=0) + 1e-8,
        }
        Xn = (X - self.stats["x_mean"]) / self.stats["x_std"]
        Yn = (Y - self.stats["y_mean"]) / self.stats["y_std"]

        rng = np.random.default_rng(self.seed)
        d_in, d_out = X.shape[1], Y.shape[1]
        self.params = {
            "w1": rng.standard_normal((d_in, self.hidden)) * np.sqrt(2.0 / d_in),
            "b1": np.zeros(self.hidden),
            "w2": rng.standard_normal((self.hidden, d_out)) * np.sqrt(1.0 / self.hidden),
            "b2": np.zeros(d_out),
        }
        opt = Adam(lr=self.learning_rate)
        n = X.shape[0]
        for step in range(self.steps):
            pre, h, out = self._forward(Xn)
            g_out = 2.0 * (out - Yn) / (n * d_out)
            g_h = (g_out @ self.params["w2"].T) * (pre > 0)
            grads = {
                "w2": h.T @ g_out, "b2": g_out.sum(axis=0),
                "w1": Xn.T @ g_h, "b1": g_h.sum(axis=0),
            }
            opt.step(self.params, grads)
            if step % 500 == 0:
                logger.debug(f"[EVAL] MLP pas {step}: mse={np.mean((out - Yn) ** 2):.6f}")
        return self

    def predict(self, disc: np.ndarray) -> np.ndarray:
        X = _flatten(disc)
        Xn = (X - self.stats["x_mean"]) / self.stats["x_std"]
        out = self._forward(Xn)[2] * self.stats["y_std"] + self.stats["y_mean"]
        return out.reshape(X.shape[0], -1, 3)


def fit_regressor(disc_train: np.ndarray, gt_train: np.ndarray, eval_cfg=None, seed: int = 0):
    kind = getattr(eval_cfg, "regressor", "linear")
    if kind == "linear":
        return fit_linear_regressor(disc_train, gt_train)
    if kind == "mlp":
        return MLPRegressor(hidden=eval_cfg.mlp_hidden, steps=eval_cfg.mlp_steps,
                            learning_rate=eval_cfg.mlp_learning_rate, seed=seed).fit(disc_train, gt_train)
    raise ValidationError("regressor_kind", f"régresseur inconnu '{kind}' (linear|mlp)")


# =========================================================
# Métriques
# =========================================================
def _check_pair(pred: np.ndarray, gt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ValidationError("metric_shapes", f"formes incompatibles {pred.shape} et {gt.shape}")
    return pred, gt


def joint_errors(pred: np.ndarray, gt: np.ndarray, per_frame: bool = True) -> np.ndarray:
    """-> N×J distances après retrait du décalage moyen (par image ou global)."""
    pred, gt = _check_pair(pred, gt)
    if per_frame:
        pred = pred - pred.mean(axis=1, keepdims=True)
        gt = gt - gt.mean(axis=1, keepdims=True)
    else:
        pred = pred - pred.reshape(-1, 3).mean(axis=0)
        gt = gt - gt.reshape(-1, 3).mean(axis=0)
    return np.linalg.norm(pred - gt, axis=-1)


def mpjpe(pred: np.ndarray, gt: np.ndarray, per_frame: bool = True) -> float:
    return float(joint_errors(pred, gt, per_frame).mean())


def procrustes_align(X: np.ndarray, Y: np.ndarray, scale: bool = True) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    (s, R, t) minimisant ‖s·X·Rᵀ + t − Y‖_F, det R = +1.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != 3:
        raise ValidationError("procrustes_shapes", f"formes {X.shape} et {Y.shape}")
    if X.shape[0] < 3:
        raise ValidationError("procrustes_points", f"au moins 3 points requis (reçu {X.shape[0]})")

    mu_x, mu_y = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mu_x, Y - mu_y
    sx = np.linalg.svd(Xc, compute_uv=False)
    if sx[0] <= 0 or sx[1] <= 1e-9 * sx[0]:
        raise ValidationError("procrustes_rank", "configuration dégénérée : points confondus ou alignés (rang < 2)")

    U, S, Vt = np.linalg.svd(Yc.T @ Xc)
    D = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[-1] = -1.0
    R = U @ np.diag(D) @ Vt
    s = float(np.sum(S * D) / np.sum(Xc ** 2)) if scale else 1.0
    t = mu_y - s * R @ mu_x
    return s, R, t


def apply_similarity(X: np.ndarray, s: float, R: np.ndarray, t: np.ndarray) -> np.ndarray:
    return s * np.asarray(X) @ R.T + t


def procrustes_errors(pred: np.ndarray, gt: np.ndarray, scale: bool = True) -> np.ndarray:
    pred, gt = _check_pair(pred, gt)
    out = np.empty(pred.shape[:2])
    for n in range(pred.shape[0]):
        s, R, t = procrustes_align(pred[n], gt[n], scale=scale)
        out[n] = np.linalg.norm(apply_similarity(pred[n], s, R, t) - gt[n], axis=-1)
    return out


def pmpjpe(pred: np.ndarray, gt: np.ndarray, scale: bool = True) -> float:
    return float(procrustes_errors(pred, gt, scale).mean())


# =========================================================
# Rapport
# =========================================================
def match_frames(ts_a: np.ndarray, a: np.ndarray, ts_b: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    common = np.intersect1d(ts_a, ts_b)
    if common.size == 0:
        raise ValidationError("eval_frames", "aucune image commune entre prédiction et vérité terrain")
    ia = {t: i for i, t in enumerate(ts_a)}
    ib = {t: i for i, t in enumerate(ts_b)}
    return common, a[[ia[t] for t in common]], b[[ib[t] for t in common]]


def time_split(n: int, test_fraction: float) -> Tuple[np.ndarray, np.ndarray]:
    if not 0.0 < test_fraction < 1.0:
        raise ValidationError("test_fraction", f"doit être dans ]0, 1[ (reçu {test_fraction})")
    n_test = max(1, int(round(n * test_fraction)))
    if n_test >= n:
        raise ValidationError("eval_split", f"{n} image(s) : impossible de séparer apprentissage et test")
    return np.arange(n - n_test), np.arange(n - n_test, n)


def evaluate(disc_train: np.ndarray, gt_train: np.ndarray, disc_test: np.ndarray, gt_test: np.ndarray,
             eval_cfg=None) -> Dict:
    regressor = fit_regressor(disc_train, gt_train, eval_cfg)
    pred = regressor.predict(disc_test)
    per_frame = getattr(eval_cfg, "per_frame", True)
    scale = getattr(eval_cfg, "scale", True)
    if pred.shape != np.asarray(gt_test).shape:
        raise ValidationError("metric_shapes", f"prédiction {pred.shape}, vérité terrain {np.shape(gt_test)}")

    errors = procrustes_errors(pred, gt_test, scale=scale)
    report = {
        "mpjpe_mm": mpjpe(pred, gt_test, per_frame),
        "pmpjpe_mm": float(errors.mean()),
        "pmpjpe_noscale_mm": pmpjpe(pred, gt_test, scale=False) if scale else float(errors.mean()),
        "per_joint_mm": errors.mean(axis=0).tolist(),
        "n_frames": int(pred.shape[0]),
        "regressor": regressor.kind,
    }
    if isinstance(regressor, RegressionMap):
        report["rank_deficient"] = regressor.rank_deficient
    return report


def evaluate_files(pred_train, gt_train, pred_test=None, gt_test=None, eval_cfg=None) -> Dict:
    """
    Chemins JSONL. Sans jeu de test, les dernières images du jeu d'apprentissage
    (fraction test_fraction) servent de test.
    """
    ts_p, disc, _ = load_keypoints3d(pred_train)
    ts_g, gt = load_gt_keypoints(gt_train)
    _, disc, gt = match_frames(ts_p, disc, ts_g, gt)

    if pred_test is None:
        train_idx, test_idx = time_split(disc.shape[0], getattr(eval_cfg, "test_fraction", 0.3))
        logger.info(f"[EVAL] séparation temporelle : {train_idx.size} apprentissage / {test_idx.size} test")
        report = evaluate(disc[train_idx], gt[train_idx], disc[test_idx], gt[test_idx], eval_cfg)
        report["split"] = "time"
        return report

    if gt_test is None:
        raise ValidationError("eval_gt_test", "vérité terrain du jeu de test manquante")
    ts_pt, disc_t, _ = load_keypoints3d(pred_test)
    ts_gt, gt_t = load_gt_keypoints(gt_test)
    _, disc_t, gt_t = match_frames(ts_pt, disc_t, ts_gt, gt_t)
    logger.info(f"[EVAL] jeu de test séparé : {disc.shape[0]} apprentissage / {disc_t.shape[0]} test")
    report = evaluate(disc, gt, disc_t, gt_t, eval_cfg)
    report["split"] = "held_out"
    return report


def write_report(report: Dict, out_dir, joint_names: Optional[Sequence[str]] = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "metrics.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2)
    with open(out_dir / "per_joint.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["joint", "name", "pmpjpe_mm"])
        for j, err in enumerate(report["per_joint_mm"]):
            name = joint_names[j] if joint_names and j < len(joint_names) else f"joint_{j}"
            writer.writerow([j, name, repr(float(err))])
    return path


def format_report_table(report: Dict, joint_names: Optional[Sequence[str]] = None) -> str:
    lines = [
        f"Régresseur        : {report['regressor']}",
        f"Images de test    : {report['n_frames']}",
        f"MPJPE             : {report['mpjpe_mm']:.2f} mm",
        f"PMPJPE            : {report['pmpjpe_mm']:.2f} mm",
        f"PMPJPE (sans éch.): {report['pmpjpe_noscale_mm']:.2f} mm",
        "",
        f"{'articulation':<16}{'PMPJPE (mm)':>12}",
    ]
    for j, err in enumerate(report["per_joint_mm"]):
        name = joint_names[j] if joint_names and j < len(joint_names) else f"joint_{j}"
        lines.append(f"{name:<16}{err:>12.2f}")
    return "\n".join(lines)
