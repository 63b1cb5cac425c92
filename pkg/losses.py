"""
Pertes d'entraînement et objectif avec curriculum

- recon_loss      : MSE pixel entre prédiction combinée et cible, sommée sur les vues
- length_loss     : Σ_{arêtes actives} |l_avg − l| avec moyenne glissante l_avg
- separation_loss : Σ_{i≠j} exp(−‖U_i − U_j‖² / (2σ_s²)) en coordonnées de volume [0,1]³
- total_objective : L_recon + 1[epoch > e]·(ω_r·L_length + ω_s·L_sep)

Chaque perte a son adjoint `*_vjp` pour diff_engine.
"""
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np

from extractors.edge_render import EdgeWeights
from utils.errors import ValidationError

logger = logging.getLogger(__name__)


# =========================================================
# État de longueur (moyenne glissante)
# =========================================================
class LengthState:
    """
    l_avg par paire (m < n), dans l'ordre de EdgeWeights.pairs.
    Seules les paires déjà actives au moins une fois sont initialisées.
    """

    def __init__(self, n_pairs: int, beta: float = 0.9):
        if not 0.0 < beta < 1.0:
            raise ValidationError("ema_decay", f"β doit être dans ]0,1[ (reçu {beta})")
        self.beta = float(beta)
        self.l_avg = np.zeros(int(n_pairs))
        self.initialized = np.zeros(int(n_pairs), dtype=bool)

    @property
    def n_pairs(self) -> int:
        return self.l_avg.size

    def ensure_initialized(self, lengths: np.ndarray, active: np.ndarray) -> None:
        fresh = active & ~self.initialized
        if np.any(fresh):
            self.l_avg[fresh] = lengths[fresh]
            self.initialized[fresh] = True

    def copy(self) -> "LengthState":
        other = LengthState(self.n_pairs, self.beta)
        other.l_avg = self.l_avg.copy()
        other.initialized = self.initialized.copy()
        return other


def edge_lengths(kps3d: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    diff = kps3d[pairs[:, 0]] - kps3d[pairs[:, 1]]
    return np.sqrt(np.sum(diff * diff, axis=1))


def update_length_state(state: LengthState, lengths: np.ndarray, active: np.ndarray) -> LengthState:
    """
    l_avg ← β·l_avg + (1−β)·l pour les arêtes actives déjà vues ;
    première observation : l_avg = l ; arêtes inactives inchangées.
    """
    lengths = np.asarray(lengths, dtype=np.float64)
    active = np.asarray(active, dtype=bool)
    if lengths.shape != state.l_avg.shape:
        raise ValidationError("length_state_size", f"{lengths.shape} != {state.l_avg.shape}")
    seen = active & state.initialized
    state.l_avg[seen] = state.beta * state.l_avg[seen] + (1.0 - state.beta) * lengths[seen]
    state.ensure_initialized(lengths, active)
    return state


# =========================================================
# Perte de longueur
# =========================================================
def length_loss(kps3d: np.ndarray, weights: EdgeWeights, state: LengthState) -> float:
    kps3d = np.asarray(kps3d, dtype=np.float64)
    active = weights.active_mask()
    if not np.any(active):
        return 0.0
    lengths = edge_lengths(kps3d, weights.pairs)
    state.ensure_initialized(lengths, active)
    return float(np.sum(np.abs(state.l_avg[active] - lengths[active])))


def length_loss_vjp(kps3d: np.ndarray, weights: EdgeWeights, state: LengthState, g: float = 1.0) -> np.ndarray:
    """
    d|l_avg − l|/dX_m = sign(l − l_avg)·(X_m − X_n)/l ; l_avg est constant.
    Arête de longueur nulle : contribution nulle.
    """
    kps3d = np.asarray(kps3d, dtype=np.float64)
    grad = np.zeros_like(kps3d)
    active = weights.active_mask()
    if not np.any(active):
        return grad

    pairs = weights.pairs[active]
    diff = kps3d[pairs[:, 0]] - kps3d[pairs[:, 1]]
    lengths = np.sqrt(np.sum(diff * diff, axis=1))
    sign = np.sign(lengths - state.l_avg[active])
    safe = np.where(lengths > 0, lengths, 1.0)
    coef = np.where(lengths > 0, g * sign / safe, 0.0)
    contrib = coef[:, None] * diff

    J = kps3d.shape[0]
    for axis in range(3):
        grad[:, axis] += np.bincount(pairs[:, 0], weights=contrib[:, axis], minlength=J)
        grad[:, axis] -= np.bincount(pairs[:, 1], weights=contrib[:, axis], minlength=J)
    return grad


# =========================================================
# Perte de séparation
# =========================================================
def _pairwise_kernel(U: np.ndarray, sigma_s: float) -> Tuple[np.ndarray, np.ndarray]:
    diff = U[:, None, :] - U[None, :, :]
    K = np.exp(-np.sum(diff * diff, axis=-1) / (2.0 * sigma_s ** 2))
    np.fill_diagonal(K, 0.0)
    return K, diff


def separation_loss(U: np.ndarray, sigma_s: float = 0.08) -> float:
    """U : points clés en coordonnées de volume normalisées (J×3)."""
    U = np.asarray(U, dtype=np.float64)
    if U.shape[0] < 2:
        return 0.0
    if not sigma_s > 0:
        raise ValidationError("separation_sigma", f"σ_s doit être > 0 (reçu {sigma_s})")
    K, _ = _pairwise_kernel(U, sigma_s)
    return float(K.sum())


def separation_loss_vjp(U: np.ndarray, sigma_s: float = 0.08, g: float = 1.0) -> np.ndarray:
    # paires ordonnées : chaque couple compte deux fois
    U = np.asarray(U, dtype=np.float64)
    if U.shape[0] < 2:
        return np.zeros_like(U)
    K, diff = _pairwise_kernel(U, sigma_s)
    return -2.0 * g / sigma_s ** 2 * np.sum(K[:, :, None] * diff, axis=1)


# =========================================================
# Prédiction combinée et reconstruction
# =========================================================
def combine_edge_prediction(E_t: np.ndarray, E_tk: np.ndarray) -> np.ndarray:
    """max pixel à pixel des deux cartes d'arêtes, borné à [0,1]."""
    E_t = np.asarray(E_t, dtype=np.float64)
    E_tk = np.asarray(E_tk, dtype=np.float64)
    if E_t.shape != E_tk.shape:
        raise ValidationError("combine_shapes", f"{E_t.shape} != {E_tk.shape}")
    return np.clip(np.maximum(E_t, E_tk), 0.0, 1.0)


def combine_edge_prediction_vjp(E_t: np.ndarray, E_tk: np.ndarray, g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # égalité : le gradient va à E_t
    m = np.maximum(E_t, E_tk)
    passing = (m >= 0.0) & (m <= 1.0)
    g = np.where(passing, g, 0.0)
    first = E_t >= E_tk
    return np.where(first, g, 0.0), np.where(first, 0.0, g)


class FeatureTransform(Protocol):
    """Transformée de caractéristiques appliquée avant la distance L2."""

    def __call__(self, x: np.ndarray) -> np.ndarray: ...

    def vjp(self, x: np.ndarray, g: np.ndarray) -> np.ndarray: ...


class IdentityFeatures:
    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x

    def vjp(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        return g


def _target_values(target) -> np.ndarray:
    return np.asarray(getattr(target, "values", target), dtype=np.float64)


def recon_loss(preds: Sequence[np.ndarray], targets: Sequence, feature_transform: Optional[FeatureTransform] = None) -> float:
    """Σ_vues moyenne((φ(pred) − φ(cible))²)."""
    if len(preds) != len(targets):
        raise ValidationError("recon_views", f"{len(preds)} prédictions pour {len(targets)} cibles")
    phi = feature_transform or IdentityFeatures()
    total = 0.0
    for i, (pred, target) in enumerate(zip(preds, targets)):
        pred = np.asarray(pred, dtype=np.float64)
        target = _target_values(target)
        if pred.shape != target.shape:
            raise ValidationError("recon_shapes", f"vue {i}: {pred.shape} != {target.shape}")
        diff = phi(pred) - phi(target)
        total += float(np.mean(diff * diff))
    return total


def recon_loss_vjp(preds: Sequence[np.ndarray], targets: Sequence,
                   feature_transform: Optional[FeatureTransform] = None, g: float = 1.0) -> List[np.ndarray]:
    phi = feature_transform or IdentityFeatures()
    grads = []
    for pred, target in zip(preds, targets):
        pred = np.asarray(pred, dtype=np.float64)
        diff = phi(pred) - phi(_target_values(target))
        grads.append(phi.vjp(pred, 2.0 * g * diff / diff.size))
    return grads


# =========================================================
# Objectif total
# =========================================================
@dataclass
class LossParts:
    recon: float
    length: float = 0.0
    separation: float = 0.0


def objective_weights(epoch: int, cfg) -> Tuple[float, float]:
    """(poids de longueur, poids de séparation) effectifs à cette époque."""
    if epoch > cfg.curriculum_epochs:
        return cfg.length_weight, cfg.separation_weight
    return 0.0, 0.0


def total_objective(epoch: int, parts: LossParts, cfg) -> float:
    if epoch <= cfg.curriculum_epochs:
        return parts.recon
    return parts.recon + (cfg.length_weight * parts.length + cfg.separation_weight * parts.separation)


# =========================================================
# Journal CSV
# =========================================================
class LossLog:
    COLUMNS = ("epoch", "step", "L_recon", "L_length", "L_sep", "total")

    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        exists = self.path.exists() and self.path.stat().st_size > 0
        self._file = open(self.path, "a" if append else "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._file)
        if not (append and exists):
            self._writer.writerow(self.COLUMNS)

    def write(self, epoch: int, step: int, parts: LossParts, total: float) -> None:
        self._writer.writerow([
            int(epoch), int(step),
            repr(float(parts.recon)), repr(float(parts.length)),
            repr(float(parts.separation)), repr(float(total)),
        ])

    def flush(self) -> None:
        self._file.flush()

    def close(self) -> None:
        if not self._file.closed:
            self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_loss_log(path) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    out = []
    for row in rows:
        out.append({
            "epoch": int(row["epoch"]),
            "step": int(row["step"]),
            **{k: float(row[k]) for k in LossLog.COLUMNS[2:]},
        })
    return out
