"""
Rendu différentiable des cartes d'arêtes
Pour chaque paire (m, n) : gaussienne exp(−d²/σ²) de la distance au segment
[u_m, u_n], pondérée par relu(w_mn), agrégée par maximum pixel à pixel.

Les points 2D sont en coordonnées image normalisées [0,1]².
"""
import logging
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from utils.errors import ValidationError

logger = logging.getLogger(__name__)

EDGE_WEIGHT_INIT = 0.1


# =========================================================
# Types
# =========================================================
class EdgeWeights:
    """
    Poids symétriques J×J stockés en triangle supérieur (m < n),
    partagés entre vues et instants.
    """

    def __init__(self, n_keypoints: int, values=None, init: float = EDGE_WEIGHT_INIT):
        if n_keypoints < 2:
            raise ValidationError("edge_keypoints", f"J >= 2 requis (reçu {n_keypoints})")
        self.n_keypoints = int(n_keypoints)
        rows, cols = np.triu_indices(self.n_keypoints, k=1)
        self.pairs = np.stack([rows, cols], axis=1)
        if values is None:
            self.values = np.full(len(self.pairs), float(init))
        else:
            values = np.asarray(values, dtype=np.float64).ravel()
            if values.size != len(self.pairs):
                raise ValidationError("edge_weights_size", f"{values.size} != {len(self.pairs)}")
            self.values = values.copy()

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    def matrix(self) -> np.ndarray:
        M = np.zeros((self.n_keypoints, self.n_keypoints))
        M[self.pairs[:, 0], self.pairs[:, 1]] = self.values
        return M + M.T

    def get(self, m: int, n: int) -> float:
        if m == n:
            raise ValidationError("edge_diagonal", "la diagonale n'est pas utilisée")
        return float(self.matrix()[m, n])

    def active_mask(self) -> np.ndarray:
        return self.values > 0

    def copy(self) -> "EdgeWeights":
        return EdgeWeights(self.n_keypoints, values=self.values)


@dataclass
class EdgeConfig:
    sigma: float = 0.02
    height: int = 64
    width: int = 64

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValidationError("edge_sigma", f"σ doit être > 0 (reçu {self.sigma})")
        if self.height < 1 or self.width < 1:
            raise ValidationError("edge_raster", f"raster {self.height}x{self.width}")

    def pixel_centers(self) -> np.ndarray:
        """Centres des pixels du raster, H×W×2 en (x, y) normalisés."""
        xs = (np.arange(self.width) + 0.5) / self.width
        ys = (np.arange(self.height) + 0.5) / self.height
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], axis=-1)


@dataclass(eq=False)
class EdgeMap:
    values: np.ndarray
    view_index: int = 0
    timestamp: int = 0


@dataclass(eq=False)
class EdgeRenderCache:
    """État conservé par la passe avant pour l'adjoint."""
    kps: np.ndarray
    weights: np.ndarray
    winner: np.ndarray
    gauss: np.ndarray
    t: np.ndarray
    diff: np.ndarray
    any_active: bool
    cfg: EdgeConfig = field(repr=False)


# =========================================================
# Distance au segment
# =========================================================
def _segment_projection(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    p (...×2), a, b (2,) -> (t borné dans [0,1], p − q) avec q le point le
    plus proche sur [a, b]. a = b : t = 0.
    """
    ab = b - a
    denom = float(ab @ ab)
    if denom <= 0.0:
        t = np.zeros(p.shape[:-1])
    else:
        t = np.clip(((p - a) @ ab) / denom, 0.0, 1.0)
    q = a + t[..., None] * ab
    return t, p - q


def point_segment_distance(p, a, b) -> float:
    p = np.asarray(p, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _, diff = _segment_projection(p, a, b)
    return float(np.sqrt(diff @ diff))


def segment_sq_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """d(p)² au segment [a, b] pour chaque point p (...×2)."""
    _, diff = _segment_projection(p, a, b)
    return np.sum(diff * diff, axis=-1)


def segment_sq_distance_vjp(p: np.ndarray, a: np.ndarray, b: np.ndarray, g: np.ndarray):
    t, diff = _segment_projection(p, a, b)
    axes = tuple(range(diff.ndim - 1))
    ga = -2.0 * np.sum((g * (1.0 - t))[..., None] * diff, axis=axes)
    gb = -2.0 * np.sum((g * t)[..., None] * diff, axis=axes)
    return ga, gb


def render_edge(a, b, cfg: EdgeConfig) -> EdgeMap:
    """E(p) = exp(−d(p)²/σ²) sur le raster."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _, diff = _segment_projection(cfg.pixel_centers(), a, b)
    d2 = np.sum(diff * diff, axis=-1)
    return EdgeMap(values=np.exp(-d2 / cfg.sigma ** 2))


def render_edge_vjp(p: np.ndarray, a: np.ndarray, b: np.ndarray, g: np.ndarray, sigma: float):
    """
    Adjoint de la gaussienne de segment par rapport à (a, b).
    Avec q = a + t(b − a) et t optimal, d(d²)/da = −2(p − q)(1 − t), d(d²)/db = −2(p − q)t.
    """
    t, diff = _segment_projection(p, a, b)
    E = np.exp(-np.sum(diff * diff, axis=-1) / sigma ** 2)
    coef = g * E * (2.0 / sigma ** 2)
    ga = np.sum((coef * (1.0 - t))[..., None] * diff, axis=tuple(range(diff.ndim - 1)))
    gb = np.sum((coef * t)[..., None] * diff, axis=tuple(range(diff.ndim - 1)))
    return ga, gb


# =========================================================
# Agrégation
# =========================================================
def active_edges(weights: EdgeWeights) -> List[Tuple[int, int]]:
    return [(int(m), int(n)) for (m, n), w in zip(weights.pairs, weights.values) if w > 0]


def aggregate_edge_values(kps: np.ndarray, weights: EdgeWeights, cfg: EdgeConfig):
    """
    E(p) = max_{m<n} relu(w_mn)·E_mn(p). Les paires inactives ne sont pas
    rendues. Égalité de maximum : paire d'indice le plus petit.
    """
    kps = np.asarray(kps, dtype=np.float64)
    if kps.shape[0] < 2:
        raise ValidationError("edge_keypoints", f"J >= 2 requis (reçu {kps.shape[0]})")
    if kps.shape[0] != weights.n_keypoints:
        raise ValidationError("edge_keypoints", f"{kps.shape[0]} points pour {weights.n_keypoints} poids")

    H, W = cfg.height, cfg.width
    active = np.flatnonzero(weights.values > 0)
    if active.size == 0:
        empty = np.zeros((H, W))
        cache = EdgeRenderCache(kps=kps, weights=weights.values.copy(), winner=np.zeros((H, W), dtype=np.int64),
                                gauss=empty, t=empty, diff=np.zeros((H, W, 2)), any_active=False, cfg=cfg)
        return empty, cache

    pix = cfg.pixel_centers()
    a = kps[weights.pairs[active, 0]]
    b = kps[weights.pairs[active, 1]]
    ab = b - a
    denom = np.sum(ab * ab, axis=1)
    rel = pix[None] - a[:, None, None, :]
    safe = np.where(denom > 0, denom, 1.0)
    t = np.sum(rel * ab[:, None, None, :], axis=-1) / safe[:, None, None]
    t = np.where(denom[:, None, None] > 0, np.clip(t, 0.0, 1.0), 0.0)
    diff = rel - t[..., None] * ab[:, None, None, :]
    gauss = np.exp(-np.sum(diff * diff, axis=-1) / cfg.sigma ** 2)

    weighted = weights.values[active][:, None, None] * gauss
    local_winner = np.argmax(weighted, axis=0)
    value = np.take_along_axis(weighted, local_winner[None], axis=0)[0]

    rows, cols = np.indices((H, W))
    cache = EdgeRenderCache(
        kps=kps,
        weights=weights.values.copy(),
        winner=active[local_winner],
        gauss=gauss[local_winner, rows, cols],
        t=t[local_winner, rows, cols],
        diff=diff[local_winner, rows, cols],
        any_active=True,
        cfg=cfg,
    )
    return value, cache


def aggregate_edges_vjp(cache: EdgeRenderCache, g: np.ndarray, pairs: np.ndarray):
    """
    Adjoint de l'agrégation par maximum : le gradient de chaque pixel va à la
    paire gagnante. Retourne (g_kps J×2, g_weights P).
    """
    g_kps = np.zeros_like(cache.kps)
    g_w = np.zeros_like(cache.weights)
    if not cache.any_active:
        return g_kps, g_w

    winner = cache.winner.ravel()
    gflat = g.ravel()
    gauss = cache.gauss.ravel()
    w = cache.weights[winner]

    g_w += np.bincount(winner, weights=gflat * gauss, minlength=g_w.size)

    coef = gflat * w * gauss * (2.0 / cache.cfg.sigma ** 2)
    t = cache.t.ravel()
    diff = cache.diff.reshape(-1, 2)
    ca = (coef * (1.0 - t))[:, None] * diff
    cb = (coef * t)[:, None] * diff

    m_idx = pairs[winner, 0]
    n_idx = pairs[winner, 1]
    J = g_kps.shape[0]
    for axis in range(2):
        g_kps[:, axis] += np.bincount(m_idx, weights=ca[:, axis], minlength=J)
        g_kps[:, axis] += np.bincount(n_idx, weights=cb[:, axis], minlength=J)
    return g_kps, g_w


def aggregate_edges(kps2d: np.ndarray, weights: EdgeWeights, cfg: EdgeConfig,
                    view_index: int = 0, timestamp: int = 0) -> EdgeMap:
    value, _ = aggregate_edge_values(kps2d, weights, cfg)
    return EdgeMap(values=value, view_index=view_index, timestamp=timestamp)
