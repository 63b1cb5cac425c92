"""
Agrégation volumique
Grille de voxels, rétroprojection des cartes de chaleur 2D par échantillonnage
bilinéaire, agrégation softmax entre vues, softmax spatial 3D -> points clés.

Chaque opération différentiable a sa forme « valeurs » (tableaux numpy) et son
adjoint `*_vjp`, utilisés par diff_engine.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from utils.errors import ValidationError
from utils.geometry import CameraModel, in_front, project_points
from utils.normalize import Normalize

logger = logging.getLogger(__name__)


# =========================================================
# Types
# =========================================================
@dataclass(eq=False)
class VoxelGrid:
    center: np.ndarray
    side_length: float
    resolution: int
    coords: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        B = self.resolution
        steps = self.side_length * (np.arange(B) + 0.5) / B - self.side_length / 2.0
        gi, gj, gk = np.meshgrid(steps, steps, steps, indexing="ij")
        self.coords = np.stack([gi, gj, gk], axis=-1) + self.center

    @property
    def spacing(self) -> float:
        return self.side_length / self.resolution

    @property
    def flat_coords(self) -> np.ndarray:
        return self.coords.reshape(-1, 3)

    @property
    def n_voxels(self) -> int:
        return self.resolution ** 3

    @property
    def lower(self) -> np.ndarray:
        return self.center - self.side_length / 2.0

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        lo = self.lower
        hi = self.center + self.side_length / 2.0
        return np.all((points >= lo) & (points <= hi), axis=1)

    def normalize(self, points: np.ndarray) -> np.ndarray:
        """Coordonnées dans [0,1]³ : (X − (centre − L/2)) / L."""
        return (np.asarray(points, dtype=np.float64) - self.lower) / self.side_length


@dataclass(eq=False)
class Heatmap2D:
    values: np.ndarray
    view_index: int = 0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 2:
            values = values[:, :, None]
        if values.ndim != 3:
            raise ValidationError("heatmap_shape", f"H×W×C attendu, reçu {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValidationError("heatmap_finite", f"vue {self.view_index}")
        self.values = values

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass(eq=False)
class ChannelVolume:
    values: np.ndarray
    grid: VoxelGrid

    @property
    def channels(self) -> int:
        return self.values.shape[-1]

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1, self.channels)


@dataclass(eq=False)
class Keypoints3D:
    points: np.ndarray
    timestamp: int = 0


@dataclass(eq=False)
class VolumeAffine:
    """Affine apprenable par canal sur le volume agrégé : scale·V + bias."""
    scale: np.ndarray
    bias: np.ndarray

    @classmethod
    def identity(cls, channels: int, scale: float = 1.0) -> "VolumeAffine":
        return cls(scale=np.full(channels, float(scale)), bias=np.zeros(channels))


# =========================================================
# Grille
# =========================================================
def build_grid(center=(0.0, 0.0, 0.0), side_length: float = 7500.0, resolution: int = 64) -> VoxelGrid:
    if not np.isfinite(side_length) or side_length <= 0:
        raise ValidationError("grid_side_length", f"L doit être > 0 (reçu {side_length})")
    if int(resolution) != resolution or resolution < 2:
        raise ValidationError("grid_resolution", f"B doit être un entier >= 2 (reçu {resolution})")
    return VoxelGrid(center=center, side_length=float(side_length), resolution=int(resolution))


# =========================================================
# Carte de chaleur issue de logits (softmax spatial 2D)
# =========================================================
def heatmap_from_logits(logits: np.ndarray) -> np.ndarray:
    """Softmax sur H×W par canal : chaque canal somme à 1."""
    H, W, C = logits.shape
    flat = logits.reshape(H * W, C)
    flat = flat - flat.max(axis=0, keepdims=True)
    e = np.exp(flat)
    return (e / e.sum(axis=0, keepdims=True)).reshape(H, W, C)


def heatmap_from_logits_vjp(heatmap: np.ndarray, g: np.ndarray) -> np.ndarray:
    dot = np.sum(g * heatmap, axis=(0, 1), keepdims=True)
    return heatmap * (g - dot)


# =========================================================
# Rétroprojection
# =========================================================
@dataclass(eq=False)
class SamplingPlan:
    """
    Opérateur linéaire voxel <- carte : 4 voisins bilinéaires par voxel.
    Poids nuls pour les voxels hors image ou derrière la caméra.
    """
    index: np.ndarray
    weight: np.ndarray
    heatmap_shape: Tuple[int, int]
    valid: np.ndarray


def build_sampling_plan(
    grid: VoxelGrid,
    cam: CameraModel,
    heatmap_shape: Tuple[int, int],
    depth_sign: float = 1.0,
) -> SamplingPlan:
    Hh, Wh = int(heatmap_shape[0]), int(heatmap_shape[1])
    uv, w = project_points(cam.P, grid.flat_coords)

    finite = np.all(np.isfinite(uv), axis=1)
    valid = in_front(w, depth_sign) & finite
    uv = np.where(finite[:, None], uv, 0.0)
    u, v = uv[:, 0], uv[:, 1]
    valid &= (u >= -0.5) & (u <= cam.width - 0.5) & (v >= -0.5) & (v <= cam.height - 0.5)

    # repère image normalisé -> coordonnée continue de la carte
    hm = Normalize.normalized_to_pixel(Normalize.pixel_to_normalized(uv, cam.width, cam.height), Wh, Hh)
    x, y = hm[:, 0], hm[:, 1]
    x = np.clip(x, 0.0, Wh - 1)
    y = np.clip(y, 0.0, Hh - 1)

    x0 = np.minimum(np.floor(x), max(Wh - 2, 0)).astype(np.int64)
    y0 = np.minimum(np.floor(y), max(Hh - 2, 0)).astype(np.int64)
    fx = x - x0
    fy = y - y0
    x1 = np.minimum(x0 + 1, Wh - 1)
    y1 = np.minimum(y0 + 1, Hh - 1)

    index = np.stack([y0 * Wh + x0, y0 * Wh + x1, y1 * Wh + x0, y1 * Wh + x1], axis=1)
    weight = np.stack([(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx], axis=1)
    weight = weight * valid[:, None]
    index = np.where(valid[:, None], index, 0)

    logger.debug(f"[PLAN] caméra {cam.name}: {int(valid.sum())}/{valid.size} voxels visibles")
    return SamplingPlan(index=index, weight=weight, heatmap_shape=(Hh, Wh), valid=valid)


def unproject_values(plan: SamplingPlan, heatmap: np.ndarray) -> np.ndarray:
    """carte H×W×C -> volume aplati N×C"""
    Hh, Wh = plan.heatmap_shape
    if heatmap.shape[:2] != (Hh, Wh):
        raise ValidationError("heatmap_plan_shape", f"{heatmap.shape[:2]} != {(Hh, Wh)}")
    flat = heatmap.reshape(Hh * Wh, -1)
    out = plan.weight[:, 0:1] * flat[plan.index[:, 0]]
    for k in range(1, 4):
        out += plan.weight[:, k:k + 1] * flat[plan.index[:, k]]
    return out


def unproject_vjp(plan: SamplingPlan, g: np.ndarray) -> np.ndarray:
    """Adjoint : dispersion des gradients voxels vers les pixels de la carte."""
    Hh, Wh = plan.heatmap_shape
    C = g.shape[1]
    idx = plan.index.ravel()
    out = np.empty((Hh * Wh, C))
    for c in range(C):
        contrib = (plan.weight * g[:, c:c + 1]).ravel()
        out[:, c] = np.bincount(idx, weights=contrib, minlength=Hh * Wh)
    return out.reshape(Hh, Wh, C)


def unproject_heatmap(
    grid: VoxelGrid,
    cam: CameraModel,
    hm: Heatmap2D,
    depth_sign: float = 1.0,
    plan: Optional[SamplingPlan] = None,
) -> ChannelVolume:
    if plan is None:
        plan = build_sampling_plan(grid, cam, hm.values.shape[:2], depth_sign=depth_sign)
    B = grid.resolution
    values = unproject_values(plan, hm.values).reshape(B, B, B, hm.channels)
    return ChannelVolume(values=values, grid=grid)


# =========================================================
# Agrégation softmax entre vues
# =========================================================
def softmax_aggregate_values(stack: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """stack (M, ...) -> (Σᵢ softmaxᵢ(v)·vᵢ, poids)"""
    shifted = stack - stack.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    weights = e / e.sum(axis=0, keepdims=True)
    return np.sum(weights * stack, axis=0), weights


def softmax_aggregate_vjp(stack: np.ndarray, out: np.ndarray, weights: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g[None] * weights * (1.0 + stack - out[None])


def softmax_aggregate(volumes: Sequence[ChannelVolume]) -> ChannelVolume:
    if not volumes:
        raise ValidationError("aggregate_empty", "au moins un volume requis")
    shape = volumes[0].values.shape
    for i, vol in enumerate(volumes):
        if vol.values.shape != shape:
            raise ValidationError("aggregate_shapes", f"volume {i}: {vol.values.shape} != {shape}")
    stack = np.stack([vol.values for vol in volumes], axis=0)
    out, _ = softmax_aggregate_values(stack)
    return ChannelVolume(values=out, grid=volumes[0].grid)


# =========================================================
# Affine par canal
# =========================================================
def volume_affine_values(flat: np.ndarray, scale: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return flat * scale[None, :] + bias[None, :]


def volume_affine_vjp(flat: np.ndarray, scale: np.ndarray, g: np.ndarray):
    return g * scale[None, :], np.sum(g * flat, axis=0), np.sum(g, axis=0)


# =========================================================
# Softmax spatial 3D
# =========================================================
def spatial_softmax_values(flat: np.ndarray, coords: np.ndarray, tau: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """volume aplati N×C -> (points C×3, probabilités N×C)"""
    a = flat / tau
    a = a - a.max(axis=0, keepdims=True)
    e = np.exp(a)
    probs = e / e.sum(axis=0, keepdims=True)
    return probs.T @ coords, probs


def spatial_softmax_vjp(probs: np.ndarray, coords: np.ndarray, points: np.ndarray,
                        g: np.ndarray, tau: float = 1.0) -> np.ndarray:
    # (coords_n − X_c)·g_c pour chaque voxel n et canal c
    proj = coords @ g.T - np.sum(points * g, axis=1)[None, :]
    return probs * proj / tau


def spatial_softmax_3d(vol: ChannelVolume, channel: int, tau: float = 1.0) -> np.ndarray:
    flat = vol.flat()[:, channel:channel + 1]
    points, _ = spatial_softmax_values(flat, vol.grid.flat_coords, tau)
    return points[0]


# =========================================================
# Composition
# =========================================================
def discover_keypoints(
    grid: VoxelGrid,
    cams: Sequence[CameraModel],
    heatmaps: Sequence[Heatmap2D],
    tau: float = 1.0,
    affine: Optional[VolumeAffine] = None,
    depth_sign: float = 1.0,
    plans: Optional[Sequence[SamplingPlan]] = None,
    pool=None,
    timestamp: int = 0,
) -> Keypoints3D:
    """
    rétroprojection -> agrégation softmax -> softmax spatial 3D par canal
    """
    if len(cams) != len(heatmaps):
        raise ValidationError("views_count", f"{len(cams)} caméras pour {len(heatmaps)} cartes")
    channels = heatmaps[0].channels
    if any(hm.channels != channels for hm in heatmaps):
        raise ValidationError("heatmap_channels", "nombre de canaux différent entre vues")

    def view_volume(i: int) -> ChannelVolume:
        plan = plans[i] if plans is not None else None
        return unproject_heatmap(grid, cams[i], heatmaps[i], depth_sign=depth_sign, plan=plan)

    indices = range(len(cams))
    volumes = pool.map_ordered(view_volume, indices) if pool is not None else [view_volume(i) for i in indices]
    aggregated = softmax_aggregate(volumes)

    flat = aggregated.flat()
    if affine is not None:
        flat = volume_affine_values(flat, affine.scale, affine.bias)
    coords = grid.flat_coords

    def channel_point(c: int) -> np.ndarray:
        pts, _ = spatial_softmax_values(flat[:, c:c + 1], coords, tau)
        return pts[0]

    channel_ids = range(channels)
    points = pool.map_ordered(channel_point, channel_ids) if pool is not None else [channel_point(c) for c in channel_ids]
    return Keypoints3D(points=np.vstack(points), timestamp=timestamp)
