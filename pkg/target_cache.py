"""
Cibles de reconstruction S(I_t, I_{t+k}) par vue, mises en cache sur disque.

Le nom de chaque fichier .npy est adressé par contenu : SHA-256 des deux images
sources, de la fenêtre SSIM, de l'option de normalisation et du raster cible.
Répertoire : argument explicite > $MVKD_CACHE_DIR > <séquence>/.targets
"""
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple
from uuid import uuid4

import numpy as np

from io_formats import SequenceInfo, canonical_hash, file_sha256
from utils.ProcessImage import ProcessImage
from utils.errors import ValidationError
from utils.similarity import SSIMWindow, dissimilarity_target

logger = logging.getLogger(__name__)

CACHE_ENV = "MVKD_CACHE_DIR"


@dataclass(frozen=True)
class TargetSpec:
    frame_gap: int = 20
    raster: Tuple[int, int] = (64, 64)
    normalize: bool = True
    window: SSIMWindow = field(default_factory=SSIMWindow)

    def as_dict(self) -> dict:
        return {
            "frame_gap": self.frame_gap,
            "raster": list(self.raster),
            "normalize": self.normalize,
            "window": self.window.as_dict(),
        }


def resolve_cache_dir(seq_root, cache_dir: Optional[str] = None) -> Path:
    chosen = cache_dir or os.environ.get(CACHE_ENV)
    path = Path(chosen) if chosen else Path(seq_root) / ".targets"
    path.mkdir(parents=True, exist_ok=True)
    return path


def target_key(hash_a: str, hash_b: str, spec: TargetSpec) -> str:
    return canonical_hash({"frames": [hash_a, hash_b], **spec.as_dict()})


def compute_target(path_a, path_b, spec: TargetSpec) -> np.ndarray:
    a = ProcessImage(str(path_a))
    b = ProcessImage(str(path_b))
    dmap = dissimilarity_target(a.to_gray(), b.to_gray(), spec.window, normalize=spec.normalize)
    h, w = spec.raster
    return np.clip(a.resize(h, w, img=dmap.values), 0.0, 1.0)


def pair_indices(n_frames: int, frame_gap: int):
    if frame_gap >= n_frames:
        raise ValidationError("frame_gap", f"k={frame_gap} >= T={n_frames} : aucune paire d'images")
    return range(n_frames - frame_gap)


def build_targets(seq: SequenceInfo, spec: TargetSpec, cache_dir: Optional[str] = None,
                  pool=None) -> Dict[Tuple[int, int], np.ndarray]:
    """-> {(vue, t): carte H×W} pour toutes les paires (t, t+k)."""
    root = resolve_cache_dir(seq.root, cache_dir)
    starts = pair_indices(seq.n_frames, spec.frame_gap)
    items = [(view, t) for view in range(seq.n_views) for t in starts]

    hashes: Dict[Tuple[int, int], str] = {}

    def frame_hash(view: int, t: int) -> str:
        key = (view, t)
        if key not in hashes:
            path = seq.frame_path(view, t)
            if not path.exists():
                raise FileNotFoundError(f"Image introuvable: {path}")
            hashes[key] = file_sha256(path)
        return hashes[key]

    for view in range(seq.n_views):
        for t in range(seq.n_frames):
            frame_hash(view, t)

    def one(item):
        view, t = item
        key = target_key(frame_hash(view, t), frame_hash(view, t + spec.frame_gap), spec)
        path = root / f"{key}.npy"
        if path.exists():
            return np.load(path), True
        values = compute_target(seq.frame_path(view, t), seq.frame_path(view, t + spec.frame_gap), spec)
        # un nom par écrivain : deux paires identiques peuvent viser la même clé en parallèle
        tmp = root / f"{key}.{uuid4().hex}.tmp.npy"
        np.save(tmp, values)
        os.replace(tmp, path)
        return values, False

    results = pool.map_ordered(one, items) if pool is not None else [one(item) for item in items]
    hits = sum(1 for _, hit in results if hit)
    logger.info(f"[TARGETS] {seq.name}: {len(items)} cibles ({hits} depuis le cache {root})")
    return {item: values for item, (values, _) in zip(items, results)}
