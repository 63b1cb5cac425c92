#!/usr/bin/env python3
"""
Formats de fichiers du pipeline

- Conteneur binaire MVKD (cartes de chaleur / images flottantes) :
  en-tête little-endian {magic "MVKD", version, H, W, C, view_index, frame_index}
  suivi des valeurs float32 little-endian en ordre H×W×C.
- Points clés 3D (JSON Lines) : {"t", "keypoints_mm", "edges"} par image.
- Points clés 2D (JSON Lines) : {"t", "views": [[[u, v] | null, ...], ...]}.
- Vérité terrain (JSON Lines) : {"t", "joints": [[x, y, z], ...]}.
- Séquence multi-vue : répertoire caméras + images + manifeste.
"""
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from utils.errors import ValidationError

MVKD_MAGIC = b"MVKD"
MVKD_VERSION = 1
# magic, version, H, W, C, view_index, frame_index
MVKD_HEADER = struct.Struct("<4sHIIIii")


# =========================================================
# Conteneur MVKD
# =========================================================
def write_mvkd(path, values: np.ndarray, view_index: int = 0, frame_index: int = 0) -> None:
    values = np.asarray(values)
    if values.ndim == 2:
        values = values[:, :, None]
    if values.ndim != 3:
        raise ValidationError("mvkd_shape", f"H×W×C attendu, reçu {values.shape}")
    H, W, C = values.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MVKD_HEADER.pack(MVKD_MAGIC, MVKD_VERSION, H, W, C, int(view_index), int(frame_index)))
        f.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_mvkd(path) -> Tuple[np.ndarray, Dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Conteneur MVKD introuvable: {path}")
    raw = path.read_bytes()
    if len(raw) < MVKD_HEADER.size:
        raise ValidationError("mvkd_header", f"{path}: fichier tronqué")
    magic, version, H, W, C, view_index, frame_index = MVKD_HEADER.unpack_from(raw, 0)
    if magic != MVKD_MAGIC:
        raise ValidationError("mvkd_magic", f"{path}: magic {magic!r}")
    if version != MVKD_VERSION:
        raise ValidationError("mvkd_version", f"{path}: version {version} non supportée")
    expected = H * W * C * 4
    payload = raw[MVKD_HEADER.size:]
    if len(payload) != expected:
        raise ValidationError("mvkd_payload", f"{path}: {len(payload)} octets au lieu de {expected}")
    values = np.frombuffer(payload, dtype="<f4").reshape(H, W, C).astype(np.float64)
    header = {"H": H, "W": W, "C": C, "view_index": view_index, "frame_index": frame_index, "version": version}
    return values, header


def read_heatmap(path) -> np.ndarray:
    """Carte de chaleur figée : conteneur MVKD ou tableau .npy (H×W×C)."""
    path = Path(path)
    if path.suffix.lower() == ".npy":
        if not path.exists():
            raise FileNotFoundError(f"Carte introuvable: {path}")
        values = np.load(path).astype(np.float64)
        return values[:, :, None] if values.ndim == 2 else values
    values, _ = read_mvkd(path)
    return values


# =========================================================
# JSON Lines
# =========================================================
def write_jsonl(path, records: Iterable[Dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record) + "\n")


def read_jsonl(path) -> List[Dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Fichier JSONL introuvable: {path}")
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ValidationError("jsonl_syntax", f"{path}:{lineno}: {e}")
    return records


def keypoint_record(t: int, points: np.ndarray, edges: Sequence[Tuple[int, int, float]] = (),
                    extra: Optional[Dict] = None) -> Dict:
    record = {
        "t": int(t),
        "keypoints_mm": [[float(v) for v in p] for p in np.asarray(points).reshape(-1, 3)],
        "edges": [[int(m), int(n), float(w)] for m, n, w in edges],
    }
    if extra:
        record.update(extra)
    return record


def load_keypoints3d(path) -> Tuple[np.ndarray, np.ndarray, List]:
    """-> (t N, points N×J×3, arêtes de la première image)"""
    records = sorted(read_jsonl(path), key=lambda r: r["t"])
    if not records:
        raise ValidationError("keypoints_empty", f"{path}: aucun enregistrement")
    ts = np.array([r["t"] for r in records], dtype=np.int64)
    # point non triangulé : null -> NaN
    points = np.array([[p if p is not None else [np.nan] * 3 for p in r["keypoints_mm"]] for r in records],
                      dtype=np.float64)
    return ts, points, records[0].get("edges", [])


def load_gt_keypoints(path) -> Tuple[np.ndarray, np.ndarray]:
    records = sorted(read_jsonl(path), key=lambda r: r["t"])
    ts = np.array([r["t"] for r in records], dtype=np.int64)
    joints = np.array([r["joints"] for r in records], dtype=np.float64)
    return ts, joints


def load_keypoints2d(path) -> List[Dict]:
    records = read_jsonl(path)
    for r in records:
        if "t" not in r or "views" not in r:
            raise ValidationError("keypoints2d_format", f"{path}: champs 't' et 'views' requis")
    return sorted(records, key=lambda r: r["t"])


# =========================================================
# Hachage
# =========================================================
def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_hash(obj) -> str:
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


# =========================================================
# Séquence multi-vue sur disque
# =========================================================
FRAME_PATTERN = "view{view}_t{t}.png"


@dataclass(eq=False)
class SequenceInfo:
    """
    Répertoire : cameras.json, frames/view{i}_t{t}.png, gt_keypoints.jsonl (optionnel),
    manifest.json.
    """
    name: str
    root: Path
    cameras: List
    n_frames: int
    manifest: Dict = field(default_factory=dict)

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    def frame_path(self, view: int, t: int) -> Path:
        return self.root / "frames" / FRAME_PATTERN.format(view=view, t=t)

    @property
    def gt_path(self) -> Path:
        return self.root / "gt_keypoints.jsonl"


def load_sequence(path, name: Optional[str] = None) -> SequenceInfo:
    from utils.geometry import load_cameras

    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"Manifeste introuvable: {manifest_path}")
    with open(manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)
    cameras = load_cameras(root / "cameras.json")
    n_frames = int(manifest.get("n_frames", 0))
    if n_frames < 1:
        raise ValidationError("manifest_frames", f"{manifest_path}: n_frames manquant")
    if int(manifest.get("n_views", len(cameras))) != len(cameras):
        raise ValidationError("manifest_views", f"{manifest_path}: {manifest.get('n_views')} vues, "
                                                f"{len(cameras)} caméras")
    return SequenceInfo(name=name or manifest.get("split") or root.name, root=root,
                        cameras=cameras, n_frames=n_frames, manifest=manifest)
