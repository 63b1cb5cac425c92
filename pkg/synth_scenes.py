"""
Scènes synthétiques multi-caméras

Squelette articulé (gabarit JSON), mouvement par cinématique directe
(angles sinusoïdaux à bande limitée + dérive et lacet de la racine), caméras
en anneau, rendu : fond blanc, taches gaussiennes sombres aux articulations,
segments anti-crénelés le long des os.
"""
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np

from io_formats import FRAME_PATTERN, canonical_hash, file_sha256, write_jsonl
from utils.ProcessImage import ProcessImage
from utils.errors import EnvelopeError, ValidationError
from utils.geometry import CameraModel, in_front, look_at_camera, project_points, save_cameras
from utils.similarity import Frame

logger = logging.getLogger(__name__)

CONFIG_DIR = Path(__file__).resolve().parent / "config"
ENVELOPE_RETRIES = 10
AMPLITUDE_DECAY = 0.7
BLOB_DARKNESS = 0.9
LIMB_DARKNESS = 0.6
# périodes des sinusoïdes, en images
PERIOD_RANGE = (40.0, 120.0)


# =========================================================
# Squelette
# =========================================================
@dataclass(eq=False)
class JointSpec:
    name: str
    parent: Optional[int]
    offset: np.ndarray
    axis: np.ndarray
    amplitude: float


@dataclass(eq=False)
class SkeletonSpec:
    name: str
    joints: List[JointSpec]
    root_rest: np.ndarray
    yaw_amplitude: float = 0.0
    height_mm: float = 0.0

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def joint_names(self) -> List[str]:
        return [j.name for j in self.joints]

    @property
    def bones(self) -> List[Tuple[int, int, float]]:
        return [(j.parent, i, float(np.linalg.norm(j.offset)))
                for i, j in enumerate(self.joints) if j.parent is not None]

    def validate(self) -> "SkeletonSpec":
        roots = [i for i, j in enumerate(self.joints) if j.parent is None]
        if len(roots) != 1:
            raise ValidationError("skeleton_root", f"{self.name}: une seule racine attendue, {len(roots)} trouvées")
        for i, j in enumerate(self.joints):
            if j.parent is None:
                continue
            # parents avant enfants : l'ordre est topologique, donc sans cycle
            if not 0 <= j.parent < i:
                raise ValidationError("skeleton_tree", f"{self.name}: '{j.name}' avant son parent")
            if not np.linalg.norm(j.offset) > 0:
                raise ValidationError("skeleton_bone_length", f"{self.name}: os nul vers '{j.name}'")
        return self

    @classmethod
    def from_dict(cls, data: Dict) -> "SkeletonSpec":
        names = [j["name"] for j in data["joints"]]
        if len(set(names)) != len(names):
            raise ValidationError("skeleton_names", "noms d'articulations en double")
        index = {n: i for i, n in enumerate(names)}
        joints = []
        for j in data["joints"]:
            parent = j.get("parent")
            if parent is not None and parent not in index:
                raise ValidationError("skeleton_parent", f"parent inconnu '{parent}'")
            axis = np.asarray(j.get("axis", [1.0, 0.0, 0.0]), dtype=np.float64)
            joints.append(JointSpec(
                name=j["name"],
                parent=index[parent] if parent is not None else None,
                offset=np.asarray(j["offset"], dtype=np.float64),
                axis=axis / np.linalg.norm(axis),
                amplitude=np.deg2rad(float(j.get("amplitude_deg", 0.0))),
            ))
        return cls(
            name=data.get("name", "skeleton"),
            joints=joints,
            root_rest=np.asarray(data.get("root_rest", [0.0, 0.0, 0.0]), dtype=np.float64),
            yaw_amplitude=np.deg2rad(float(data.get("yaw_amplitude_deg", 0.0))),
            height_mm=float(data.get("height_mm", 0.0)),
        ).validate()


def load_skeleton(name_or_path: str) -> SkeletonSpec:
    path = Path(name_or_path)
    if not path.suffix:
        path = CONFIG_DIR / f"skeleton_{name_or_path}.json"
    if not path.exists():
        raise FileNotFoundError(f"Gabarit de squelette introuvable: {path}")
    with open(path, encoding="utf-8") as f:
        return SkeletonSpec.from_dict(json.load(f))


# =========================================================
# Mouvement
# =========================================================
def rotation_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues : rotation d'angle `angle` autour de l'axe unitaire `axis`."""
    x, y, z = axis
    K = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def forward_kinematics(spec: SkeletonSpec, angles: np.ndarray, root: np.ndarray, yaw: float) -> np.ndarray:
    J = spec.n_joints
    pos = np.zeros((J, 3))
    glob: List[Optional[np.ndarray]] = [None] * J
    for i, j in enumerate(spec.joints):
        if j.parent is None:
            glob[i] = rotation_matrix(np.array([0.0, 0.0, 1.0]), yaw)
            pos[i] = root
        else:
            glob[i] = glob[j.parent] @ rotation_matrix(j.axis, angles[i])
            pos[i] = pos[j.parent] + glob[i] @ j.offset
    return pos


@dataclass
class MotionParams:
    amplitude: np.ndarray
    omega: np.ndarray
    phase: np.ndarray
    drift_omega: np.ndarray
    drift_phase: np.ndarray
    yaw_omega: float
    yaw_phase: float


def sample_motion_params(spec: SkeletonSpec, rng: np.random.Generator) -> MotionParams:
    J = spec.n_joints
    periods = rng.uniform(*PERIOD_RANGE, size=J)
    return MotionParams(
        amplitude=np.array([j.amplitude for j in spec.joints]) * rng.uniform(0.5, 1.0, size=J),
        omega=2.0 * np.pi / periods,
        phase=rng.uniform(0.0, 2.0 * np.pi, size=J),
        drift_omega=2.0 * np.pi / rng.uniform(*PERIOD_RANGE, size=2),
        drift_phase=rng.uniform(0.0, 2.0 * np.pi, size=2),
        yaw_omega=float(2.0 * np.pi / rng.uniform(*PERIOD_RANGE)),
        yaw_phase=float(rng.uniform(0.0, 2.0 * np.pi)),
    )


def _trajectory(spec: SkeletonSpec, params: MotionParams, T: int, scale: float, root_drift: float) -> np.ndarray:
    # θ(t) = A(sin(ωt + φ) − sin φ) : pose de repos à t = 0
    t = np.arange(T, dtype=np.float64)[:, None]
    angles = scale * params.amplitude * (np.sin(params.omega * t + params.phase) - np.sin(params.phase))
    drift = scale * root_drift * (np.sin(params.drift_omega * t + params.drift_phase) - np.sin(params.drift_phase))
    yaw = scale * spec.yaw_amplitude * (np.sin(params.yaw_omega * t[:, 0] + params.yaw_phase)
                                         - np.sin(params.yaw_phase))
    out = np.empty((T, spec.n_joints, 3))
    for k in range(T):
        root = spec.root_rest + np.array([drift[k, 0], drift[k, 1], 0.0])
        out[k] = forward_kinematics(spec, angles[k], root, yaw[k])
    return out


def generate_motion(spec: SkeletonSpec, T: int, seed: int, amplitude: float = 1.0,
                    root_drift: float = 300.0, volume_size: float = 7500.0,
                    center: Sequence[float] = (0.0, 0.0, 0.0)) -> np.ndarray:
    """-> T×J×3 (mm). Amplitude réduite de 30 % à chaque sortie du cube, 10 essais au plus."""
    if T < 1:
        raise ValidationError("motion_frames", f"T >= 1 requis (reçu {T})")
    rng = np.random.default_rng(seed)
    params = sample_motion_params(spec, rng)
    center = np.asarray(center, dtype=np.float64)
    half = volume_size / 2.0

    scale = float(amplitude)
    for attempt in range(ENVELOPE_RETRIES + 1):
        joints = _trajectory(spec, params, T, scale, root_drift)
        if np.all(np.abs(joints - center) <= half):
            return joints
        if attempt < ENVELOPE_RETRIES:
            logger.warning(f"[WARN] trajectoire hors du volume (essai {attempt + 1}), amplitude ×{AMPLITUDE_DECAY}")
            scale *= AMPLITUDE_DECAY
    raise EnvelopeError(f"Trajectoire hors du cube de {volume_size} mm après {ENVELOPE_RETRIES} réductions")


# =========================================================
# Caméras et rendu
# =========================================================
def ring_cameras(cfg) -> List[CameraModel]:
    cams = []
    for i in range(cfg.views):
        angle = 2.0 * np.pi * i / cfg.views + np.pi / 4.0
        position = (cfg.ring_radius * np.cos(angle), cfg.ring_radius * np.sin(angle), cfg.camera_height)
        cam = look_at_camera(f"cam{i}", position, cfg.look_at, cfg.focal, cfg.image_size, cfg.image_size)
        cams.append(cam.validate())
    return cams


def render_view(cam: CameraModel, joints3d: np.ndarray, cfg, bones: Sequence[Tuple[int, int, float]] = (),
                view_index: int = 0, timestamp: int = 0, seed: int = 0) -> Frame:
    H = W = int(cfg.image_size)
    joints3d = np.asarray(joints3d, dtype=np.float64).reshape(-1, 3)
    if joints3d.shape[0] == 0:
        return Frame(values=np.ones((H, W)), view_index=view_index, timestamp=timestamp)

    uv, w = project_points(cam.P, joints3d)
    visible = in_front(w) & np.all(np.isfinite(uv), axis=1)
    for j in np.flatnonzero(~visible):
        logger.warning(f"[WARN] {cam.name} t={timestamp}: articulation {j} derrière la caméra, omise")

    limbs = np.zeros((H, W), dtype=np.uint8)
    shift = 4
    for parent, child, _ in bones:
        if visible[parent] and visible[child]:
            p1 = tuple(int(round(c * (1 << shift))) for c in uv[parent])
            p2 = tuple(int(round(c * (1 << shift))) for c in uv[child])
            cv2.line(limbs, p1, p2, 255, int(cfg.limb_thickness), cv2.LINE_AA, shift)
    darkness = LIMB_DARKNESS * limbs.astype(np.float64) / 255.0

    rows, cols = np.mgrid[0:H, 0:W].astype(np.float64)
    for u, v in uv[visible]:
        blob = BLOB_DARKNESS * np.exp(-((cols - u) ** 2 + (rows - v) ** 2) / (2.0 * cfg.blob_radius ** 2))
        darkness = np.maximum(darkness, blob)

    img = 1.0 - darkness
    if cfg.noise_level > 0:
        rng = np.random.default_rng([seed, view_index, timestamp])
        img = img + cfg.noise_level * rng.standard_normal(img.shape)
    return Frame(values=img, view_index=view_index, timestamp=timestamp)


# =========================================================
# Jeu de données
# =========================================================
def scene_hash(spec: SkeletonSpec, cfg, seed: int, split: str) -> str:
    data = asdict(cfg)
    data.update(motion_seed=seed, split=split, skeleton=spec.name,
                joints=[[j.name, j.parent, j.offset.tolist(), j.axis.tolist(), j.amplitude] for j in spec.joints])
    return canonical_hash(data)


def verify_manifest(out_dir, manifest: Dict) -> List[str]:
    """Fichiers absents ou dont l'empreinte diffère du manifeste."""
    out_dir = Path(out_dir)
    bad = []
    for rel, digest in manifest.get("files", {}).items():
        path = out_dir / rel
        if not path.exists() or file_sha256(path) != digest:
            bad.append(rel)
    return bad


def generate_dataset(spec: SkeletonSpec, cfg, out_dir, seed: Optional[int] = None,
                     split: str = "train", pool=None) -> Dict:
    out_dir = Path(out_dir)
    seed = cfg.motion_seed if seed is None else int(seed)
    digest = scene_hash(spec, cfg, seed, split)

    manifest_path = out_dir / "manifest.json"
    if manifest_path.exists():
        with open(manifest_path, encoding="utf-8") as f:
            existing = json.load(f)
        if existing.get("config_hash") == digest and not verify_manifest(out_dir, existing):
            logger.info(f"[SYNTH] {out_dir}: déjà généré (empreinte {digest[:12]}), rien à faire")
            return existing

    joints = generate_motion(spec, cfg.frames, seed, amplitude=cfg.motion_amplitude,
                             root_drift=cfg.root_drift, volume_size=cfg.volume_size)
    cams = ring_cameras(cfg)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    save_cameras(out_dir / "cameras.json", cams)
    write_jsonl(out_dir / "gt_keypoints.jsonl",
                ({"t": t, "joints": joints[t].tolist()} for t in range(cfg.frames)))

    bones = spec.bones
    items = [(view, t) for view in range(len(cams)) for t in range(cfg.frames)]

    def render(item):
        view, t = item
        frame = render_view(cams[view], joints[t], cfg, bones, view_index=view, timestamp=t, seed=seed)
        rel = f"frames/{FRAME_PATTERN.format(view=view, t=t)}"
        ProcessImage.write(out_dir / rel, frame.values)
        return rel

    rels = pool.map_ordered(render, items) if pool is not None else [render(item) for item in items]

    files = {rel: file_sha256(out_dir / rel) for rel in ["cameras.json", "gt_keypoints.jsonl", *rels]}
    manifest = {
        "split": split,
        "skeleton": spec.name,
        "joint_names": spec.joint_names,
        "bones": [[p, c, length] for p, c, length in bones],
        "n_views": len(cams),
        "n_frames": cfg.frames,
        "image_size": cfg.image_size,
        "motion_seed": seed,
        "config_hash": digest,
        "files": files,
    }
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
    logger.info(f"[SYNTH] {out_dir}: {len(cams)} vues × {cfg.frames} images, graine {seed}")
    return manifest
