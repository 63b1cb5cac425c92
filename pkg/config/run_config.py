"""
Configuration d'exécution : entraînement, scène synthétique, évaluation, runtime.

Précédence : drapeaux CLI > fichier de configuration > valeurs par défaut.
La configuration résolue est toujours réécrite avec son empreinte SHA-256.
"""
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

from utils.errors import ConfigError

CONFIG_DIR = Path(__file__).resolve().parent


@dataclass
class TrainConfig:
    n_keypoints: int = 15
    volume_resolution: int = 64
    volume_size: float = 7500.0
    volume_center: List[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    edge_sigma: float = 0.02
    separation_sigma: float = 0.08
    length_weight: float = 0.1
    separation_weight: float = 0.01
    curriculum_epochs: int = 2
    frame_gap: int = 20
    softmax_temperature: float = 1.0
    ema_decay: float = 0.9
    learning_rate: float = 1e-3
    logit_lr_multiplier: float = 10.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 5
    max_steps: Optional[int] = None
    heatmap_size: int = 32
    edge_raster: int = 64
    volume_affine: bool = True
    volume_scale_init: float = 50.0
    normalize_target: bool = True
    depth_sign: float = 1.0
    logit_init_std: float = 0.01
    logit_init_peak: float = 8.0
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 500
    check_finite: bool = True


@dataclass
class SceneConfig:
    skeleton: str = "biped"
    views: int = 4
    image_size: int = 128
    frames: int = 200
    motion_seed: int = 0
    holdout_seed: int = 1
    blob_radius: float = 3.0
    limb_thickness: int = 2
    noise_level: float = 0.0
    volume_size: float = 7500.0
    ring_radius: float = 6000.0
    camera_height: float = 1000.0
    focal: float = 250.0
    look_at: List[float] = field(default_factory=lambda: [0.0, 0.0, 850.0])
    motion_amplitude: float = 1.0
    root_drift: float = 300.0


@dataclass
class EvalConfig:
    regressor: str = "linear"
    per_frame: bool = True
    scale: bool = True
    test_fraction: float = 0.3
    mlp_hidden: int = 50
    mlp_steps: int = 2000
    mlp_learning_rate: float = 1e-3


@dataclass
class RuntimeConfig:
    threads: int = 1
    cache_dir: Optional[str] = None
    verbose: bool = False


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def config_hash(self) -> str:
        from io_formats import canonical_hash
        return canonical_hash(self.to_dict())

    def save(self, path) -> str:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        digest = self.config_hash()
        payload = {"config": self.to_dict(), "config_hash": digest}
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
        return digest


SECTIONS = {
    "train": TrainConfig,
    "scene": SceneConfig,
    "eval": EvalConfig,
    "runtime": RuntimeConfig,
}


def _coerce(section: str, key: str, value, target_default):
    if value is None:
        return None
    if isinstance(target_default, bool):
        if isinstance(value, str):
            return value.strip().lower() in ("1", "true", "yes", "oui", "on")
        return bool(value)
    if isinstance(target_default, int) and not isinstance(target_default, bool):
        try:
            as_float = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{section}.{key}: entier attendu, reçu {value!r}")
        if as_float != int(as_float):
            raise ConfigError(f"{section}.{key}: entier attendu, reçu {value!r}")
        return int(as_float)
    if isinstance(target_default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{section}.{key}: réel attendu, reçu {value!r}")
    if isinstance(target_default, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{section}.{key}: liste attendue, reçu {value!r}")
        return [float(v) for v in value]
    return value


def _apply(section_obj, section: str, values: Dict[str, Any]) -> None:
    defaults = {f.name: getattr(section_obj.__class__(), f.name) for f in fields(section_obj)}
    for key, value in values.items():
        if key not in defaults:
            raise ConfigError(f"clé inconnue '{section}.{key}'")
        default = defaults[key]
        if default is None:
            setattr(section_obj, key, value)
        else:
            setattr(section_obj, key, _coerce(section, key, value, default))


def validate_run_config(cfg: RunConfig) -> RunConfig:
    tr, sc, ev = cfg.train, cfg.scene, cfg.eval
    positive = {
        "train.n_keypoints": tr.n_keypoints,
        "train.volume_size": tr.volume_size,
        "train.edge_sigma": tr.edge_sigma,
        "train.separation_sigma": tr.separation_sigma,
        "train.frame_gap": tr.frame_gap,
        "train.softmax_temperature": tr.softmax_temperature,
        "train.learning_rate": tr.learning_rate,
        "train.heatmap_size": tr.heatmap_size,
        "train.edge_raster": tr.edge_raster,
        "train.epochs": tr.epochs,
        "scene.views": sc.views,
        "scene.image_size": sc.image_size,
        "scene.frames": sc.frames,
        "scene.volume_size": sc.volume_size,
        "scene.focal": sc.focal,
    }
    for key, value in positive.items():
        if not value > 0:
            raise ConfigError(f"{key} doit être > 0 (reçu {value})")
    if tr.n_keypoints < 2:
        raise ConfigError("train.n_keypoints doit être >= 2")
    if tr.volume_resolution < 2:
        raise ConfigError("train.volume_resolution doit être >= 2")
    if tr.curriculum_epochs < 0:
        raise ConfigError("train.curriculum_epochs doit être >= 0")
    if tr.length_weight < 0 or tr.separation_weight < 0:
        raise ConfigError("train.length_weight et train.separation_weight doivent être >= 0")
    if tr.logit_init_peak < 0 or tr.logit_init_std < 0:
        raise ConfigError("train.logit_init_peak et train.logit_init_std doivent être >= 0")
    if not 0 < tr.ema_decay < 1:
        raise ConfigError("train.ema_decay doit être dans ]0, 1[")
    if tr.depth_sign not in (1.0, -1.0):
        raise ConfigError("train.depth_sign doit valoir 1 ou -1")
    if len(tr.volume_center) != 3:
        raise ConfigError("train.volume_center: 3 coordonnées attendues")
    if sc.views < 2:
        raise ConfigError("scene.views doit être >= 2")
    if sc.frames < 2:
        raise ConfigError("scene.frames doit être >= 2")
    if ev.regressor not in ("linear", "mlp"):
        raise ConfigError(f"eval.regressor inconnu: {ev.regressor}")
    if not 0 < ev.test_fraction < 1:
        raise ConfigError("eval.test_fraction doit être dans ]0, 1[")
    return cfg


def load_run_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    overrides : {"train.frame_gap": 20, ...} (drapeaux CLI déjà parsés ; None = absent).
    Un fichier peut être une configuration résolue ({"config": {...}}) ou un préréglage.
    """
    cfg = RunConfig()

    if path:
        path = Path(path)
        if not path.exists() and (CONFIG_DIR / path.name).exists():
            path = CONFIG_DIR / path.name
        if not path.exists():
            raise FileNotFoundError(f"Fichier de configuration introuvable: {path}")
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
        if "config" in data and isinstance(data["config"], dict):
            data = data["config"]
        for section, values in data.items():
            if section.startswith("_"):
                continue
            if section not in SECTIONS:
                raise ConfigError(f"section inconnue '{section}' dans {path}")
            if not isinstance(values, dict):
                raise ConfigError(f"section '{section}': objet attendu")
            _apply(getattr(cfg, section), section, values)

    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        if "." not in dotted:
            raise ConfigError(f"clé de surcharge invalide '{dotted}' (format section.clé)")
        section, key = dotted.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"section inconnue '{section}'")
        _apply(getattr(cfg, section), section, {key: value})

    return validate_run_config(cfg)
