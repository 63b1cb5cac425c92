"""
Entraînement de la découverte de points clés 3D

Paramètres (ParamSet) :
- une table de logits H_hm×W_hm×J par (séquence, vue, image) -> carte de chaleur
  par softmax spatial 2D ;
- les poids d'arêtes w_mn partagés ;
- l'affine par canal sur le volume agrégé (optionnelle).

Un pas = une paire d'images (t, t+k) dans toutes les vues :
logits -> cartes -> volumes -> agrégation -> points 3D -> projection -> cartes
d'arêtes -> prédiction combinée -> MSE contre la cible de dissimilarité.
"""
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from diff_engine import Adam, Tape, Var
from extractors.edge_render import EdgeConfig, EdgeWeights, active_edges
from extractors.voxel_aggregation import (
    Heatmap2D,
    Keypoints3D,
    SamplingPlan,
    VolumeAffine,
    VoxelGrid,
    build_grid,
    build_sampling_plan,
    discover_keypoints,
    heatmap_from_logits,
)
from io_formats import SequenceInfo, canonical_hash
from losses import (
    FeatureTransform,
    LengthState,
    LossLog,
    LossParts,
    edge_lengths,
    objective_weights,
    read_loss_log,
    total_objective,
    update_length_state,
)
from utils.errors import ConfigError, DivergenceError, NonFiniteError, ValidationError
from utils.geometry import CameraModel, in_front, project_points
from utils.normalize import Normalize

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
# champs sans effet sur la trajectoire d'optimisation
_RUN_LENGTH_FIELDS = ("epochs", "max_steps", "log_every", "checkpoint_every")


def train_config_hash(cfg) -> str:
    data = {k: v for k, v in asdict(cfg).items() if k not in _RUN_LENGTH_FIELDS}
    return canonical_hash(data)


def logits_key(seq_name: str, view: int, t: int) -> str:
    return f"logits/{seq_name}/{view}/{t}"


# =========================================================
# Initialisation : ancres 3D distinctes par point clé
# =========================================================
ANCHOR_CANDIDATES = 4096
ANCHOR_MARGIN = 0.1


def visible_in_all(points: np.ndarray, cameras, depth_sign: float = 1.0,
                   margin: float = ANCHOR_MARGIN) -> np.ndarray:
    """Masque des points projetés dans toutes les images, hors d'une marge relative."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    mask = np.ones(points.shape[0], dtype=bool)
    for cam in cameras:
        uv, w = project_points(cam.P, points)
        finite = np.all(np.isfinite(uv), axis=1)
        uv = np.where(finite[:, None], uv, -np.inf)
        mu, mv = margin * cam.width, margin * cam.height
        mask &= in_front(w, depth_sign) & finite
        mask &= (uv[:, 0] >= mu - 0.5) & (uv[:, 0] <= cam.width - 0.5 - mu)
        mask &= (uv[:, 1] >= mv - 0.5) & (uv[:, 1] <= cam.height - 0.5 - mv)
    return mask


def sample_anchors(grid: VoxelGrid, cameras, n: int, min_distance: float, rng: np.random.Generator,
                   depth_sign: float = 1.0) -> np.ndarray:
    """
    n points (mm) tirés dans la moitié centrale de la grille et vus par toutes
    les caméras. Acceptation séquentielle à min_distance ; s'il en manque, on
    complète par le point le plus éloigné des ancres déjà prises.
    """
    candidates = grid.center + rng.uniform(-0.25, 0.25, (ANCHOR_CANDIDATES, 3)) * grid.side_length
    visible = candidates[visible_in_all(candidates, cameras, depth_sign)]
    if visible.shape[0] < n:
        logger.warning(f"[INIT] {visible.shape[0]} ancres visibles dans toutes les vues pour {n} points clés")
        visible = candidates

    anchors: List[np.ndarray] = []
    for p in visible:
        if all(np.linalg.norm(p - a) >= min_distance for a in anchors):
            anchors.append(p)
            if len(anchors) == n:
                break
    if len(anchors) < n:
        logger.warning(f"[INIT] {len(anchors)}/{n} ancres à {min_distance:.0f} mm, complément par éloignement")
    while len(anchors) < n:
        taken = np.array(anchors)
        nearest = np.min(np.linalg.norm(visible[:, None, :] - taken[None, :, :], axis=2), axis=1)
        anchors.append(visible[int(np.argmax(nearest))])
    return np.array(anchors)


def anchor_logits(cam: CameraModel, anchors: np.ndarray, size: int, peak: float) -> np.ndarray:
    """Bosse gaussienne de hauteur peak sur la projection de chaque ancre -> logits size×size×J."""
    uv, _ = project_points(cam.P, anchors)
    uv = np.nan_to_num(uv)
    hm = Normalize.normalized_to_pixel(Normalize.pixel_to_normalized(uv, cam.width, cam.height), size, size)
    width = max(1.0, size / 16.0)
    ax = np.arange(size, dtype=np.float64)
    dx = ax[None, :, None] - hm[None, None, :, 0]
    dy = ax[:, None, None] - hm[None, None, :, 1]
    return peak * np.exp(-(dx * dx + dy * dy) / (2.0 * width ** 2))


# =========================================================
# Paramètres
# =========================================================
class ParamSet:
    def __init__(self, logits: Dict[str, np.ndarray], edge_weights: EdgeWeights,
                 affine: Optional[VolumeAffine] = None):
        self.logits = logits
        self.edge_weights = edge_weights
        self.affine = affine

    @classmethod
    def initialize(cls, cfg, sequences: Sequence[SequenceInfo], rng: np.random.Generator) -> "ParamSet":
        """
        Logits = bruit N(0, logit_init_std), plus une bosse par point clé sur la
        projection d'une ancre 3D propre à ce point (logit_init_peak > 0).
        Les ancres sont communes à toutes les séquences et distantes d'au moins
        σ_s·L : les points clés ne démarrent pas tous au centre de la grille.
        """
        size = cfg.heatmap_size
        bumps: Dict[Tuple[str, int], np.ndarray] = {}
        if cfg.logit_init_peak > 0 and sequences:
            grid = build_grid(cfg.volume_center, cfg.volume_size, cfg.volume_resolution)
            all_cams = [cam for seq in sequences for cam in seq.cameras]
            anchors = sample_anchors(grid, all_cams, cfg.n_keypoints,
                                     cfg.separation_sigma * cfg.volume_size, rng, depth_sign=cfg.depth_sign)
            for seq in sequences:
                for view, cam in enumerate(seq.cameras):
                    bumps[(seq.name, view)] = anchor_logits(cam, anchors, size, cfg.logit_init_peak)
            logger.info(f"[INIT] {len(anchors)} ancres, pic {cfg.logit_init_peak:g}")
        logits = {}
        for seq in sequences:
            for view in range(seq.n_views):
                base = bumps.get((seq.name, view))
                for t in range(seq.n_frames):
                    noise = rng.normal(0.0, cfg.logit_init_std, (size, size, cfg.n_keypoints))
                    logits[logits_key(seq.name, view, t)] = noise if base is None else base + noise
        affine = VolumeAffine.identity(cfg.n_keypoints, cfg.volume_scale_init) if cfg.volume_affine else None
        return cls(logits, EdgeWeights(cfg.n_keypoints), affine)

    def arrays(self) -> Dict[str, np.ndarray]:
        """Vue nommée sur les tableaux (mêmes objets : l'optimiseur écrit en place)."""
        out = dict(self.logits)
        out["edge_weights"] = self.edge_weights.values
        if self.affine is not None:
            out["affine_scale"] = self.affine.scale
            out["affine_bias"] = self.affine.bias
        return out

    def lr_multipliers(self, cfg) -> Dict[str, float]:
        return {name: cfg.logit_lr_multiplier for name in self.logits}

    def heatmap(self, seq_name: str, view: int, t: int) -> np.ndarray:
        key = logits_key(seq_name, view, t)
        if key not in self.logits:
            raise ValidationError("logits_missing", f"aucune table de logits pour {key}")
        return heatmap_from_logits(self.logits[key])

    def active_edge_list(self) -> List[Tuple[int, int, float]]:
        w = self.edge_weights
        return [(m, n, float(w.get(m, n))) for m, n in active_edges(w)]


# =========================================================
# Contexte géométrique
# =========================================================
@dataclass(eq=False)
class TrainContext:
    grid: VoxelGrid
    plans: Dict[str, List[SamplingPlan]]
    cameras: Dict[str, list]
    edge_cfg: EdgeConfig

    @classmethod
    def build(cls, cfg, sequences: Sequence[SequenceInfo], pool=None) -> "TrainContext":
        grid = build_grid(cfg.volume_center, cfg.volume_size, cfg.volume_resolution)
        shape = (cfg.heatmap_size, cfg.heatmap_size)
        plans, cameras = {}, {}
        for seq in sequences:
            def plan_for(cam):
                return build_sampling_plan(grid, cam, shape, depth_sign=cfg.depth_sign)
            cams = seq.cameras
            plans[seq.name] = pool.map_ordered(plan_for, cams) if pool is not None else [plan_for(c) for c in cams]
            cameras[seq.name] = cams
            for cam, plan in zip(cams, plans[seq.name]):
                if not np.any(plan.valid):
                    logger.warning(f"[WARN] caméra {cam.name}: aucun voxel visible dans le volume")
        edge_cfg = EdgeConfig(sigma=cfg.edge_sigma, height=cfg.edge_raster, width=cfg.edge_raster)
        return cls(grid=grid, plans=plans, cameras=cameras, edge_cfg=edge_cfg)


@dataclass(eq=False)
class Batch:
    seq_name: str
    t: int
    tk: int
    targets: List[np.ndarray]


@dataclass(eq=False)
class ForwardResult:
    loss: Var
    total: float
    parts: LossParts
    tape: Tape
    leaves: Dict[str, Var]
    points: Tuple[np.ndarray, np.ndarray]


# =========================================================
# Passe avant / arrière
# =========================================================
def _frame_points(tape: Tape, params: ParamSet, ctx: TrainContext, leaves: Dict[str, Var],
                  seq_name: str, t: int, cfg, pool=None) -> Var:
    plans = ctx.plans[seq_name]

    def view_volume(view: int):
        sub = Tape(check_finite=tape.check_finite)
        key = logits_key(seq_name, view, t)
        leaf = sub.leaf(params.logits[key], name=key)
        vol = sub.unproject(plans[view], sub.softmax2d(leaf))
        return sub, key, leaf, vol

    views = range(len(plans))
    outputs = pool.map_ordered(view_volume, views) if pool is not None else [view_volume(v) for v in views]
    volumes = []
    for sub, key, leaf, vol in outputs:
        tape.extend(sub)
        leaves[key] = leaf
        volumes.append(vol)

    agg = tape.aggregate(volumes)
    if params.affine is not None:
        agg = tape.affine(agg, leaves["affine_scale"], leaves["affine_bias"])
    return tape.spatial_softmax(agg, ctx.grid.flat_coords, cfg.softmax_temperature)


def forward(params: ParamSet, batch: Batch, ctx: TrainContext, cfg, epoch: int,
            length_state: LengthState, pool=None,
            feature_transform: Optional[FeatureTransform] = None) -> ForwardResult:
    tape = Tape(check_finite=cfg.check_finite)
    leaves: Dict[str, Var] = {"edge_weights": tape.leaf(params.edge_weights.values, name="edge_weights")}
    if params.affine is not None:
        leaves["affine_scale"] = tape.leaf(params.affine.scale, name="affine_scale")
        leaves["affine_bias"] = tape.leaf(params.affine.bias, name="affine_bias")

    X_t = _frame_points(tape, params, ctx, leaves, batch.seq_name, batch.t, cfg, pool)
    X_tk = _frame_points(tape, params, ctx, leaves, batch.seq_name, batch.tk, cfg, pool)

    cams = ctx.cameras[batch.seq_name]
    if len(batch.targets) != len(cams):
        raise ValidationError("recon_views", f"{len(batch.targets)} cibles pour {len(cams)} vues")

    def view_recon(view: int):
        sub = Tape(check_finite=tape.check_finite)
        e_t = sub.edges(sub.project(X_t, cams[view]), leaves["edge_weights"], ctx.edge_cfg)
        e_tk = sub.edges(sub.project(X_tk, cams[view]), leaves["edge_weights"], ctx.edge_cfg)
        pred = sub.combine(e_t, e_tk)
        return sub, sub.mse(pred, batch.targets[view], feature_transform)

    views = range(len(cams))
    outputs = pool.map_ordered(view_recon, views) if pool is not None else [view_recon(v) for v in views]
    terms = []
    for sub, term in outputs:
        tape.extend(sub)
        terms.append(term)
    recon = tape.weighted_sum(terms, [1.0] * len(terms))

    lower, side = ctx.grid.lower, ctx.grid.side_length
    ew = params.edge_weights
    length = tape.weighted_sum([tape.length(X_t, ew, length_state), tape.length(X_tk, ew, length_state)],
                               [0.5, 0.5])
    separation = tape.weighted_sum(
        [tape.separation(tape.normalize_volume(X, lower, side), cfg.separation_sigma) for X in (X_t, X_tk)],
        [0.5, 0.5])

    parts = LossParts(recon=recon.item(), length=length.item(), separation=separation.item())
    total = total_objective(epoch, parts, cfg)
    w_len, w_sep = objective_weights(epoch, cfg)
    root = recon if (w_len == 0.0 and w_sep == 0.0) else tape.weighted_sum(
        [recon, length, separation], [1.0, w_len, w_sep])
    return ForwardResult(loss=root, total=total, parts=parts, tape=tape, leaves=leaves,
                         points=(X_t.value, X_tk.value))


def backward(result: ForwardResult) -> Dict[str, np.ndarray]:
    result.tape.backward(result.loss)
    return {name: leaf.grad for name, leaf in result.leaves.items() if leaf.grad is not None}


# =========================================================
# Points de reprise
# =========================================================
def save_checkpoint(path, params: ParamSet, optimizer: Adam, length_state: LengthState,
                    meta: Dict, extra: Optional[Dict[str, np.ndarray]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{name}": value for name, value in params.arrays().items()}
    arrays.update(optimizer.state_dict())
    arrays["length/l_avg"] = length_state.l_avg
    arrays["length/initialized"] = length_state.initialized
    arrays.update(extra or {})
    meta = dict(meta, version=CHECKPOINT_VERSION, n_keypoints=params.edge_weights.n_keypoints,
                has_affine=params.affine is not None, ema_decay=length_state.beta)
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        np.savez(f, **arrays)
    tmp.replace(path)
    return path


@dataclass(eq=False)
class Checkpoint:
    params: ParamSet
    optimizer: Adam
    length_state: LengthState
    meta: Dict
    extra: Dict[str, np.ndarray] = field(default_factory=dict)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Point de reprise introuvable: {path}")
    with np.load(path, allow_pickle=False) as data:
        arrays = {key: data[key] for key in data.files}
    meta = json.loads(str(arrays.pop("meta")))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValidationError("checkpoint_version", f"{path}: version {meta.get('version')}")

    J = int(meta["n_keypoints"])
    logits = {k[len("param/"):]: v.astype(np.float64) for k, v in arrays.items() if k.startswith("param/logits/")}
    weights = EdgeWeights(J, values=arrays["param/edge_weights"])
    affine = None
    if meta.get("has_affine"):
        affine = VolumeAffine(scale=arrays["param/affine_scale"].astype(np.float64),
                              bias=arrays["param/affine_bias"].astype(np.float64))
    params = ParamSet(logits, weights, affine)

    optimizer = Adam()
    optimizer.load_state_dict({k: v for k, v in arrays.items() if k.startswith("adam_")})
    state = LengthState(weights.n_pairs, beta=float(meta.get("ema_decay", 0.9)))
    state.l_avg = arrays["length/l_avg"].astype(np.float64)
    state.initialized = arrays["length/initialized"].astype(bool)
    extra = {k: v for k, v in arrays.items()
             if not k.startswith(("param/", "adam_", "length/"))}
    return Checkpoint(params, optimizer, state, meta, extra)


# =========================================================
# Boucle d'entraînement
# =========================================================
@dataclass(eq=False)
class TrainResult:
    params: ParamSet
    length_state: LengthState
    steps: int
    final_loss: float
    log_path: Path
    checkpoint_path: Path


def training_pairs(sequences: Sequence[SequenceInfo], frame_gap: int) -> List[Tuple[str, int]]:
    pairs = [(seq.name, t) for seq in sequences for t in range(seq.n_frames - frame_gap)]
    if not pairs:
        raise ValidationError("frame_gap", f"k={frame_gap} : aucune paire (t, t+k) disponible")
    return pairs


def train(sequences: Sequence[SequenceInfo], targets: Dict[str, Dict[Tuple[int, int], np.ndarray]],
          cfg, run_dir, pool=None, resume: bool = False,
          feature_transform: Optional[FeatureTransform] = None) -> TrainResult:
    """
    targets : {nom de séquence: {(vue, t): carte}}.
    Déterministe à graine et configuration fixées ; l'état du générateur et
    l'ordre de l'époque en cours font partie du point de reprise.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = run_dir / "checkpoint.npz"
    log_path = run_dir / "loss_log.csv"
    names = [seq.name for seq in sequences]
    if len(set(names)) != len(names):
        raise ValidationError("sequence_names", f"noms de séquence en double: {names}")
    for seq in sequences:
        if seq.n_views < 2:
            raise ValidationError("views_count", f"{seq.name}: au moins 2 vues requises")

    cfg_hash = train_config_hash(cfg)
    pairs = training_pairs(sequences, cfg.frame_gap)
    ctx = TrainContext.build(cfg, sequences, pool)

    if resume and ckpt_path.exists():
        ckpt = load_checkpoint(ckpt_path)
        if ckpt.meta.get("config_hash") != cfg_hash:
            raise ConfigError(f"{ckpt_path}: configuration différente de celle du point de reprise")
        params, optimizer, length_state = ckpt.params, ckpt.optimizer, ckpt.length_state
        rng = np.random.default_rng()
        rng.bit_generator.state = json.loads(ckpt.meta["rng_state"])
        epoch, step, index = int(ckpt.meta["epoch"]), int(ckpt.meta["step"]), int(ckpt.meta["index"])
        saved_order = ckpt.extra["epoch_order"].astype(np.int64)
        order = saved_order if saved_order.size else None
        rows = [r for r in read_loss_log(log_path) if r["step"] <= step] if log_path.exists() else []
        log = LossLog(log_path)
        for r in rows:
            log.write(r["epoch"], r["step"], LossParts(r["L_recon"], r["L_length"], r["L_sep"]), r["total"])
        logger.info(f"[TRAIN] reprise à l'époque {epoch}, pas {step}")
    else:
        rng = np.random.default_rng(cfg.seed)
        params = ParamSet.initialize(cfg, sequences, rng)
        optimizer = Adam(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        length_state = LengthState(params.edge_weights.n_pairs, cfg.ema_decay)
        epoch, step, index = 1, 0, 0
        order = None
        log = LossLog(log_path)

    optimizer.lr, optimizer.beta1, optimizer.beta2, optimizer.eps = (
        cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    lr_mult = params.lr_multipliers(cfg)
    last_total = float("nan")

    def checkpoint(path, idx):
        meta = {"config_hash": cfg_hash, "epoch": epoch, "step": step, "index": idx,
                "rng_state": json.dumps(rng.bit_generator.state), "sequences": names}
        saved = order if order is not None else np.zeros(0, dtype=np.int64)
        return save_checkpoint(path, params, optimizer, length_state, meta, {"epoch_order": saved})

    start = time.time()
    logger.info(f"[TRAIN] {len(pairs)} paires/époque, {cfg.epochs} époques, B={cfg.volume_resolution}, "
                f"J={cfg.n_keypoints}, k={cfg.frame_gap}")
    try:
        while epoch <= cfg.epochs:
            if order is None:
                order = rng.permutation(len(pairs))
                index = 0
            while index < len(order):
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
                seq_name, t = pairs[int(order[index])]
                batch = Batch(seq_name, t, t + cfg.frame_gap,
                              [targets[seq_name][(view, t)] for view in range(len(ctx.cameras[seq_name]))])
                try:
                    result = forward(params, batch, ctx, cfg, epoch, length_state, pool, feature_transform)
                    if not np.isfinite(result.total):
                        raise NonFiniteError("total_objective")
                    grads = backward(result)
                    for name, g in grads.items():
                        if not np.all(np.isfinite(g)):
                            raise NonFiniteError(f"gradient {name}")
                except NonFiniteError as e:
                    diverged = checkpoint(run_dir / "diverged.npz", index)
                    logger.error(f"[TRAIN] divergence au pas {step}: {e}")
                    raise DivergenceError(f"Divergence au pas {step} ({e}); état sauvegardé: {diverged}",
                                          checkpoint_path=diverged) from e

                optimizer.step(params.arrays(), grads, lr_mult)
                X_t, X_tk = result.points
                active = params.edge_weights.active_mask()
                pairs_idx = params.edge_weights.pairs
                lengths = 0.5 * (edge_lengths(X_t, pairs_idx) + edge_lengths(X_tk, pairs_idx))
                update_length_state(length_state, lengths, active)

                step += 1
                index += 1
                last_total = result.total
                log.write(epoch, step, result.parts, result.total)
                if step % cfg.log_every == 0:
                    log.flush()
                    logger.info(f"[TRAIN] époque {epoch} pas {step}: total={result.total:.5f} "
                                f"recon={result.parts.recon:.5f} len={result.parts.length:.2f} "
                                f"sep={result.parts.separation:.4f} ({time.time() - start:.1f}s)")
                if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    checkpoint(ckpt_path, index)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            epoch += 1
            order = None
            index = 0
    finally:
        log.close()

    checkpoint(ckpt_path, index)
    logger.info(f"[TRAIN] terminé : {step} pas en {time.time() - start:.1f}s, "
                f"{len(active_edges(params.edge_weights))} arêtes actives")
    return TrainResult(params=params, length_state=length_state, steps=step, final_loss=last_total,
                       log_path=log_path, checkpoint_path=ckpt_path)


# =========================================================
# Inférence (image t seule)
# =========================================================
def infer_frame(params: ParamSet, seq_name: str, t: int, ctx: TrainContext, cfg, pool=None) -> Keypoints3D:
    cams = ctx.cameras[seq_name]
    heatmaps = [Heatmap2D(params.heatmap(seq_name, view, t), view_index=view) for view in range(len(cams))]
    return discover_keypoints(ctx.grid, cams, heatmaps, tau=cfg.softmax_temperature, affine=params.affine,
                              depth_sign=cfg.depth_sign, plans=ctx.plans[seq_name], pool=pool, timestamp=t)
