"""
Ligne de commande du pipeline de découverte de points clés 3D

    python cli.py synth        --out data/train [--split test]
    python cli.py targets      --dataset data/train
    python cli.py train        --dataset data/train --dataset data/test --run runs/r0 [--resume]
    python cli.py infer        --run runs/r0 --dataset data/test
    python cli.py triangulate  --keypoints2d kp2d.jsonl --cameras cameras.json --out kp3d.jsonl
    python cli.py eval         --pred-train ... --gt-train ... [--pred-test ... --gt-test ...] --out eval/
    python cli.py gradcheck
    python cli.py render-edges --keypoints kp3d.jsonl --cameras cameras.json --t 0 --view 0 --out edges.png

Options communes : --config FICHIER, --threads N, --verbose.
"""
import argparse
import json
import logging
import re
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from config.run_config import RunConfig, load_run_config
from utils.errors import ConfigError, DivergenceError, EnvelopeError, NonFiniteError, ValidationError
from worker_pool import WorkerPool

logger = logging.getLogger("cli")

HEATMAP_NAME = re.compile(r"view(\d+)_t(\d+)\.(mvkd|npy)$")
RESOLVED_CONFIG = "config.json"


def setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        datefmt="%H:%M:%S",
    )


def banner(title: str) -> None:
    print("=" * 70)
    print(title)
    print("=" * 70)


# =========================================================
# Sous-commandes
# =========================================================
def cmd_synth(args, cfg: RunConfig, pool) -> int:
    from synth_scenes import generate_dataset, load_skeleton

    spec = load_skeleton(cfg.scene.skeleton)
    seed = args.seed
    if seed is None:
        seed = cfg.scene.holdout_seed if args.split == "test" else cfg.scene.motion_seed
    out = Path(args.out)
    manifest = generate_dataset(spec, cfg.scene, out, seed=seed, split=args.split, pool=pool)
    cfg.save(out / RESOLVED_CONFIG)
    print(f"Jeu '{manifest['split']}' : {manifest['n_views']} vues × {manifest['n_frames']} images "
          f"({spec.name}, graine {seed}) -> {out}")
    return 0


def _target_spec(cfg: RunConfig):
    from target_cache import TargetSpec

    tr = cfg.train
    return TargetSpec(frame_gap=tr.frame_gap, raster=(tr.edge_raster, tr.edge_raster),
                      normalize=tr.normalize_target)


def cmd_targets(args, cfg: RunConfig, pool) -> int:
    from io_formats import load_sequence
    from target_cache import build_targets

    for path in args.dataset:
        seq = load_sequence(path)
        targets = build_targets(seq, _target_spec(cfg), cfg.runtime.cache_dir, pool)
        print(f"{seq.name}: {len(targets)} cibles (k={cfg.train.frame_gap})")
    return 0


def _training_finished(ckpt_path: Path, cfg: RunConfig) -> bool:
    from trainer import load_checkpoint, train_config_hash

    if not ckpt_path.exists():
        return False
    meta = load_checkpoint(ckpt_path).meta
    if meta.get("config_hash") != train_config_hash(cfg.train):
        return False
    if cfg.train.max_steps is not None and int(meta["step"]) >= cfg.train.max_steps:
        return True
    return int(meta["epoch"]) > cfg.train.epochs


def cmd_train(args, cfg: RunConfig, pool) -> int:
    from io_formats import load_sequence
    from target_cache import build_targets
    from trainer import train

    run_dir = Path(args.run)
    ckpt_path = run_dir / "checkpoint.npz"
    if not args.resume and _training_finished(ckpt_path, cfg):
        print(f"Entraînement déjà terminé pour cette configuration : {ckpt_path}")
        return 0
    if ckpt_path.exists() and not args.resume:
        logger.warning(f"[WARN] {ckpt_path} existe : nouvel entraînement depuis zéro (utiliser --resume pour reprendre)")

    sequences = [load_sequence(path) for path in args.dataset]
    spec = _target_spec(cfg)
    targets = {seq.name: build_targets(seq, spec, cfg.runtime.cache_dir, pool) for seq in sequences}
    digest = cfg.save(run_dir / RESOLVED_CONFIG)

    start = time.time()
    result = train(sequences, targets, cfg.train, run_dir, pool=pool, resume=args.resume)
    print(f"{result.steps} pas en {time.time() - start:.1f}s, perte finale {result.final_loss:.6f}")
    print(f"Point de reprise : {result.checkpoint_path}")
    print(f"Courbe de perte  : {result.log_path}")
    print(f"Configuration    : {run_dir / RESOLVED_CONFIG} ({digest[:12]})")
    return 0


def _heatmap_files(directory: Path) -> Dict[int, Dict[int, Path]]:
    """-> {t: {vue: chemin}}"""
    frames: Dict[int, Dict[int, Path]] = {}
    for path in sorted(directory.iterdir()):
        match = HEATMAP_NAME.match(path.name)
        if match:
            view, t = int(match.group(1)), int(match.group(2))
            frames.setdefault(t, {})[view] = path
    if not frames:
        raise FileNotFoundError(f"Aucune carte view<i>_t<t>.mvkd|.npy dans {directory}")
    return frames


def _infer_from_heatmaps(args, cfg: RunConfig, pool) -> List[Dict]:
    from extractors.voxel_aggregation import Heatmap2D, build_grid, build_sampling_plan, discover_keypoints
    from io_formats import keypoint_record, read_heatmap
    from utils.geometry import load_cameras

    cams = load_cameras(args.cameras or Path(args.dataset) / "cameras.json")
    tr = cfg.train
    grid = build_grid(tr.volume_center, tr.volume_size, tr.volume_resolution)
    frames = _heatmap_files(Path(args.heatmaps))
    plans = None
    records = []
    for t in sorted(frames):
        views = frames[t]
        if sorted(views) != list(range(len(cams))):
            raise ValidationError("heatmap_views", f"t={t}: vues {sorted(views)} pour {len(cams)} caméras")
        heatmaps = [Heatmap2D(read_heatmap(views[v]), view_index=v) for v in range(len(cams))]
        if plans is None:
            shape = heatmaps[0].values.shape[:2]
            plans = [build_sampling_plan(grid, cam, shape, depth_sign=tr.depth_sign) for cam in cams]
        kps = discover_keypoints(grid, cams, heatmaps, tau=tr.softmax_temperature, depth_sign=tr.depth_sign,
                                 plans=plans, pool=pool, timestamp=t)
        records.append(keypoint_record(t, kps.points))
    return records


def _run_config(args, cfg: RunConfig) -> RunConfig:
    """La configuration résolue du run fait foi, sauf --config explicite."""
    if args.run and not args.config:
        resolved = Path(args.run) / RESOLVED_CONFIG
        if resolved.exists():
            return load_run_config(str(resolved), {"runtime.threads": args.threads})
    return cfg


def cmd_infer(args, cfg: RunConfig, pool) -> int:
    from io_formats import keypoint_record, load_sequence, write_jsonl
    from trainer import TrainContext, infer_frame, load_checkpoint

    if args.heatmaps:
        if not args.out:
            raise ValidationError("infer_out", "--out requis avec --heatmaps")
        records = _infer_from_heatmaps(args, cfg, pool)
        write_jsonl(args.out, records)
        print(f"{len(records)} images -> {args.out}")
        return 0

    if not args.dataset:
        raise ValidationError("infer_dataset", "--dataset requis (ou --heatmaps)")
    if not (args.checkpoint or args.run):
        raise ValidationError("infer_checkpoint", "--checkpoint ou --run requis")
    cfg = _run_config(args, cfg)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else Path(args.run) / "checkpoint.npz"
    ckpt = load_checkpoint(ckpt_path)
    seq = load_sequence(args.dataset)
    if seq.name not in ckpt.meta.get("sequences", []):
        raise ValidationError("infer_sequence",
                              f"séquence '{seq.name}' absente du point de reprise {ckpt.meta.get('sequences')}")

    ctx = TrainContext.build(cfg.train, [seq], pool)
    edges = ckpt.params.active_edge_list()
    records = []
    for t in range(seq.n_frames):
        kps = infer_frame(ckpt.params, seq.name, t, ctx, cfg.train, pool)
        records.append(keypoint_record(t, kps.points, edges))
    out = Path(args.out) if args.out else ckpt_path.parent / f"keypoints_{seq.name}.jsonl"
    write_jsonl(out, records)
    print(f"{seq.name}: {len(records)} images, {len(edges)} arêtes actives -> {out}")
    return 0


def cmd_triangulate(args, cfg: RunConfig, pool) -> int:
    from io_formats import load_keypoints2d, write_jsonl
    from utils.geometry import load_cameras
    from utils.triangulation import Observation, reprojection_error, triangulate_points

    cams = load_cameras(args.cameras)
    Ps = [cam.P for cam in cams]
    records = []
    for rec in load_keypoints2d(args.keypoints2d):
        views = rec["views"]
        if len(views) != len(cams):
            raise ValidationError("keypoints2d_views", f"t={rec['t']}: {len(views)} vues pour {len(cams)} caméras")
        results = triangulate_points(Ps, views, pool)
        points, errors = [], []
        for j, res in enumerate(results):
            if res is None:
                points.append(None)
                continue
            points.append([float(v) for v in res.point])
            obs = [Observation(view_index=i, point2d=views[i][j])
                   for i in range(len(views)) if j < len(views[i]) and views[i][j] is not None]
            errors.append(reprojection_error(Ps, res.point, obs))
        records.append({
            "t": int(rec["t"]),
            "keypoints_mm": points,
            "edges": [],
            "reprojection_px": float(np.mean(errors)) if errors else None,
        })
    write_jsonl(args.out, records)
    print(f"{len(records)} images triangulées -> {args.out}")
    return 0


def _joint_names(gt_path) -> Optional[List[str]]:
    manifest = Path(gt_path).parent / "manifest.json"
    if manifest.exists():
        with open(manifest, encoding="utf-8") as f:
            return json.load(f).get("joint_names")
    return None


def cmd_eval(args, cfg: RunConfig, pool) -> int:
    from evaluation import evaluate_files, format_report_table, write_report

    report = evaluate_files(args.pred_train, args.gt_train, args.pred_test, args.gt_test, cfg.eval)
    names = _joint_names(args.gt_test or args.gt_train)
    path = write_report(report, args.out, names)
    cfg.save(Path(args.out) / RESOLVED_CONFIG)
    banner("Évaluation")
    print(format_report_table(report, names))
    print(f"\nRapport : {path}")
    return 0


def cmd_gradcheck(args, cfg: RunConfig, pool) -> int:
    from diff_engine import format_gradcheck_table, run_gradcheck

    start = time.time()
    results = run_gradcheck(samples=args.samples, seed=args.seed, tol=args.tol, ops=args.ops)
    print(format_gradcheck_table(results))
    failed = [r.op for r in results if not r.passed]
    print(f"\n{len(results) - len(failed)}/{len(results)} opérations valides en {time.time() - start:.1f}s")
    if failed:
        print(f"Échecs : {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_render_edges(args, cfg: RunConfig, pool) -> int:
    from extractors.edge_render import EdgeConfig, EdgeWeights, aggregate_edges
    from io_formats import read_jsonl
    from utils.ProcessImage import ProcessImage
    from utils.geometry import load_cameras, project_points
    from utils.normalize import Normalize

    cams = load_cameras(args.cameras)
    if not 0 <= args.view < len(cams):
        raise ValidationError("view_index", f"vue {args.view} hors de [0, {len(cams)})")
    records = [r for r in read_jsonl(args.keypoints) if int(r["t"]) == args.t]
    if not records:
        raise ValidationError("render_frame", f"t={args.t} absent de {args.keypoints}")
    rec = records[0]
    points = np.asarray(rec["keypoints_mm"], dtype=np.float64)
    weights = EdgeWeights(points.shape[0], init=0.0)
    for m, n, w in rec.get("edges", []):
        m, n = sorted((int(m), int(n)))
        idx = np.flatnonzero((weights.pairs[:, 0] == m) & (weights.pairs[:, 1] == n))
        weights.values[idx] = float(w)

    cam = cams[args.view]
    uv, _ = project_points(cam.P, points)
    kps = Normalize.pixel_to_normalized(uv, cam.width, cam.height)
    size = args.size or cfg.train.edge_raster
    sigma = args.sigma or cfg.train.edge_sigma
    edge_map = aggregate_edges(kps, weights, EdgeConfig(sigma=sigma, height=size, width=size),
                               view_index=args.view, timestamp=args.t)
    ProcessImage.write_annotated(args.out, edge_map.values,
                                 {"t": args.t, "view": args.view, "sigma": sigma, "size": size})
    print(f"Carte d'arêtes {size}x{size} (vue {args.view}, t={args.t}) -> {args.out}")
    return 0


# =========================================================
# Analyse des arguments
# =========================================================
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="préréglage ou configuration résolue (JSON)")
    common.add_argument("--threads", type=int, default=None, help="nombre de threads (1 = déterministe)")
    common.add_argument("--verbose", action="store_true", help="journalisation DEBUG")

    parser = argparse.ArgumentParser(prog="cli.py", description="Découverte multi-vue de points clés 3D")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="générer une scène synthétique")
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--skeleton", default=None)
    p.add_argument("--views", type=int, default=None)
    p.add_argument("--frames", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("targets", parents=[common], help="précalculer les cibles de dissimilarité")
    p.add_argument("--dataset", action="append", required=True)
    p.add_argument("--frame-gap", type=int, default=None)
    p.add_argument("--cache-dir", default=None)
    p.set_defaults(func=cmd_targets)

    p = sub.add_parser("train", parents=[common], help="entraîner")
    p.add_argument("--dataset", action="append", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--frame-gap", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--length-weight", type=float, default=None, help="ω_r ; 0 désactive la contrainte de longueur")
    p.add_argument("--separation-weight", type=float, default=None, help="ω_s ; 0 désactive la séparation")
    p.add_argument("--cache-dir", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="points clés 3D par image (image t seule)")
    p.add_argument("--run", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--dataset", default=None)
    p.add_argument("--heatmaps", default=None, help="répertoire de cartes view<i>_t<t>.mvkd|.npy")
    p.add_argument("--cameras", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("triangulate", parents=[common], help="triangulation DLT de points 2D")
    p.add_argument("--keypoints2d", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_triangulate)

    p = sub.add_parser("eval", parents=[common], help="régression + MPJPE/PMPJPE")
    p.add_argument("--pred-train", required=True)
    p.add_argument("--gt-train", required=True)
    p.add_argument("--pred-test", default=None)
    p.add_argument("--gt-test", default=None)
    p.add_argument("--regressor", choices=("linear", "mlp"), default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="vérifier les gradients analytiques")
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--ops", nargs="*", default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("render-edges", parents=[common], help="rendre une carte d'arêtes (PNG/PGM)")
    p.add_argument("--keypoints", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--t", type=int, default=0)
    p.add_argument("--view", type=int, default=0)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render_edges)
    return parser


def overrides_from_args(args) -> Dict:
    """Drapeaux CLI -> clés section.clé (None = absent)."""
    mapping = {
        "threads": "runtime.threads",
        "cache_dir": "runtime.cache_dir",
        "frame_gap": "train.frame_gap",
        "epochs": "train.epochs",
        "max_steps": "train.max_steps",
        "length_weight": "train.length_weight",
        "separation_weight": "train.separation_weight",
        "skeleton": "scene.skeleton",
        "views": "scene.views",
        "frames": "scene.frames",
        "regressor": "eval.regressor",
    }
    overrides = {key: getattr(args, name) for name, key in mapping.items() if hasattr(args, name)}
    if args.command == "train" and args.seed is not None:
        overrides["train.seed"] = args.seed
    return overrides


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)

    try:
        cfg = load_run_config(args.config, overrides_from_args(args))
        pool = WorkerPool.configure(cfg.runtime.threads)
        return args.func(args, cfg, pool)
    except FileNotFoundError as e:
        print(f"Erreur : fichier introuvable ({e})", file=sys.stderr)
        return 2
    except (ValidationError, ConfigError, EnvelopeError) as e:
        print(f"Erreur : {e}", file=sys.stderr)
        return 2
    except (DivergenceError, NonFiniteError) as e:
        print(f"Erreur numérique : {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print(f"Erreur : {e}", file=sys.stderr)
        return 2
    finally:
        WorkerPool.shutdown()


if __name__ == "__main__":
    sys.exit(main())
