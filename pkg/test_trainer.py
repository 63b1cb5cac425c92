"""
Tests de la boucle d'entraînement sur la scène de fumée (2 vues, 4 images,
grille 8³) : pertes finies, déterminisme, reprise, curriculum, inférence.
"""
import sys
from dataclasses import replace

import numpy as np
import pytest

from config.run_config import load_run_config
from extractors.voxel_aggregation import build_grid
from io_formats import load_sequence
from losses import read_loss_log, separation_loss_vjp
from synth_scenes import generate_dataset, load_skeleton
from target_cache import TargetSpec, build_targets
from trainer import (
    ParamSet,
    TrainContext,
    infer_frame,
    load_checkpoint,
    logits_key,
    sample_anchors,
    train,
    visible_in_all,
)
from utils.errors import ConfigError, DivergenceError
from utils.script_runner import collect, run_tests
from worker_pool import WorkerPool


def smoke_setup(tmp_path):
    cfg = load_run_config("smoke_scene.json")
    generate_dataset(load_skeleton(cfg.scene.skeleton), cfg.scene, tmp_path / "scene")
    seq = load_sequence(tmp_path / "scene")
    tr = cfg.train
    spec = TargetSpec(frame_gap=tr.frame_gap, raster=(tr.edge_raster, tr.edge_raster), normalize=tr.normalize_target)
    targets = {seq.name: build_targets(seq, spec, str(tmp_path / "cache"))}
    return cfg, seq, targets


def assert_same_params(a, b):
    arrays_a, arrays_b = a.arrays(), b.arrays()
    assert sorted(arrays_a) == sorted(arrays_b)
    for name in arrays_a:
        np.testing.assert_array_equal(arrays_a[name], arrays_b[name])


def test_smoke_training_finite(tmp_path):
    cfg, seq, targets = smoke_setup(tmp_path)
    result = train([seq], targets, cfg.train, tmp_path / "run")
    assert result.steps == 2 * 3
    assert np.isfinite(result.final_loss)
    rows = read_loss_log(result.log_path)
    assert len(rows) == 6
    assert all(np.isfinite(r["total"]) for r in rows)
    assert result.checkpoint_path.exists()


def test_training_is_deterministic(tmp_path):
    cfg, seq, targets = smoke_setup(tmp_path)
    a = train([seq], targets, cfg.train, tmp_path / "run_a")
    b = train([seq], targets, cfg.train, tmp_path / "run_b")
    assert_same_params(a.params, b.params)
    assert read_loss_log(a.log_path) == read_loss_log(b.log_path)


def test_resume_matches_uninterrupted_run(tmp_path):
    cfg, seq, targets = smoke_setup(tmp_path)
    full = train([seq], targets, cfg.train, tmp_path / "full")

    partial_cfg = replace(cfg.train, max_steps=4)
    partial = train([seq], targets, partial_cfg, tmp_path / "resumed")
    assert partial.steps == 4
    resumed = train([seq], targets, cfg.train, tmp_path / "resumed", resume=True)

    assert resumed.steps == full.steps
    assert_same_params(full.params, resumed.params)
    np.testing.assert_array_equal(full.length_state.l_avg, resumed.length_state.l_avg)
    assert read_loss_log(full.log_path) == read_loss_log(resumed.log_path)


def test_resume_with_other_config_rejected(tmp_path):
    cfg, seq, targets = smoke_setup(tmp_path)
    train([seq], targets, replace(cfg.train, max_steps=2), tmp_path / "run")
    with pytest.raises(ConfigError):
        train([seq], targets, replace(cfg.train, learning_rate=0.5), tmp_path / "run", resume=True)


def test_curriculum_epoch_logs_recon_only(tmp_path):
    cfg, seq, targets = smoke_setup(tmp_path)
    result = train([seq], targets, cfg.train, tmp_path / "run")
    rows = read_loss_log(result.log_path)
    early = [r for r in rows if r["epoch"] <= cfg.train.curriculum_epochs]
    assert early
    for r in early:
        assert r["total"] == r["L_recon"]


def test_checkpoint_records_sequences(tmp_path):
    cfg, seq, targets = smoke_setup(tmp_path)
    result = train([seq], targets, cfg.train, tmp_path / "run")
    ckpt = load_checkpoint(result.checkpoint_path)
    assert ckpt.meta["sequences"] == [seq.name]
    assert ckpt.meta["step"] == 6
    assert_same_params(ckpt.params, result.params)


def test_non_finite_target_raises_divergence(tmp_path):
    cfg, seq, targets = smoke_setup(tmp_path)
    for key in targets[seq.name]:
        targets[seq.name][key] = np.full_like(targets[seq.name][key], np.nan)
    with pytest.raises(DivergenceError) as info:
        train([seq], targets, cfg.train, tmp_path / "run")
    assert info.value.checkpoint_path.exists()


def test_inferred_points_inside_volume(tmp_path):
    cfg, seq, targets = smoke_setup(tmp_path)
    result = train([seq], targets, cfg.train, tmp_path / "run")
    ctx = TrainContext.build(cfg.train, [seq])
    for t in range(seq.n_frames):
        kps = infer_frame(result.params, seq.name, t, ctx, cfg.train)
        assert kps.points.shape == (cfg.train.n_keypoints, 3)
        assert np.all(ctx.grid.contains(kps.points))
        assert kps.timestamp == t



def test_anchors_separated_and_visible(tmp_path):
    cfg, seq, _ = smoke_setup(tmp_path)
    tr = cfg.train
    grid = build_grid(tr.volume_center, tr.volume_size, tr.volume_resolution)
    min_distance = tr.separation_sigma * tr.volume_size
    anchors = sample_anchors(grid, seq.cameras, tr.n_keypoints, min_distance, np.random.default_rng(0))
    assert anchors.shape == (tr.n_keypoints, 3)
    assert np.all(visible_in_all(anchors, seq.cameras))
    d = np.linalg.norm(anchors[:, None, :] - anchors[None, :, :], axis=2)
    assert d[~np.eye(len(anchors), dtype=bool)].min() >= min_distance


def test_initial_keypoints_are_distinct(tmp_path):
    cfg, seq, _ = smoke_setup(tmp_path)
    tr = cfg.train
    params = ParamSet.initialize(tr, [seq], np.random.default_rng(tr.seed))
    ctx = TrainContext.build(tr, [seq])
    kps = infer_frame(params, seq.name, 0, ctx, tr)
    d = np.linalg.norm(kps.points[:, None, :] - kps.points[None, :, :], axis=2)
    assert d[~np.eye(tr.n_keypoints, dtype=bool)].min() > 1.0
    # points confondus : gradient de séparation nul
    U = (kps.points - ctx.grid.lower) / ctx.grid.side_length
    assert np.abs(separation_loss_vjp(U, tr.separation_sigma)).max() > 0


def test_initial_logits_share_bumps_across_frames(tmp_path):
    cfg, seq, _ = smoke_setup(tmp_path)
    tr = replace(cfg.train, logit_init_std=0.0)
    params = ParamSet.initialize(tr, [seq], np.random.default_rng(0))
    for view in range(seq.n_views):
        first = params.logits[logits_key(seq.name, view, 0)]
        assert first.max() == pytest.approx(tr.logit_init_peak, rel=0.5)
        for t in range(1, seq.n_frames):
            np.testing.assert_array_equal(params.logits[logits_key(seq.name, view, t)], first)


def test_training_with_threads_matches_sequential(tmp_path):
    cfg, seq, targets = smoke_setup(tmp_path)
    single = train([seq], targets, cfg.train, tmp_path / "single")
    pool = WorkerPool.configure(3)
    try:
        threaded = train([seq], targets, cfg.train, tmp_path / "threaded", pool=pool)
    finally:
        WorkerPool.shutdown()
    assert_same_params(single.params, threaded.params)
    assert read_loss_log(single.log_path) == read_loss_log(threaded.log_path)


if __name__ == "__main__":
    sys.exit(run_tests(collect(globals())))
