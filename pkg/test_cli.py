"""
Tests de la ligne de commande : pipeline complet sur la scène de fumée,
aide des sous-commandes et codes de sortie en erreur.
"""
import io
import json
import sys
from contextlib import redirect_stderr, redirect_stdout

import numpy as np
import pytest
from PIL import Image

from cli import build_parser, main, overrides_from_args
from config.run_config import load_run_config
from io_formats import load_gt_keypoints, load_keypoints3d, read_jsonl, write_jsonl
from utils.geometry import load_cameras, project
from utils.script_runner import collect, run_tests
from worker_pool import WorkerPool

SMOKE = ["--config", "smoke_scene.json"]
SUBCOMMANDS = ["synth", "targets", "train", "infer", "triangulate", "eval", "gradcheck", "render-edges"]


def run_cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


def test_full_smoke_pipeline(tmp_path):
    train_dir, test_dir, run = tmp_path / "train", tmp_path / "test", tmp_path / "run"
    assert run_cli("synth", *SMOKE, "--out", train_dir)[0] == 0
    assert run_cli("synth", *SMOKE, "--split", "test", "--out", test_dir)[0] == 0
    assert json.loads((test_dir / "manifest.json").read_text(encoding="utf-8"))["split"] == "test"

    code, _, err = run_cli("train", *SMOKE, "--dataset", train_dir, "--dataset", test_dir,
                           "--run", run, "--cache-dir", tmp_path / "cache")
    assert code == 0, err
    assert (run / "checkpoint.npz").exists()
    assert (run / "loss_log.csv").exists()
    assert (run / "config.json").exists()

    code, out, _ = run_cli("train", *SMOKE, "--dataset", train_dir, "--dataset", test_dir,
                           "--run", run, "--cache-dir", tmp_path / "cache")
    assert code == 0
    assert "déjà terminé" in out

    for split, directory in (("train", train_dir), ("test", test_dir)):
        code, _, err = run_cli("infer", "--run", run, "--dataset", directory)
        assert code == 0, err
        ts, points, _ = load_keypoints3d(run / f"keypoints_{split}.jsonl")
        assert ts.tolist() == [0, 1, 2, 3]
        assert points.shape == (4, 4, 3)
        assert np.all(np.isfinite(points))

    code, out, err = run_cli("eval", *SMOKE,
                             "--pred-train", run / "keypoints_train.jsonl", "--gt-train", train_dir / "gt_keypoints.jsonl",
                             "--pred-test", run / "keypoints_test.jsonl", "--gt-test", test_dir / "gt_keypoints.jsonl",
                             "--out", tmp_path / "eval")
    assert code == 0, err
    report = json.loads((tmp_path / "eval" / "metrics.json").read_text(encoding="utf-8"))
    assert report["n_frames"] == 4
    assert np.isfinite(report["mpjpe_mm"]) and np.isfinite(report["pmpjpe_mm"])
    assert (tmp_path / "eval" / "per_joint.csv").read_text(encoding="utf-8").splitlines()[1].startswith("0,head,")

    code, _, err = run_cli("render-edges", *SMOKE, "--keypoints", run / "keypoints_test.jsonl",
                           "--cameras", test_dir / "cameras.json", "--t", 1, "--view", 1,
                           "--out", tmp_path / "edges.png")
    assert code == 0, err
    assert (tmp_path / "edges.png").exists()
    with Image.open(tmp_path / "edges.png") as img:
        assert img.size == (16, 16)
        assert img.text["t"] == "1" and img.text["view"] == "1"


def test_triangulate_ground_truth_projections(tmp_path):
    assert run_cli("synth", *SMOKE, "--out", tmp_path / "scene")[0] == 0
    cams = load_cameras(tmp_path / "scene" / "cameras.json")
    ts, joints = load_gt_keypoints(tmp_path / "scene" / "gt_keypoints.jsonl")
    records = []
    for t, frame in zip(ts, joints):
        views = [[project(cam.P, X).tolist() for X in frame] for cam in cams]
        views[1][0] = None
        records.append({"t": int(t), "views": views})
    write_jsonl(tmp_path / "kp2d.jsonl", records)

    code, _, err = run_cli("triangulate", "--keypoints2d", tmp_path / "kp2d.jsonl",
                           "--cameras", tmp_path / "scene" / "cameras.json", "--out", tmp_path / "kp3d.jsonl")
    assert code == 0, err
    out = read_jsonl(tmp_path / "kp3d.jsonl")
    assert len(out) == len(ts)
    for rec, frame in zip(out, joints):
        assert rec["keypoints_mm"][0] is None
        np.testing.assert_allclose(rec["keypoints_mm"][1:], frame[1:], atol=1e-5)
        assert rec["reprojection_px"] < 1e-6


def test_gradcheck_subcommand():
    code, out, _ = run_cli("gradcheck", "--samples", 2, "--ops", "softmax2d", "mse")
    assert code == 0
    assert "2/2" in out


@pytest.mark.parametrize("command", SUBCOMMANDS)
def test_every_subcommand_has_help(command):
    with redirect_stdout(io.StringIO()) as out:
        with pytest.raises(SystemExit) as info:
            build_parser().parse_args([command, "--help"])
    assert info.value.code == 0
    assert "--config" in out.getvalue()


def test_train_weight_overrides():
    args = build_parser().parse_args(["train", "--dataset", "d", "--run", "r",
                                      "--length-weight", "0", "--separation-weight", "0.5"])
    overrides = overrides_from_args(args)
    assert overrides["train.length_weight"] == 0.0
    assert overrides["train.separation_weight"] == 0.5
    cfg = load_run_config("preset_synthetic.json", overrides)
    assert cfg.train.length_weight == 0.0
    assert cfg.train.separation_weight == 0.5

    args = build_parser().parse_args(["train", "--dataset", "d", "--run", "r"])
    cfg = load_run_config("preset_synthetic.json", overrides_from_args(args))
    assert cfg.train.length_weight == load_run_config("preset_synthetic.json").train.length_weight


def test_missing_camera_file_exit_code(tmp_path):
    write_jsonl(tmp_path / "kp2d.jsonl", [{"t": 0, "views": [[[1.0, 1.0]], [[2.0, 2.0]]]}])
    missing = tmp_path / "absent_cameras.json"
    code, _, err = run_cli("triangulate", "--keypoints2d", tmp_path / "kp2d.jsonl",
                           "--cameras", missing, "--out", tmp_path / "out.jsonl")
    assert code == 2
    assert str(missing) in err


def test_invalid_config_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"ema_decay": 1.5}}), encoding="utf-8")
    code, _, err = run_cli("gradcheck", "--config", bad, "--samples", 1, "--ops", "mse")
    assert code == 2
    assert "ema_decay" in err


def test_infer_unknown_sequence_rejected(tmp_path):
    assert run_cli("synth", *SMOKE, "--out", tmp_path / "train")[0] == 0
    assert run_cli("synth", *SMOKE, "--split", "test", "--out", tmp_path / "test")[0] == 0
    assert run_cli("train", *SMOKE, "--dataset", tmp_path / "train", "--run", tmp_path / "run",
                   "--max-steps", 1)[0] == 0
    code, _, err = run_cli("infer", "--run", tmp_path / "run", "--dataset", tmp_path / "test")
    assert code == 2
    assert "test" in err


def test_worker_pool_keeps_order():
    pool = WorkerPool.configure(4)
    try:
        assert pool.map_ordered(lambda x: x * x, range(50)) == [x * x for x in range(50)]
        assert WorkerPool.threads() == 4
    finally:
        WorkerPool.shutdown()
    assert WorkerPool.threads() == 1


if __name__ == "__main__":
    tests = [t for t in collect(globals()) if not hasattr(t, "pytestmark")]
    sys.exit(run_tests(tests))
