"""
Tests des pertes : longueur (moyenne glissante), séparation, combinaison,
reconstruction, curriculum et journal CSV.
"""
import sys
from types import SimpleNamespace

import numpy as np
import pytest

from extractors.edge_render import EdgeWeights
from losses import (
    LengthState,
    LossLog,
    LossParts,
    combine_edge_prediction,
    edge_lengths,
    length_loss,
    length_loss_vjp,
    objective_weights,
    read_loss_log,
    recon_loss,
    separation_loss,
    separation_loss_vjp,
    total_objective,
    update_length_state,
)
from utils.errors import ValidationError
from utils.script_runner import collect, run_tests


def schedule(curriculum=2, length=0.5, separation=0.1):
    return SimpleNamespace(curriculum_epochs=curriculum, length_weight=length, separation_weight=separation)


def test_length_state_first_observation_initializes():
    state = LengthState(3, beta=0.9)
    update_length_state(state, np.array([10.0, 20.0, 30.0]), np.array([True, False, True]))
    np.testing.assert_allclose(state.l_avg, [10.0, 0.0, 30.0])
    assert state.initialized.tolist() == [True, False, True]


def test_length_state_moving_average():
    state = LengthState(1, beta=0.9)
    update_length_state(state, np.array([10.0]), np.array([True]))
    update_length_state(state, np.array([20.0]), np.array([True]))
    assert state.l_avg[0] == pytest.approx(11.0)
    update_length_state(state, np.array([100.0]), np.array([False]))
    assert state.l_avg[0] == pytest.approx(11.0)


@pytest.mark.parametrize("beta", [0.0, 1.0, -0.2, 1.5])
def test_invalid_ema_decay_rejected(beta):
    with pytest.raises(ValidationError):
        LengthState(2, beta=beta)


def test_length_loss_is_zero_on_first_use():
    kps = np.array([[0.0, 0.0, 0.0], [100.0, 0.0, 0.0], [0.0, 50.0, 0.0]])
    weights = EdgeWeights(3, values=[0.5, 0.5, -1.0])
    state = LengthState(weights.n_pairs)
    assert length_loss(kps, weights, state) == 0.0
    np.testing.assert_allclose(state.l_avg[:2], [100.0, 50.0])


def test_length_loss_counts_active_edges_only():
    kps = np.array([[0.0, 0.0, 0.0], [100.0, 0.0, 0.0], [0.0, 50.0, 0.0]])
    weights = EdgeWeights(3, values=[0.5, 0.5, -1.0])
    state = LengthState(weights.n_pairs)
    state.l_avg[:] = [90.0, 60.0, 0.0]
    state.initialized[:] = True
    assert length_loss(kps, weights, state) == pytest.approx(10.0 + 10.0)


def test_length_loss_vjp_matches_finite_differences():
    rng = np.random.default_rng(0)
    kps = rng.normal(0.0, 100.0, (4, 3))
    weights = EdgeWeights(4, values=[0.3, -0.1, 0.2, 0.4, -0.2, 0.1])
    state = LengthState(weights.n_pairs)
    state.l_avg[:] = edge_lengths(kps, weights.pairs) * 1.3
    state.initialized[:] = True

    analytic = length_loss_vjp(kps, weights, state)
    h = 1e-5
    numeric = np.zeros_like(kps)
    for j in range(4):
        for k in range(3):
            kp, km = kps.copy(), kps.copy()
            kp[j, k] += h
            km[j, k] -= h
            numeric[j, k] = (length_loss(kp, weights, state) - length_loss(km, weights, state)) / (2 * h)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-8)


def test_separation_of_coincident_pair_is_two():
    assert separation_loss(np.array([[0.5, 0.5, 0.5], [0.5, 0.5, 0.5]])) == pytest.approx(2.0)


def test_separation_vanishes_for_distant_points():
    U = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
    assert separation_loss(U, sigma_s=0.08) < 1e-50
    assert separation_loss(U[:1]) == 0.0


def test_separation_vjp_matches_finite_differences():
    rng = np.random.default_rng(1)
    U = rng.uniform(0.3, 0.7, (5, 3))
    analytic = separation_loss_vjp(U, sigma_s=0.1)
    h = 1e-6
    numeric = np.zeros_like(U)
    for j in range(5):
        for k in range(3):
            up, um = U.copy(), U.copy()
            up[j, k] += h
            um[j, k] -= h
            numeric[j, k] = (separation_loss(up, 0.1) - separation_loss(um, 0.1)) / (2 * h)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-8)


def test_separation_invariant_to_translation_and_order():
    rng = np.random.default_rng(2)
    U = rng.uniform(0.3, 0.7, (6, 3))
    reference = separation_loss(U, 0.1)
    assert separation_loss(U + np.array([0.2, -0.15, 0.05]), 0.1) == pytest.approx(reference, rel=1e-12)
    for _ in range(3):
        assert separation_loss(U[rng.permutation(6)], 0.1) == pytest.approx(reference, rel=1e-12)


def test_separation_sigma_must_be_positive():
    with pytest.raises(ValidationError):
        separation_loss(np.zeros((2, 3)), sigma_s=0.0)


def test_combine_is_clipped_pixelwise_max():
    a = np.array([[0.2, 1.4], [0.0, 0.5]])
    b = np.array([[0.3, 0.1], [-0.2, 0.5]])
    np.testing.assert_allclose(combine_edge_prediction(a, b), [[0.3, 1.0], [0.0, 0.5]])
    with pytest.raises(ValidationError):
        combine_edge_prediction(np.zeros((2, 2)), np.zeros((2, 3)))


def test_recon_loss_sums_per_view_means():
    preds = [np.zeros((2, 2)), np.ones((2, 2))]
    targets = [np.full((2, 2), 0.5), np.zeros((2, 2))]
    assert recon_loss(preds, targets) == pytest.approx(0.25 + 1.0)
    with pytest.raises(ValidationError):
        recon_loss(preds, targets[:1])


def test_curriculum_returns_recon_exactly():
    cfg = schedule(curriculum=2)
    parts = LossParts(recon=0.1234567890123, length=57.0, separation=3.0)
    for epoch in (0, 1, 2):
        assert total_objective(epoch, parts, cfg) == parts.recon
        assert objective_weights(epoch, cfg) == (0.0, 0.0)
    assert total_objective(3, parts, cfg) == pytest.approx(0.1234567890123 + 0.5 * 57.0 + 0.1 * 3.0)
    assert objective_weights(3, cfg) == (0.5, 0.1)


def test_loss_log_roundtrip(tmp_path):
    path = tmp_path / "loss_log.csv"
    parts = LossParts(recon=0.1, length=1.0 / 3.0, separation=2e-17)
    with LossLog(path) as log:
        log.write(1, 0, parts, 0.7)
    with LossLog(path, append=True) as log:
        log.write(1, 1, parts, 0.8)
    rows = read_loss_log(path)
    assert [r["step"] for r in rows] == [0, 1]
    assert rows[0]["L_length"] == 1.0 / 3.0
    assert rows[0]["L_sep"] == 2e-17
    assert rows[1]["total"] == 0.8


if __name__ == "__main__":
    tests = [t for t in collect(globals()) if not hasattr(t, "pytestmark")]
    sys.exit(run_tests(tests))
