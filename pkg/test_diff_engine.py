"""
Tests du moteur de gradients : bande, Adam et vérification par différences finies.
"""
import sys
import time

import numpy as np
import pytest

from diff_engine import Adam, Tape, format_gradcheck_table, run_gradcheck
from utils.errors import NonFiniteError, ValidationError
from utils.script_runner import collect, run_tests


def test_gradcheck_all_operations_pass():
    start = time.time()
    results = run_gradcheck(samples=100, seed=0)
    elapsed = time.time() - start
    failed = [(r.op, r.max_rel_error) for r in results if not r.passed]
    assert not failed, failed
    assert all(r.samples == 100 for r in results)
    assert {r.op for r in results} >= {"softmax2d", "unproject", "aggregate", "project", "max_aggregation",
                                       "edge_weights", "length", "separation", "volume_chain"}
    assert elapsed < 60.0


def test_gradcheck_subset_and_table():
    results = run_gradcheck(samples=3, seed=1, ops=["softmax2d", "mse"])
    assert [r.op for r in results] == ["softmax2d", "mse"]
    table = format_gradcheck_table(results)
    assert "softmax2d" in table and "mse" in table


def test_gradcheck_unknown_op_rejected():
    with pytest.raises(ValidationError):
        run_gradcheck(samples=1, ops=["nope"])


def test_backward_accumulates_shared_inputs():
    tape = Tape()
    x = tape.leaf(np.array([1.0, 2.0]))
    y = tape.weighted_sum([x, x], [2.0, 3.0])
    root = tape.inner(y, np.array([1.0, -1.0]))
    tape.backward(root)
    np.testing.assert_allclose(x.grad, [5.0, -5.0])


def test_constants_receive_no_gradient():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    c = tape.constant(np.ones(3))
    root = tape.inner(tape.weighted_sum([x, c], [1.0, 1.0]), np.ones(3))
    tape.backward(root)
    assert c.grad is None
    np.testing.assert_allclose(x.grad, np.ones(3))


def test_non_finite_value_names_operation():
    tape = Tape()
    x = tape.leaf(np.ones(2))
    with pytest.raises(NonFiniteError) as info:
        tape.record("bad_op", np.array([1.0, np.inf]), [x], lambda g: [g])
    assert info.value.op_name == "bad_op"


def test_adam_first_step_moves_by_learning_rate():
    params = {"w": np.array([1.0, -2.0, 0.5])}
    opt = Adam(lr=0.01)
    opt.step(params, {"w": np.array([3.0, -0.2, 1e-2])})
    np.testing.assert_allclose(params["w"], [0.99, -1.99, 0.49], atol=1e-7)


def test_adam_learning_rate_multiplier():
    params = {"a": np.zeros(1), "b": np.zeros(1)}
    Adam(lr=0.01).step(params, {"a": np.ones(1), "b": np.ones(1)}, lr_multipliers={"b": 100.0})
    assert params["a"][0] == pytest.approx(-0.01, rel=1e-6)
    assert params["b"][0] == pytest.approx(-1.0, rel=1e-6)


def test_adam_step_counts_are_per_parameter():
    params = {"a": np.zeros(2), "b": np.zeros(2)}
    opt = Adam()
    opt.step(params, {"a": np.ones(2)})
    opt.step(params, {"a": np.ones(2), "b": np.ones(2)})
    assert opt.t == {"a": 2, "b": 1}


def test_adam_state_roundtrip_continues_identically():
    rng = np.random.default_rng(0)
    grads = [{"w": rng.standard_normal(4)} for _ in range(6)]
    p1 = {"w": np.zeros(4)}
    opt1 = Adam(lr=0.05)
    for g in grads[:3]:
        opt1.step(p1, g)

    p2 = {"w": p1["w"].copy()}
    opt2 = Adam(lr=0.05)
    opt2.load_state_dict({k: np.array(v) for k, v in opt1.state_dict().items()})
    for g in grads[3:]:
        opt1.step(p1, g)
        opt2.step(p2, g)
    np.testing.assert_array_equal(p1["w"], p2["w"])


def test_adam_shape_mismatch_rejected():
    with pytest.raises(ValidationError):
        Adam().step({"w": np.zeros(3)}, {"w": np.zeros(4)})


if __name__ == "__main__":
    sys.exit(run_tests(collect(globals())))
