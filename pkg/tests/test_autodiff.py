from __future__ import annotations

import numpy as np
import pytest

from dans import autodiff as ad
from dans.errors import ContractError, ShapeError


def leaf(values, requires_grad=True):
    return ad.Tensor(values, requires_grad=requires_grad)


def test_matmul_identity():
    eye = leaf(np.eye(2), requires_grad=False)
    m = leaf([[3.0, 4.0], [5.0, 6.0]], requires_grad=False)
    out = ad.matmul(eye, m)
    np.testing.assert_array_equal(out.array, [[3.0, 4.0], [5.0, 6.0]])


def test_sigmoid_at_zero():
    out = ad.sigmoid(leaf([0.0], requires_grad=False))
    np.testing.assert_allclose(out.array, [0.5])


def test_elementwise_mul():
    out = ad.mul(leaf([1.0, 2.0]), leaf([0.5, -1.0]))
    np.testing.assert_allclose(out.array, [0.5, -2.0])


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ShapeError) as exc:
        ad.matmul(leaf(np.ones((2, 3))), leaf(np.ones((2, 3))))
    assert "matmul" in str(exc.value)
    assert "(2, 3)" in str(exc.value)


def test_backward_square_sum():
    x = leaf([3.0])
    with ad.ComputationRecord() as record:
        out = ad.total_sum(ad.mul(x, x))
    ad.backward(out, record)
    np.testing.assert_allclose(x.grad, [6.0], rtol=1e-6)
    # independent central-difference oracle, h = 1e-3
    report = ad.gradient_check(lambda: ad.total_sum(ad.mul(x, x)), x, 1e-3)
    assert report.ok, report


def test_backward_sigmoid_sum():
    x = leaf([0.0])
    with ad.ComputationRecord() as record:
        out = ad.total_sum(ad.sigmoid(x))
    ad.backward(out, record)
    np.testing.assert_allclose(x.grad, [0.25], rtol=1e-6)
    report = ad.gradient_check(lambda: ad.total_sum(ad.sigmoid(x)), x, 1e-3)
    assert report.ok, report


def test_backward_constant_writes_no_grads():
    c = leaf([1.0, 2.0], requires_grad=False)
    with ad.ComputationRecord() as record:
        out = ad.total_sum(c)
    assert not record.entries
    ad.backward(out, record)
    assert c.grad is None


def test_backward_requires_scalar_root():
    x = leaf([1.0, 2.0])
    with ad.ComputationRecord() as record:
        out = ad.mul(x, x)
    with pytest.raises(ContractError):
        ad.backward(out, record)


def test_backward_twice_doubles_gradients():
    x = leaf([1.0, -2.0])
    with ad.ComputationRecord() as record:
        out = ad.total_sum(ad.mul(x, x))
    ad.backward(out, record)
    first = x.grad.copy()
    ad.backward(out, record)
    np.testing.assert_allclose(x.grad, 2.0 * first)


def test_gradient_check_quadratic():
    x = leaf([1.0, 2.0, 3.0])
    report = ad.gradient_check(lambda: ad.total_sum(ad.mul(x, x)), x, 1e-3)
    assert report.ok
    assert report.max_rel_error < 1e-3


def test_gradient_check_relu_linear_region():
    x = leaf([2.0])
    report = ad.gradient_check(lambda: ad.total_sum(ad.relu(x)), x, 1e-3)
    assert report.ok
    x.zero_grad()
    with ad.ComputationRecord() as record:
        out = ad.total_sum(ad.relu(x))
    ad.backward(out, record)
    np.testing.assert_array_equal(x.grad, [1.0])


def test_gradient_check_sum_is_exact():
    x = leaf(np.linspace(-2, 2, 7))
    x.zero_grad()
    with ad.ComputationRecord() as record:
        out = ad.total_sum(x)
    ad.backward(out, record)
    np.testing.assert_array_equal(x.grad, np.ones(7, dtype=np.float32))


def test_gradient_check_skips_relu_kinks():
    x = leaf([0.0])  # exactly on the kink
    report = ad.gradient_check(lambda: ad.total_sum(ad.relu(x)), x, 1e-3)
    assert report.n_skipped_kinks == 1
    assert report.ok


def test_grad_accumulates_across_shared_subexpressions():
    x = leaf([1.0, 1.0])
    y = leaf([2.0, 2.0])
    with ad.ComputationRecord() as record:
        s = ad.add(x, y)
        out = ad.total_sum(ad.add(s, s))
    ad.backward(out, record)
    np.testing.assert_allclose(x.grad, [2.0, 2.0])
    np.testing.assert_allclose(y.grad, [2.0, 2.0])


def test_backward_visits_each_entry_once():
    calls = {"n": 0}
    x = leaf([1.0, 2.0])

    def fused_double(t):
        def bwd(g, needs):
            calls["n"] += 1
            return (2.0 * g,)
        return ad.custom_op("double", [t], 2.0 * t.array, bwd)

    with ad.ComputationRecord() as record:
        d = fused_double(x)
        out = ad.total_sum(ad.add(d, d))  # diamond: d consumed twice
    ad.backward(out, record)
    assert calls["n"] == 1
    np.testing.assert_allclose(x.grad, [4.0, 4.0])


def test_record_is_topologically_ordered():
    x = leaf(np.ones((3, 2)))
    w = leaf(np.ones((2, 2)))
    with ad.ComputationRecord() as record:
        h = ad.relu(ad.matmul(x, w))
        ad.total_sum(ad.mul(h, h))
    seen = set()
    for entry in record.entries:
        for inp in entry.inputs:
            if record.produced(inp):
                assert id(inp) in seen, "input produced by a later entry"
        seen.add(id(entry.output))


def test_forward_is_deterministic():
    rng = np.random.default_rng(7)
    a = leaf(rng.uniform(-2, 2, size=(17, 5)), requires_grad=False)
    b = leaf(rng.uniform(-2, 2, size=(5, 3)), requires_grad=False)
    one = ad.sigmoid(ad.matmul(a, b)).array.tobytes()
    two = ad.sigmoid(ad.matmul(a, b)).array.tobytes()
    assert one == two


def test_no_active_record_means_plain_evaluation():
    x = leaf([1.0, 2.0])
    out = ad.mul(x, x)
    assert not out.requires_grad


def test_frozen_input_gets_no_gradient():
    x = leaf([1.0, 2.0])
    w = leaf([3.0, 4.0], requires_grad=False)
    with ad.ComputationRecord() as record:
        out = ad.total_sum(ad.mul(x, w))
    ad.backward(out, record)
    np.testing.assert_allclose(x.grad, [3.0, 4.0])
    assert w.grad is None


def test_gather_rows_accumulates_duplicates():
    table = leaf(np.arange(12, dtype=np.float32).reshape(4, 3))
    idx = np.array([1, 1, 3])
    with ad.ComputationRecord() as record:
        out = ad.total_sum(ad.gather_rows(table, idx))
    ad.backward(out, record)
    expected = np.zeros((4, 3), dtype=np.float32)
    expected[1] = 2.0
    expected[3] = 1.0
    np.testing.assert_array_equal(table.grad_array, expected)


def test_scatter_add_rows_forward_and_grad():
    base = leaf(np.zeros((3, 2)))
    rows = leaf([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    idx = np.array([0, 2, 0])
    out = ad.scatter_add_rows(base, idx, rows)
    np.testing.assert_array_equal(out.array, [[6.0, 8.0], [0.0, 0.0], [3.0, 4.0]])
    report = ad.gradient_check(
        lambda: ad.sum_squares(ad.scatter_add_rows(base, idx, rows)), [base, rows], 1e-3)
    assert report.ok, report


def test_concat_and_narrow_gradients():
    a = leaf([[1.0, 2.0]])
    b = leaf([[3.0, 4.0], [5.0, 6.0]])
    report = ad.gradient_check(
        lambda: ad.sum_squares(ad.concat([a, b], axis=0)), [a, b], 1e-3)
    assert report.ok, report
    report = ad.gradient_check(
        lambda: ad.sum_squares(ad.narrow(b, 1, 1, 1)), b, 1e-3)
    assert report.ok, report


def test_log_clamps_instead_of_crashing():
    x = leaf([0.0, -1.0, 1.0], requires_grad=False)
    out = ad.log(x)
    assert np.all(np.isfinite(out.array))
    np.testing.assert_allclose(out.array[2], 0.0, atol=1e-7)


OP_CASES = {
    "matmul": lambda ts: ad.matmul(ts[0], ts[1]),
    "add": lambda ts: ad.add(ts[0], ts[1]),
    "sub": lambda ts: ad.sub(ts[0], ts[1]),
    "mul": lambda ts: ad.mul(ts[0], ts[1]),
    "broadcast_add": lambda ts: ad.add(ts[0], ts[2]),
    "scale": lambda ts: ad.scale(ts[0], -1.7),
    "add_const": lambda ts: ad.add_const(ts[0], 0.3),
    "relu": lambda ts: ad.relu(ts[0]),
    "sigmoid": lambda ts: ad.sigmoid(ts[0]),
    "log": lambda ts: ad.log(ad.add_const(ad.sigmoid(ts[0]), 0.05)),
    "cos": lambda ts: ad.cos(ts[0]),
    "sin": lambda ts: ad.sin(ts[0]),
    "gather": lambda ts: ad.gather_rows(ts[0], np.array([0, 2, 2, 1])),
    "row_sum": lambda ts: ad.row_sum(ts[0]),
    "mean": lambda ts: ad.mean(ts[0]),
    "concat": lambda ts: ad.concat([ts[0], ts[1]], axis=1),
    "narrow": lambda ts: ad.narrow(ts[0], 1, 1, 2),
    "sum_squares": lambda ts: ad.sum_squares(ts[0]),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_every_op_matches_finite_differences(name):
    build = OP_CASES[name]
    for seed in range(5):
        rng = np.random.default_rng(1000 + seed)
        a = leaf(rng.uniform(-2, 2, size=(3, 4)))
        b = leaf(rng.uniform(-2, 2, size=(4, 4) if name == "matmul" else (3, 4)))
        row = leaf(rng.uniform(-2, 2, size=(4,)))
        ts = (a, b, row)
        report = ad.gradient_check(lambda: ad.sum_squares(build(ts)), list(ts), 1e-3)
        assert report.ok, (name, seed, report)
