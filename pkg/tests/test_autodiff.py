"""Tensor container, tape, backward sweep, and gradient checking."""

import numpy as np
import pytest

from faceattr import ops, verify
from faceattr.errors import GraphError, ShapeError
from faceattr.tensor import (ComputeGraph, GradCheckReport, Tensor, backward,
                             grad_check, record_op)


# ---------------------------------------------------------------------------
# Tensor basics


def test_tensor_casts_integers_to_float32():
    t = Tensor(np.arange(6).reshape(2, 3))
    assert t.dtype == np.float32
    assert t.data.tolist() == [[0, 1, 2], [3, 4, 5]]


def test_tensor_keeps_float64():
    t = Tensor(np.ones(3, dtype=np.float64))
    assert t.dtype == np.float64


def test_tensor_explicit_dtype_wins():
    t = Tensor(np.ones(3, dtype=np.float64), dtype=np.float32)
    assert t.dtype == np.float32


def test_tensor_data_is_contiguous():
    base = np.arange(12, dtype=np.float32).reshape(3, 4)
    t = Tensor(base.T)
    assert t.data.flags["C_CONTIGUOUS"]


def test_item_rejects_non_scalar():
    with pytest.raises(ShapeError):
        Tensor(np.zeros(2)).item()


def test_item_returns_python_float():
    v = Tensor(np.asarray(2.5)).item()
    assert isinstance(v, float) and v == 2.5


def test_accumulate_grad_adds():
    t = Tensor(np.zeros(3), requires_grad=True)
    t.accumulate_grad(np.ones(3))
    t.accumulate_grad(np.ones(3))
    assert t.grad.tolist() == [2.0, 2.0, 2.0]
    t.zero_grad()
    assert t.grad is None


# ---------------------------------------------------------------------------
# graph mechanics


def test_no_graph_active_outside_context():
    assert ComputeGraph.current() is None
    with ComputeGraph() as g:
        assert ComputeGraph.current() is g
    assert ComputeGraph.current() is None


def test_nested_graphs_restore_outer():
    with ComputeGraph() as outer:
        with ComputeGraph() as inner:
            assert ComputeGraph.current() is inner
        assert ComputeGraph.current() is outer


def test_graphs_must_exit_in_lifo_order():
    g1 = ComputeGraph()
    g2 = ComputeGraph()
    g1.__enter__()
    g2.__enter__()
    with pytest.raises(GraphError):
        g1.__exit__(None, None, None)
    # unwind so later tests see a clean stack
    g2.__exit__(None, None, None)
    g1.__exit__(None, None, None)


def test_ops_record_only_when_gradients_are_wanted():
    x = Tensor(np.ones((2, 2)))
    with ComputeGraph() as g:
        ops.relu(x)
    assert len(g) == 0
    y = Tensor(np.ones((2, 2)), requires_grad=True)
    with ComputeGraph() as g:
        out = ops.relu(y)
    assert len(g) == 1
    assert out.requires_grad


def test_record_op_marks_output_without_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    out = Tensor(np.ones(2))
    record_op("noop", (x,), out, lambda g, needs: (g,))
    assert out.requires_grad


# ---------------------------------------------------------------------------
# backward sweep


def test_backward_requires_scalar_loss():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with ComputeGraph() as g:
        y = ops.relu(x)
    with pytest.raises(GraphError):
        backward(y, g)


def test_backward_rejects_foreign_loss():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with ComputeGraph() as g:
        ops.relu(x)
    stray = Tensor(np.asarray(1.0))
    with pytest.raises(GraphError):
        backward(stray, g)


def test_backward_twice_doubles_gradients():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True, dtype=np.float64)
    with ComputeGraph() as g:
        loss = ops.tsum(ops.mul(x, x))
    backward(loss, g)
    once = x.grad.copy()
    backward(loss, g)
    assert np.array_equal(x.grad, 2.0 * once)


def test_non_participating_tensor_gets_zero_gradient():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True, dtype=np.float64)
    bystander = Tensor(np.array([5.0, 5.0]), requires_grad=True, dtype=np.float64)
    with ComputeGraph() as g:
        loss = ops.tsum(x)
        ops.mul(bystander, bystander)  # recorded, but not part of the loss
    backward(loss, g)
    assert np.array_equal(x.grad, np.ones(2))
    assert np.array_equal(bystander.grad, np.zeros(2))


def test_inputs_without_requires_grad_stay_ungraded():
    x = Tensor(np.ones(4), requires_grad=True, dtype=np.float64)
    c = Tensor(np.full(4, 3.0), dtype=np.float64)
    with ComputeGraph() as g:
        loss = ops.tsum(ops.mul(x, c))
    backward(loss, g)
    assert np.array_equal(x.grad, np.full(4, 3.0))
    assert c.grad is None


def test_fanout_accumulates_along_both_paths():
    x = Tensor(np.array([2.0]), requires_grad=True, dtype=np.float64)
    with ComputeGraph() as g:
        # loss = x*x + x, so dloss/dx = 2x + 1 = 5
        loss = ops.tsum(ops.add(ops.mul(x, x), x))
    backward(loss, g)
    assert np.allclose(x.grad, [5.0])


# ---------------------------------------------------------------------------
# finite-difference checking


def test_grad_check_insists_on_float64():
    p = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    with pytest.raises(GraphError):
        grad_check(lambda: ops.tsum(p), {"p": p})


def test_grad_check_passes_for_correct_rule():
    rng = np.random.default_rng(3)
    p = Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)
    report = grad_check(lambda: ops.tsum(ops.mul(p, p)), {"p": p})
    assert report.passed
    assert report.max_rel_error < 1e-6


def test_grad_check_catches_broken_rule():
    p = Tensor(np.array([0.7, -0.4, 1.2]), requires_grad=True, dtype=np.float64)

    def wrong_square(t):
        out = Tensor(t.data * t.data, dtype=t.dtype)
        # claims d(x^2)/dx = x instead of 2x
        return record_op("wrong_square", (t,), out, lambda g, needs: (g * t.data,))

    report = grad_check(lambda: ops.tsum(wrong_square(p)), {"p": p})
    assert not report.passed


def test_grad_check_report_lines_format():
    p = Tensor(np.ones(2), requires_grad=True, dtype=np.float64)
    report = grad_check(lambda: ops.tsum(p), {"weights": p})
    (line,) = report.lines()
    assert line.startswith("param=weights max_rel_err=")
    assert line.endswith("status=ok")


def test_grad_check_leaves_parameters_unchanged():
    p = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True, dtype=np.float64)
    before = p.data.copy()
    grad_check(lambda: ops.tsum(ops.mul(p, p)), {"p": p})
    assert np.array_equal(p.data, before)


# ---------------------------------------------------------------------------
# the verification battery


def test_battery_covers_every_case_and_passes():
    results = verify.run_battery()
    assert {name for name, _ in results} == set(verify.CASES)
    for name, report in results:
        assert report.passed, f"{name}: {report.lines()}"


def test_battery_subset_selection():
    results = verify.run_battery(names=["relu", "matmul"])
    assert [name for name, _ in results] == ["relu", "matmul"]


def test_battery_unknown_case_raises():
    with pytest.raises(KeyError):
        verify.run_battery(names=["relu", "no_such_case"])


def test_injected_fault_is_caught():
    results = verify.run_battery(names=["relu"], inject_fault=True)
    by_name = dict(results)
    assert by_name["relu"].passed
    assert not by_name[verify.FAULT_CASE].passed


def test_battery_lines_are_parseable():
    results = verify.run_battery(names=["matmul"])
    lines = verify.battery_lines(results)
    assert lines[0].startswith("case=matmul status=ok max_rel_err=")
    verbose = verify.battery_lines(results, verbose=True)
    assert len(verbose) > len(lines)
