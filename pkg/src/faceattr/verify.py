"""Gradient verification battery.

Every differentiable kernel is checked against central finite
differences in float64, from single ops up to a full small network.
The battery also supports deliberate fault injection: a case whose
backward rule is known-wrong, used to prove the harness actually
catches broken gradients rather than passing vacuously.
"""

import numpy as np

from . import ops
from .model import HeadSpec, Model, small_spec
from .optim import (binary_crossentropy, categorical_crossentropy,
                    sigmoid_binary_cross_entropy, softmax_cross_entropy)
from .tensor import Tensor, grad_check, record_op

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-4


def _t(rng, shape, scale=1.0, offset=0.0):
    return Tensor(rng.normal(0.0, scale, size=shape) + offset, requires_grad=True)


def _mask(rng, shape):
    """Fixed random weighting so sums have non-constant gradients."""
    return Tensor(rng.normal(0.0, 1.0, size=shape))


def _onehot(rng, n, k):
    labels = rng.integers(0, k, size=n)
    y = np.zeros((n, k))
    y[np.arange(n), labels] = 1.0
    return Tensor(y)


def _case_matmul(rng):
    a = _t(rng, (3, 4))
    b = _t(rng, (4, 2))
    m = _mask(rng, (3, 2))
    return lambda: ops.tsum(ops.mul(ops.matmul(a, b), m)), {"a": a, "b": b}


def _case_add_channel_bias(rng):
    x = _t(rng, (2, 3, 4, 4))
    b = _t(rng, (3,))
    m = _mask(rng, (2, 3, 4, 4))
    return lambda: ops.tsum(ops.mul(ops.add(x, b), m)), {"x": x, "b": b}


def _case_relu(rng):
    # Keep inputs away from the kink at zero so the finite step never
    # crosses it.
    raw = rng.normal(0.0, 1.0, size=(3, 5))
    raw = np.where(np.abs(raw) < 0.1, 0.1 + np.abs(raw), raw)
    x = Tensor(raw, requires_grad=True)
    m = _mask(rng, (3, 5))
    return lambda: ops.tsum(ops.mul(ops.relu(x), m)), {"x": x}


def _case_relu_broken(rng):
    """Negative control: forward is relu, backward mask is shifted."""
    raw = rng.normal(0.0, 1.0, size=(3, 5))
    raw = np.where(np.abs(raw) < 0.3, 0.3 + np.abs(raw), raw)
    x = Tensor(raw, requires_grad=True)
    m = _mask(rng, (3, 5))

    def broken_relu(t):
        out = Tensor(np.maximum(t.data, 0.0), dtype=t.dtype)
        wrong = (t.data > 0.5).astype(t.data.dtype)

        def bwd(g, needs):
            return (g * wrong if needs[0] else None,)

        return record_op("relu", (t,), out, bwd)

    return lambda: ops.tsum(ops.mul(broken_relu(x), m)), {"x": x}


def _case_sigmoid(rng):
    x = _t(rng, (4, 3), scale=2.0)
    m = _mask(rng, (4, 3))
    return lambda: ops.tsum(ops.mul(ops.sigmoid(x), m)), {"x": x}


def _case_conv_s1p1(rng):
    x = _t(rng, (2, 3, 5, 5))
    w = _t(rng, (4, 3, 3, 3), scale=0.5)
    b = _t(rng, (4,))
    m = _mask(rng, (2, 4, 5, 5))
    fn = lambda: ops.tsum(ops.mul(ops.conv2d(x, w, b, stride=1, pad=1), m))
    return fn, {"x": x, "w": w, "b": b}


def _case_conv_s2p0(rng):
    x = _t(rng, (2, 2, 6, 6))
    w = _t(rng, (3, 2, 3, 3), scale=0.5)
    m = _mask(rng, (2, 3, 2, 2))
    fn = lambda: ops.tsum(ops.mul(ops.conv2d(x, w, stride=2, pad=0), m))
    return fn, {"x": x, "w": w}


def _case_conv_s1p0(rng):
    x = _t(rng, (2, 2, 5, 5))
    w = _t(rng, (3, 2, 3, 3), scale=0.5)
    b = _t(rng, (3,))
    m = _mask(rng, (2, 3, 3, 3))
    fn = lambda: ops.tsum(ops.mul(ops.conv2d(x, w, b, stride=1, pad=0), m))
    return fn, {"x": x, "w": w, "b": b}


def _case_conv_s2p1(rng):
    x = _t(rng, (2, 2, 5, 5))
    w = _t(rng, (3, 2, 3, 3), scale=0.5)
    m = _mask(rng, (2, 3, 3, 3))
    fn = lambda: ops.tsum(ops.mul(ops.conv2d(x, w, stride=2, pad=1), m))
    return fn, {"x": x, "w": w}


def _case_maxpool(rng):
    # Spread the values so no two window entries sit within the finite
    # step of each other; keeps the max selection stable under +/-h.
    vals = rng.permutation(2 * 2 * 6 * 6).astype(np.float64).reshape(2, 2, 6, 6)
    x = Tensor(vals * 0.37, requires_grad=True)
    m = _mask(rng, (2, 2, 3, 3))
    fn = lambda: ops.tsum(ops.mul(ops.maxpool2d(x, kernel=2, stride=2), m))
    return fn, {"x": x}


def _case_batchnorm_train(rng):
    x = _t(rng, (4, 3, 4, 4), scale=1.5)
    gamma = _t(rng, (3,), scale=0.3, offset=1.0)
    beta = _t(rng, (3,), scale=0.3)
    m = _mask(rng, (4, 3, 4, 4))
    state = ops.BatchNormState(3, dtype=np.float64)
    fn = lambda: ops.tsum(ops.mul(
        ops.batchnorm2d(x, gamma, beta, state, mode="train"), m))
    return fn, {"x": x, "gamma": gamma, "beta": beta}


def _case_batchnorm_eval(rng):
    x = _t(rng, (2, 3, 3, 3))
    gamma = _t(rng, (3,), scale=0.3, offset=1.0)
    beta = _t(rng, (3,), scale=0.3)
    m = _mask(rng, (2, 3, 3, 3))
    state = ops.BatchNormState(3, dtype=np.float64)
    state.mean[...] = rng.normal(0.0, 0.5, size=3)
    state.var[...] = rng.uniform(0.5, 2.0, size=3)
    fn = lambda: ops.tsum(ops.mul(
        ops.batchnorm2d(x, gamma, beta, state, mode="eval"), m))
    return fn, {"x": x, "gamma": gamma, "beta": beta}


def _case_avgpool_dense(rng):
    x = _t(rng, (3, 4, 5, 5))
    w = _t(rng, (4, 3), scale=0.5)
    b = _t(rng, (3,))
    y = _onehot(rng, 3, 3)

    def fn():
        h = ops.flatten(ops.global_avgpool(x))
        return softmax_cross_entropy(ops.add(ops.matmul(h, w), b), y)

    return fn, {"x": x, "w": w, "b": b}


def _case_softmax_cce(rng):
    z = _t(rng, (4, 5), scale=2.0)
    y = _onehot(rng, 4, 5)
    fn = lambda: categorical_crossentropy(ops.softmax_rows(z), y)
    return fn, {"z": z}


def _case_fused_softmax(rng):
    z = _t(rng, (4, 5), scale=2.0)
    y = _onehot(rng, 4, 5)
    return lambda: softmax_cross_entropy(z, y), {"z": z}


def _case_sigmoid_bce(rng):
    z = _t(rng, (6, 1), scale=2.0)
    y = Tensor(rng.integers(0, 2, size=(6, 1)).astype(np.float64))
    fn = lambda: binary_crossentropy(ops.sigmoid(z), y)
    return fn, {"z": z}


def _case_fused_sigmoid(rng):
    z = _t(rng, (6, 1), scale=2.0)
    y = Tensor(rng.integers(0, 2, size=(6, 1)).astype(np.float64))
    return lambda: sigmoid_binary_cross_entropy(z, y), {"z": z}


def _case_tiny_model(rng):
    spec = small_spec(HeadSpec("softmax", 3), stem_channels=4,
                      stage_blocks=(1,), stage_channels=(4,),
                      in_channels=2, image_size=6, stem_pool=False)
    model = Model.build(spec, seed=int(rng.integers(1 << 30)), dtype=np.float64)
    x = Tensor(rng.normal(0.0, 1.0, size=(2, 2, 6, 6)))
    y = _onehot(rng, 2, 3)
    fn = lambda: softmax_cross_entropy(model.forward_logits(x, mode="train"), y)
    return fn, dict(model.params)


CASES = {
    "matmul": _case_matmul,
    "add_channel_bias": _case_add_channel_bias,
    "relu": _case_relu,
    "sigmoid": _case_sigmoid,
    "conv2d_s1p1": _case_conv_s1p1,
    "conv2d_s1p0": _case_conv_s1p0,
    "conv2d_s2p0": _case_conv_s2p0,
    "conv2d_s2p1": _case_conv_s2p1,
    "maxpool2x2": _case_maxpool,
    "batchnorm_train": _case_batchnorm_train,
    "batchnorm_eval": _case_batchnorm_eval,
    "avgpool_dense": _case_avgpool_dense,
    "softmax_crossentropy": _case_softmax_cce,
    "fused_softmax_ce": _case_fused_softmax,
    "sigmoid_bce": _case_sigmoid_bce,
    "fused_sigmoid_bce": _case_fused_sigmoid,
    "tiny_residual_net": _case_tiny_model,
}

FAULT_CASE = "relu_broken_backward"


def run_battery(names=None, seed=0, h=DEFAULT_H, tol=DEFAULT_TOL, inject_fault=False):
    """Run gradient checks; returns a list of (case_name, GradCheckReport).

    ``inject_fault`` appends a case with a deliberately wrong backward
    rule, which must come back failed for the battery to be trusted.
    """
    selected = dict(CASES) if names is None else {n: CASES[n] for n in names}
    if inject_fault:
        selected[FAULT_CASE] = _case_relu_broken
    results = []
    for name, builder in selected.items():
        rng = np.random.default_rng(seed)
        fn, params = builder(rng)
        results.append((name, grad_check(fn, params, h=h, tol=tol)))
    return results


def battery_lines(results, verbose=False):
    """Flatten battery results into printable key=value lines."""
    lines = []
    for name, report in results:
        status = "ok" if report.passed else "FAIL"
        lines.append(f"case={name} status={status} max_rel_err={report.max_rel_error:.3e}")
        if verbose or not report.passed:
            lines.extend("  " + ln for ln in report.lines())
    return lines
