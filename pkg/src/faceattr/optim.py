"""Adam optimizer, crossentropy losses, and accuracy metrics.

Loss functions come in two flavors: probability-space versions used for
reporting (inputs already through softmax/sigmoid, log arguments clamped
to [1e-7, 1 - 1e-7]) and fused logit-space versions used by the training
loop, whose backward rules are the well-conditioned (p - y) / N forms.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (ContractError, LabelError, MetricError, PoisonedStepError,
                     ShapeError)
from .tensor import Tensor, record_op

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class AdamConfig:
    """Adam hyperparameters; defaults are the standard configuration."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ContractError(f"lr must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ContractError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0:
            raise ContractError(f"eps must be positive, got {self.eps}")

    def to_dict(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class AdamState:
    """First/second moment buffers mirroring a parameter mapping."""

    def __init__(self, params):
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.t = 0


def adam_step(params, grads, state, cfg):
    """One bias-corrected Adam update, in place on the parameter data.

    ``grads`` maps every parameter name to its gradient array; pass None
    to read each tensor's accumulated ``.grad``.  A non-finite gradient
    aborts the step before any buffer is touched.
    """
    if grads is None:
        grads = {}
        for name, p in params.items():
            if p.grad is None:
                raise ContractError(f"parameter {name} has no gradient")
            grads[name] = p.grad
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise ContractError(f"gradient missing for parameter {name}")
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {name} {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise PoisonedStepError(f"non-finite gradient for parameter {name}; step aborted")

    state.t += 1
    t = state.t
    b1, b2 = cfg.beta1, cfg.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        p.data -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


def _check_onehot(onehot):
    data = onehot.data
    if data.ndim != 2:
        raise ShapeError(f"one-hot labels must be rank-2, got shape {onehot.shape}")
    valid = np.all((data == 0) | (data == 1), axis=1) & (data.sum(axis=1) == 1)
    if not np.all(valid):
        row = int(np.argmin(valid))
        raise LabelError(f"row {row} is not a valid one-hot vector: {data[row].tolist()}")


def categorical_crossentropy(probs, onehot):
    """Mean negative log-probability of the true class.

    Operates on probabilities (rows must sum to 1); gradient flows with
    respect to the probabilities.  Training prefers the fused
    :func:`softmax_cross_entropy` on logits.
    """
    if probs.shape != onehot.shape:
        raise ShapeError(f"probs {probs.shape} and labels {onehot.shape} disagree")
    _check_onehot(onehot)
    sums = probs.data.sum(axis=1)
    if not np.all(np.abs(sums - 1.0) < 1e-3):
        row = int(np.argmax(np.abs(sums - 1.0)))
        raise ContractError(f"probability row {row} sums to {sums[row]:.6f}, expected 1")
    n = probs.shape[0]
    clamped = np.clip(probs.data, PROB_CLAMP, 1.0 - PROB_CLAMP)
    mask = onehot.data
    loss = -(mask * np.log(clamped)).sum() / n
    out = Tensor(np.asarray(loss, dtype=probs.dtype))

    def bwd(g, needs):
        dp = (-(mask / clamped) / n * g.reshape(())) if needs[0] else None
        return dp, None

    return record_op("categorical_crossentropy", (probs, onehot), out, bwd)


def binary_crossentropy(prob, label):
    """Mean binary crossentropy on probabilities in (0, 1)."""
    if prob.shape != label.shape:
        raise ShapeError(f"probs {prob.shape} and labels {label.shape} disagree")
    y = label.data
    if not np.all((y == 0) | (y == 1)):
        bad = np.argwhere((y != 0) & (y != 1))[0]
        raise LabelError(f"label at {tuple(int(i) for i in bad)} is {y[tuple(bad)]}, expected 0 or 1")
    n = prob.data.size
    p = np.clip(prob.data, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = -(y * np.log(p) + (1.0 - y) * np.log1p(-p)).sum() / n
    out = Tensor(np.asarray(loss, dtype=prob.dtype))

    def bwd(g, needs):
        dp = ((p - y) / (p * (1.0 - p)) / n * g.reshape(())) if needs[0] else None
        return dp, None

    return record_op("binary_crossentropy", (prob, label), out, bwd)


def softmax_cross_entropy(logits, onehot):
    """Fused softmax + categorical crossentropy on logits.

    Forward uses log-sum-exp with max subtraction; backward is
    (softmax(logits) - onehot) / N.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be rank-2, got shape {logits.shape}")
    if logits.shape != onehot.shape:
        raise ShapeError(f"logits {logits.shape} and labels {onehot.shape} disagree")
    _check_onehot(onehot)
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + zmax
    n = z.shape[0]
    loss = ((lse - z) * onehot.data).sum() / n
    out = Tensor(np.asarray(loss, dtype=logits.dtype))

    def bwd(g, needs):
        if not needs[0]:
            return None, None
        e = np.exp(shifted)
        probs = e / e.sum(axis=1, keepdims=True)
        return (probs - onehot.data) / n * g.reshape(()), None

    return record_op("softmax_cross_entropy", (logits, onehot), out, bwd)


def sigmoid_binary_cross_entropy(logits, label):
    """Fused sigmoid + binary crossentropy on logits.

    Forward is the stable max(z,0) - z*y + log(1 + exp(-|z|)); backward
    is (sigmoid(logits) - y) / N.
    """
    if logits.shape != label.shape:
        raise ShapeError(f"logits {logits.shape} and labels {label.shape} disagree")
    y = label.data
    if not np.all((y == 0) | (y == 1)):
        bad = np.argwhere((y != 0) & (y != 1))[0]
        raise LabelError(f"label at {tuple(int(i) for i in bad)} is {y[tuple(bad)]}, expected 0 or 1")
    z = logits.data
    n = z.size
    loss = (np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))).sum() / n
    out = Tensor(np.asarray(loss, dtype=logits.dtype))

    def bwd(g, needs):
        if not needs[0]:
            return None, None
        pos = z >= 0
        s = np.empty_like(z)
        s[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        s[~pos] = ez / (1.0 + ez)
        return (s - y) / n * g.reshape(()), None

    return record_op("sigmoid_binary_cross_entropy", (logits, label), out, bwd)


def predicted_classes(predictions, kind):
    """Class indices from raw predictions.

    Multiclass expects probability rows (argmax, ties to the lowest
    index); binary expects probabilities and thresholds at 0.5
    (p >= 0.5 predicts class 1).  Integer class arrays pass through.
    """
    arr = predictions.data if isinstance(predictions, Tensor) else np.asarray(predictions)
    if np.issubdtype(arr.dtype, np.integer):
        return arr.reshape(-1)
    if kind == "multiclass":
        if arr.ndim != 2:
            raise ShapeError(f"multiclass predictions must be rank-2 probabilities, got {arr.shape}")
        return arr.argmax(axis=1)
    if kind == "binary":
        return (arr.reshape(-1) >= 0.5).astype(np.int64)
    raise ContractError(f"unknown task kind {kind!r}")


def accuracy(predictions, labels, kind="multiclass", num_classes=None):
    """Fraction of correct predictions, optionally with a confusion matrix.

    Returns (fraction, confusion) where confusion is K x K with rows as
    true classes, or (fraction, None) when num_classes is not given.
    """
    pred = predicted_classes(predictions, kind)
    true = np.asarray(labels).reshape(-1).astype(np.int64)
    if pred.shape != true.shape:
        raise ShapeError(f"predictions {pred.shape} and labels {true.shape} disagree")
    if pred.size == 0:
        raise MetricError("accuracy over an empty sample set is undefined")
    frac = float((pred == true).mean())
    confusion = None
    if num_classes is not None:
        confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(confusion, (true, pred), 1)
    return frac, confusion


class MetricAccumulator:
    """Streaming correct/total counts with an optional confusion matrix.

    Accumulators are mergeable, so evaluation shards can be combined.
    """

    def __init__(self, kind="multiclass", num_classes=None):
        self.kind = kind
        self.num_classes = num_classes
        self.correct = 0
        self.total = 0
        self.confusion = (np.zeros((num_classes, num_classes), dtype=np.int64)
                          if num_classes else None)

    def update(self, predictions, labels):
        pred = predicted_classes(predictions, self.kind)
        true = np.asarray(labels).reshape(-1).astype(np.int64)
        self.correct += int((pred == true).sum())
        self.total += int(true.size)
        if self.confusion is not None:
            np.add.at(self.confusion, (true, pred), 1)

    def merge(self, other):
        if other.kind != self.kind:
            raise ContractError("cannot merge accumulators of different task kinds")
        self.correct += other.correct
        self.total += other.total
        if self.confusion is not None:
            self.confusion += other.confusion

    @property
    def accuracy(self):
        if self.total == 0:
            raise MetricError("accuracy over an empty sample set is undefined")
        return self.correct / self.total
