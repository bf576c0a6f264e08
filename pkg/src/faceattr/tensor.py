"""Dense tensors and reverse-mode automatic differentiation.

A :class:`Tensor` wraps a contiguous row-major numpy array plus an
optional gradient buffer.  Operations (see :mod:`faceattr.ops`) are pure
functions; while a :class:`ComputeGraph` is active as a context manager
they append an execution record to it, and :func:`backward` replays the
tape in reverse to accumulate gradients.

Training runs in float32; gradient checking uses float64 because central
finite differences are too noisy in single precision.
"""

import threading

import numpy as np

from .errors import GraphError, ShapeError

DEFAULT_DTYPE = np.float32


class Tensor:
    """N-dimensional float array with optional gradient accumulation.

    ``dtype=None`` keeps a floating input array's precision and casts
    everything else to float32.  ``grad`` starts as ``None`` and is
    allocated by :func:`backward`; repeated backward passes accumulate
    (gradients are additive until :meth:`zero_grad`).
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, delta):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += delta

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return (f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, "
                f"requires_grad={self.requires_grad})")


class _OpRecord:
    __slots__ = ("name", "inputs", "output", "backward_fn")

    def __init__(self, name, inputs, output, backward_fn):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class ComputeGraph:
    """Execution tape: ops append records in the order they ran.

    Execution order is a topological order by construction, so the
    backward pass is a single reverse sweep that touches each record
    exactly once.  A graph must stay confined to one thread.
    """

    _stack = threading.local()

    def __init__(self):
        self.records = []

    def __enter__(self):
        stack = self._ensure_stack()
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = self._ensure_stack()
        if not stack or stack[-1] is not self:
            raise GraphError("compute graphs must be exited in LIFO order")
        stack.pop()
        return False

    @classmethod
    def _ensure_stack(cls):
        if not hasattr(cls._stack, "graphs"):
            cls._stack.graphs = []
        return cls._stack.graphs

    @classmethod
    def current(cls):
        stack = cls._ensure_stack()
        return stack[-1] if stack else None

    def record(self, name, inputs, output, backward_fn):
        self.records.append(_OpRecord(name, inputs, output, backward_fn))

    def __len__(self):
        return len(self.records)


def record_op(name, inputs, output, backward_fn):
    """Attach ``output`` to the active graph if any input wants gradients."""
    if any(t.requires_grad for t in inputs):
        output.requires_grad = True
        graph = ComputeGraph.current()
        if graph is not None:
            graph.record(name, tuple(inputs), output, backward_fn)
    return output


def backward(loss, graph):
    """Accumulate d(loss)/d(tensor) into ``.grad`` of every recorded tensor.

    ``loss`` must be a scalar produced by ``graph``.  Adjoints are kept in
    a side table during the sweep, so running backward twice on the same
    graph adds the same gradients again (exactly 2x total).  Recorded
    tensors that do not influence the loss receive zero gradients.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(rec.output) for rec in graph.records}
    if id(loss) not in produced:
        raise GraphError("loss tensor was not produced by this compute graph")

    adjoints = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(graph.records):
        gout = adjoints.get(id(rec.output))
        if gout is None:
            continue
        needs = tuple(t.requires_grad for t in rec.inputs)
        grads = rec.backward_fn(gout, needs)
        for tensor, grad in zip(rec.inputs, grads):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in adjoints:
                adjoints[key] = adjoints[key] + grad
            else:
                adjoints[key] = grad

    seen = {}
    for rec in graph.records:
        for t in rec.inputs + (rec.output,):
            if t.requires_grad:
                seen[id(t)] = t
    for key, tensor in seen.items():
        adj = adjoints.get(key)
        tensor.accumulate_grad(adj if adj is not None else np.zeros_like(tensor.data))


class GradCheckEntry:
    __slots__ = ("name", "max_rel_error", "passed")

    def __init__(self, name, max_rel_error, passed):
        self.name = name
        self.max_rel_error = max_rel_error
        self.passed = passed


class GradCheckReport:
    """Per-parameter worst relative error of analytic vs numeric gradients."""

    def __init__(self, entries, tol):
        self.entries = entries
        self.tol = tol

    @property
    def passed(self):
        return all(e.passed for e in self.entries)

    @property
    def max_rel_error(self):
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def lines(self):
        out = []
        for e in self.entries:
            status = "ok" if e.passed else "FAIL"
            out.append(f"param={e.name} max_rel_err={e.max_rel_error:.3e} status={status}")
        return out


# Relative error uses a floored denominator so finite-difference noise on
# near-zero gradients cannot blow up the ratio.
_REL_FLOOR = 1e-6


def _max_rel_error(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), _REL_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def grad_check(fn, params, h=1e-5, tol=1e-4):
    """Compare analytic gradients of ``fn`` against central finite differences.

    ``fn`` is a zero-argument callable returning a scalar Tensor computed
    from the float64 tensors in ``params`` (a name -> Tensor mapping).
    Each parameter element is perturbed by +/-h; the numeric derivative
    (f(x+h) - f(x-h)) / 2h is compared to one analytic backward pass.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise GraphError(f"grad_check requires float64 parameters, {name} is {p.dtype}")
    graph = ComputeGraph()
    with graph:
        loss = fn()
    for p in params.values():
        p.zero_grad()
    backward(loss, graph)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    entries = []
    for name, p in params.items():
        flat = p.data.ravel()
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = fn().item()
            flat[i] = orig - h
            f_minus = fn().item()
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2.0 * h)
        err = _max_rel_error(analytic[name].ravel(), numeric)
        entries.append(GradCheckEntry(name, err, err <= tol))
    return GradCheckReport(entries, tol)
