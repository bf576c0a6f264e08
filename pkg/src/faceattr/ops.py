"""Forward kernels and their backward rules.

Everything takes and returns :class:`~faceattr.tensor.Tensor` in NCHW
row-major layout and preserves the input dtype.  Each op registers a
closure on the active :class:`~faceattr.tensor.ComputeGraph`; with no
graph active the ops are plain numpy math.

The production convolution goes through an im2col patch matrix and one
BLAS matmul.  ``conv2d_reference`` is the slow, loop-based oracle kept
for verification; ``im2col_loops`` builds the same patch matrix without
stride tricks so tests can assert the two construction strategies agree
bit for bit before the shared matmul.
"""

import numpy as np

from .errors import ContractError, EmptyBatchError, ShapeError
from .tensor import Tensor, record_op


def matmul(a, b):
    """Matrix product of two rank-2 tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data, dtype=a.dtype)

    def bwd(g, needs):
        da = g @ b.data.T if needs[0] else None
        db = a.data.T @ g if needs[1] else None
        return da, db

    return record_op("matmul", (a, b), out, bwd)


def add(a, b):
    """Elementwise add; also accepts a rank-1 bias broadcast per channel.

    Supported shapes: identical shapes, [C] onto [N,C,H,W], [K] onto [N,K].
    """
    if a.shape == b.shape:
        expand = None
    elif b.data.ndim == 1 and a.data.ndim == 4 and b.shape[0] == a.shape[1]:
        expand = (1, -1, 1, 1)
    elif b.data.ndim == 1 and a.data.ndim == 2 and b.shape[0] == a.shape[1]:
        expand = (1, -1)
    else:
        raise ShapeError(f"add cannot broadcast {b.shape} onto {a.shape}")
    bdata = b.data if expand is None else b.data.reshape(expand)
    out = Tensor(a.data + bdata, dtype=a.dtype)

    def bwd(g, needs):
        da = g if needs[0] else None
        if not needs[1]:
            db = None
        elif expand is None:
            db = g
        elif len(expand) == 4:
            db = g.sum(axis=(0, 2, 3))
        else:
            db = g.sum(axis=0)
        return da, db

    return record_op("add", (a, b), out, bwd)


def mul(a, b):
    """Elementwise product of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    out = Tensor(a.data * b.data, dtype=a.dtype)

    def bwd(g, needs):
        da = g * b.data if needs[0] else None
        db = g * a.data if needs[1] else None
        return da, db

    return record_op("mul", (a, b), out, bwd)


def tsum(x):
    """Sum of all elements, as a scalar tensor."""
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))

    def bwd(g, needs):
        return (np.full_like(x.data, g.reshape(())),)

    return record_op("sum", (x,), out, bwd)


def relu(x):
    """max(0, x); the subgradient at 0 is 0."""
    out = Tensor(np.maximum(x.data, 0), dtype=x.dtype)

    def bwd(g, needs):
        return (g * (x.data > 0),)

    return record_op("relu", (x,), out, bwd)


def sigmoid(x):
    """Numerically stable logistic function."""
    out = Tensor(_sigmoid(x.data), dtype=x.dtype)

    def bwd(g, needs):
        s = out.data
        return (g * s * (1.0 - s),)

    return record_op("sigmoid", (x,), out, bwd)


def _sigmoid(z):
    pos = z >= 0
    res = np.empty_like(z)
    res[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    res[~pos] = ez / (1.0 + ez)
    return res


def softmax_rows(x):
    """Row-wise softmax of a rank-2 tensor, stabilized by max subtraction."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a rank-2 input, got shape {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    out = Tensor(s, dtype=x.dtype)

    def bwd(g, needs):
        dot = (g * s).sum(axis=1, keepdims=True)
        return (s * (g - dot),)

    return record_op("softmax_rows", (x,), out, bwd)


def flatten(x):
    """Collapse all but the leading (batch) axis."""
    n = x.shape[0]
    out = Tensor(x.data.reshape(n, -1), dtype=x.dtype)

    def bwd(g, needs):
        return (g.reshape(x.shape),)

    return record_op("flatten", (x,), out, bwd)


def global_avgpool(x):
    """Average over the spatial axes of an NCHW tensor, keeping [N,C,1,1]."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avgpool needs an NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3), keepdims=True), dtype=x.dtype)

    def bwd(g, needs):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return record_op("global_avgpool", (x,), out, bwd)


def _conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _pad_nchw(data, pad, value=0.0):
    if pad == 0:
        return data
    return np.pad(data, ((0, 0), (0, 0), (pad, pad), (pad, pad)),
                  mode="constant", constant_values=value)


def _patch_windows(xp, kh, kw, stride, oh, ow):
    """View of padded input as [N, OH, OW, C, kh, kw] patch windows."""
    n, c, hp, wp = xp.shape
    sn, sc, sh, sw = xp.strides
    shape = (n, oh, ow, c, kh, kw)
    strides = (sn, sh * stride, sw * stride, sc, sh, sw)
    return np.lib.stride_tricks.as_strided(xp, shape=shape, strides=strides)


def im2col(x_data, kh, kw, stride, pad):
    """Patch matrix [N*OH*OW, C*kh*kw] via stride tricks (production path)."""
    xp = _pad_nchw(x_data, pad)
    n, c, _, _ = xp.shape
    oh = _conv_out_size(x_data.shape[2], kh, stride, pad)
    ow = _conv_out_size(x_data.shape[3], kw, stride, pad)
    windows = _patch_windows(xp, kh, kw, stride, oh, ow)
    return np.ascontiguousarray(windows).reshape(n * oh * ow, c * kh * kw), oh, ow


def im2col_loops(x_data, kh, kw, stride, pad):
    """Same patch matrix built with explicit loops (verification path)."""
    xp = _pad_nchw(x_data, pad)
    n, c, _, _ = xp.shape
    oh = _conv_out_size(x_data.shape[2], kh, stride, pad)
    ow = _conv_out_size(x_data.shape[3], kw, stride, pad)
    cols = np.empty((n * oh * ow, c * kh * kw), dtype=x_data.dtype)
    row = 0
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                cols[row] = patch.ravel()
                row += 1
    return cols, oh, ow


def _col2im(dcols, x_shape, kh, kw, stride, pad, oh, ow):
    """Scatter-add patch gradients back onto the (padded) input."""
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    dwin = dcols.reshape(n, oh, ow, c, kh, kw)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                dwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        return dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def _check_conv_shapes(x, w, bias, stride, pad):
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d needs NCHW input and FCHW weights, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match {w.shape[0]} filters")
    kh, kw = w.shape[2], w.shape[3]
    if kh > x.shape[2] + 2 * pad or kw > x.shape[3] + 2 * pad:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input "
            f"{x.shape[2] + 2 * pad}x{x.shape[3] + 2 * pad}")


def conv2d(x, w, bias=None, stride=1, pad=0):
    """2-D cross-correlation with zero padding.

    x: [N,C,H,W], w: [F,C,kh,kw], bias: [F] or None.  Output spatial size
    follows floor((H + 2*pad - kh) / stride) + 1.
    """
    _check_conv_shapes(x, w, bias, stride, pad)
    n = x.shape[0]
    f, c, kh, kw = w.shape
    cols, oh, ow = im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(f, -1)
    out_mat = cols @ wmat.T
    out_data = out_mat.reshape(n, oh, ow, f).transpose(0, 3, 1, 2)
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, -1, 1, 1)
    out = Tensor(np.ascontiguousarray(out_data), dtype=x.dtype)

    inputs = (x, w) if bias is None else (x, w, bias)

    def bwd(g, needs):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, f)
        dx = dw = db = None
        if needs[0]:
            dcols = gmat @ wmat
            dx = _col2im(dcols, x.shape, kh, kw, stride, pad, oh, ow)
        if needs[1]:
            dw = (gmat.T @ cols).reshape(w.shape)
        if bias is not None and needs[2]:
            db = g.sum(axis=(0, 2, 3))
        return (dx, dw) if bias is None else (dx, dw, db)

    return record_op("conv2d", inputs, out, bwd)


def conv2d_reference(x_data, w_data, bias_data=None, stride=1, pad=0):
    """Naive quadruple-loop convolution on raw arrays (test oracle)."""
    n, c, h, w_in = x_data.shape
    f, _, kh, kw = w_data.shape
    oh = _conv_out_size(h, kh, stride, pad)
    ow = _conv_out_size(w_in, kw, stride, pad)
    xp = _pad_nchw(x_data, pad)
    out = np.zeros((n, f, oh, ow), dtype=x_data.dtype)
    wflat = w_data.reshape(f, -1)
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw].ravel()
                for k in range(f):
                    out[b, k, i, j] = np.dot(patch, wflat[k])
    if bias_data is not None:
        out += bias_data.reshape(1, -1, 1, 1)
    return out


def maxpool2d(x, kernel=2, stride=None, pad=0):
    """Max pooling over kernel x kernel windows.

    Padding is filled with -inf so border windows reduce over real
    elements only; the gradient flows to the first maximum of each
    window in row-major order.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d needs an NCHW input, got shape {x.shape}")
    stride = kernel if stride is None else stride
    n, c, h, w = x.shape
    if kernel > h + 2 * pad or kernel > w + 2 * pad:
        raise ShapeError(f"pool window {kernel} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    oh = _conv_out_size(h, kernel, stride, pad)
    ow = _conv_out_size(w, kernel, stride, pad)
    xp = _pad_nchw(x.data, pad, value=-np.inf)
    sn, sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, shape=(n, c, oh, ow, kernel, kernel),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw))
    flat = np.ascontiguousarray(windows).reshape(n, c, oh, ow, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = Tensor(np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0], dtype=x.dtype)

    hp, wp = h + 2 * pad, w + 2 * pad

    def bwd(g, needs):
        ki, kj = np.divmod(arg, kernel)
        rows = np.arange(oh).reshape(1, 1, -1, 1) * stride + ki
        cols_ = np.arange(ow).reshape(1, 1, 1, -1) * stride + kj
        batch = np.arange(n).reshape(-1, 1, 1, 1)
        chan = np.arange(c).reshape(1, -1, 1, 1)
        flat_idx = (((batch * c + chan) * hp + rows) * wp + cols_).ravel()
        dxp = np.zeros(n * c * hp * wp, dtype=g.dtype)
        np.add.at(dxp, flat_idx, g.ravel())
        dxp = dxp.reshape(n, c, hp, wp)
        if pad:
            dxp = dxp[:, :, pad:-pad, pad:-pad]
        return (dxp,)

    return record_op("maxpool2d", (x,), out, bwd)


class BatchNormState:
    """Per-channel running mean/variance for one batchnorm layer."""

    __slots__ = ("mean", "var")

    def __init__(self, channels, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def copy(self):
        dup = BatchNormState.__new__(BatchNormState)
        dup.mean = self.mean.copy()
        dup.var = self.var.copy()
        return dup

    def astype(self, dtype):
        dup = BatchNormState.__new__(BatchNormState)
        dup.mean = self.mean.astype(dtype)
        dup.var = self.var.astype(dtype)
        return dup


def batchnorm2d(x, gamma, beta, state, eps=1e-5, momentum=0.1, mode="train"):
    """Per-channel batch normalization with affine parameters.

    Train mode normalizes by the batch moments (biased variance) and
    folds them into the running statistics:
    ``running = (1 - momentum) * running + momentum * batch``.
    Eval mode normalizes by the running statistics and never writes them.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d needs an NCHW input, got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d affine shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    if state.mean.shape != (c,):
        raise ShapeError(f"batchnorm2d state has {state.mean.shape[0]} channels, input has {c}")
    if mode not in ("train", "eval"):
        raise ContractError(f"batchnorm2d mode must be 'train' or 'eval', got {mode!r}")
    if x.shape[0] == 0:
        raise EmptyBatchError("batchnorm2d over an empty batch")

    if mode == "train":
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        state.mean[...] = (1.0 - momentum) * state.mean + momentum * mu
        state.var[...] = (1.0 - momentum) * state.var + momentum * var
    else:
        mu = state.mean
        var = state.var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    out = Tensor(gamma.data.reshape(1, -1, 1, 1) * xhat + beta.data.reshape(1, -1, 1, 1),
                 dtype=x.dtype)

    m = x.shape[0] * x.shape[2] * x.shape[3]

    def bwd(g, needs):
        dgamma = (g * xhat).sum(axis=(0, 2, 3)) if needs[1] else None
        dbeta = g.sum(axis=(0, 2, 3)) if needs[2] else None
        dx = None
        if needs[0]:
            gscaled = g * gamma.data.reshape(1, -1, 1, 1)
            if mode == "train":
                sum_g = gscaled.sum(axis=(0, 2, 3), keepdims=True)
                sum_gx = (gscaled * xhat).sum(axis=(0, 2, 3), keepdims=True)
                dx = (inv_std.reshape(1, -1, 1, 1) / m) * (m * gscaled - sum_g - xhat * sum_gx)
            else:
                dx = gscaled * inv_std.reshape(1, -1, 1, 1)
        return dx, dgamma, dbeta

    return record_op("batchnorm2d", (x, gamma, beta), out, bwd)
