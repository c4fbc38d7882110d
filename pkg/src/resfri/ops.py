"""Differentiable primitives on NCHW tensors.

Convolution goes through an im2col/GEMM lowering; pooling loops over the
k*k window offsets instead of the output pixels, which keeps every kernel a
handful of vectorised numpy calls.
"""

import contextlib
import threading

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigError, DataError, ShapeError
from .tensor import Tensor, make_result


_gates = threading.local()


@contextlib.contextmanager
def gate_recording(gates):
    """Record every ReLU sign mask and max-pool argmax into ``gates``."""
    prev = getattr(_gates, "state", None)
    _gates.state = ("record", gates, [0])
    try:
        yield gates
    finally:
        _gates.state = prev


@contextlib.contextmanager
def gate_replay(gates):
    """Reuse recorded gates in op order, freezing the piecewise-linear pieces.

    Finite differences taken under replay see a smooth function whose
    derivative at the recording point equals the true one.
    """
    prev = getattr(_gates, "state", None)
    _gates.state = ("replay", gates, [0])
    try:
        yield
    finally:
        _gates.state = prev


def _gate(value):
    state = getattr(_gates, "state", None)
    if state is None:
        return value
    mode, gates, cursor = state
    if mode == "record":
        gates.append(value)
        return value
    recorded = gates[cursor[0]]
    cursor[0] += 1
    if recorded.shape != value.shape:
        raise ShapeError("gate replay out of step with the recorded forward")
    return recorded


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def out_extent(size, k, stride, padding):
    extent = (size + 2 * padding - k) // stride + 1
    if size + 2 * padding - k < 0 or extent <= 0:
        raise ConfigError(
            f"non-positive output extent: size={size}, kernel={k}, "
            f"stride={stride}, padding={padding}"
        )
    return extent


def _pad(x, padding, value=0.0):
    if padding == 0:
        return x
    p = padding
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def _im2col(xp, kh, kw, stride, ho, wo):
    # rows ordered (c, i, j) to match weight.reshape(O, -1); columns (n, h, w)
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    view = as_strided(
        xp, (c, kh, kw, n, ho, wo), (sc, sh, sw, sn, sh * stride, sw * stride)
    )
    return view.reshape(c * kh * kw, n * ho * wo)


# ---------------------------------------------------------------- convolution


def conv2d(x, weight, bias=None, stride=1, padding=0, mask=None):
    """2-D cross-correlation. ``mask`` (same shape as ``weight``) zeroes weights."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    if c != i:
        raise ShapeError(f"conv2d channel mismatch: input has {c} channels, weight expects {i}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"invalid stride={stride} / padding={padding}")
    ho = out_extent(h, kh, stride, padding)
    wo = out_extent(w, kw, stride, padding)
    if mask is not None and mask.shape != weight.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match weight {weight.shape}")

    wmat = weight.data if mask is None else weight.data * mask
    wmat = wmat.reshape(o, -1)
    xp = _pad(x.data, padding)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    y = (wmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    y = np.ascontiguousarray(y)
    inputs = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"bias shape {bias.shape} does not match {o} output channels")
        y += bias.data.reshape(1, o, 1, 1)
        inputs.append(bias)

    def backward_fn(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g2 @ cols.T).reshape(weight.shape)
            if mask is not None:
                gw = gw * mask
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for a in range(kh):
                for b in range(kw):
                    gxp[:, :, a:a + hs:stride, b:b + ws:stride] += dcols[:, a, b].transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is not None:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return make_result(y, inputs, backward_fn, "conv2d")


# -------------------------------------------------------------------- pooling


def _pool_geometry(x, k, stride, padding):
    if x.ndim != 4:
        raise ShapeError(f"pooling expects NCHW input, got {x.shape}")
    if k < 1 or stride < 1 or padding < 0:
        raise ConfigError(f"invalid pool kernel={k}, stride={stride}, padding={padding}")
    _, _, h, w = x.shape
    return out_extent(h, k, stride, padding), out_extent(w, k, stride, padding)


def avgpool2d(x, k, stride=None, padding=0):
    """Window mean; the divisor is always k*k, padded zeros included."""
    x = _as_tensor(x)
    stride = k if stride is None else stride
    ho, wo = _pool_geometry(x, k, stride, padding)
    n, c, h, w = x.shape
    xp = _pad(x.data, padding)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    y = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for a in range(k):
        for b in range(k):
            y += xp[:, :, a:a + hs:stride, b:b + ws:stride]
    y *= x.dtype.type(1.0 / (k * k))

    def backward_fn(g):
        gs = g * g.dtype.type(1.0 / (k * k))
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for a in range(k):
            for b in range(k):
                gxp[:, :, a:a + hs:stride, b:b + ws:stride] += gs
        return (gxp[:, :, padding:padding + h, padding:padding + w],)

    return make_result(y, [x], backward_fn, "avgpool2d")


def maxpool2d(x, k, stride=None, padding=0):
    """Window max; gradient goes to the first maximal element of each window."""
    x = _as_tensor(x)
    stride = k if stride is None else stride
    ho, wo = _pool_geometry(x, k, stride, padding)
    n, c, h, w = x.shape
    xp = _pad(x.data, padding, value=-np.inf)
    sn, sc, sh, sw = xp.strides
    windows = as_strided(
        xp, (n, c, ho, wo, k, k), (sn, sc, sh * stride, sw * stride, sh, sw)
    ).reshape(n, c, ho, wo, k * k)
    arg = _gate(windows.argmax(axis=-1))
    y = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        di, dj = np.divmod(arg, k)
        rows = np.arange(ho).reshape(1, 1, ho, 1) * stride + di
        cols = np.arange(wo).reshape(1, 1, 1, wo) * stride + dj
        nn = np.arange(n).reshape(n, 1, 1, 1)
        cc = np.arange(c).reshape(1, c, 1, 1)
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        np.add.at(gxp, (nn, cc, rows, cols), g)
        return (gxp[:, :, padding:padding + h, padding:padding + w],)

    return make_result(np.ascontiguousarray(y), [x], backward_fn, "maxpool2d")


def global_avgpool(x):
    """Mean over H and W: [N, C, H, W] -> [N, C]."""
    x = _as_tensor(x)
    n, c, h, w = x.shape
    y = x.data.mean(axis=(2, 3))

    def backward_fn(g):
        gx = np.broadcast_to(g[:, :, None, None] / (h * w), x.shape)
        return (np.array(gx, dtype=x.dtype),)

    return make_result(y, [x], backward_fn, "global_avgpool")


# ---------------------------------------------------------- batch normalization


def batchnorm2d(x, gamma, beta, running_mean, running_var, training,
                momentum=0.1, eps=1e-5):
    """Per-channel batch normalization.

    In training mode ``running_mean``/``running_var`` are updated in place
    (unbiased variance for the running estimate, biased for normalizing).
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or running_mean.shape != (c,):
        raise ShapeError(f"batchnorm channel mismatch: input has {c}, layer has {gamma.shape[0]}")
    m = n * h * w
    if training:
        if m < 2:
            raise ShapeError("batchnorm in train mode needs N*H*W >= 2")
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean.reshape(1, c, 1, 1)
        var = np.mean(centered * centered, axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        mean, var = running_mean, running_var
        centered = x.data - mean.reshape(1, c, 1, 1)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centered * inv_std.reshape(1, c, 1, 1)
    y = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    def backward_fn(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * gamma.data.reshape(1, c, 1, 1)
        if training:
            s1 = gxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            s2 = (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            gx = (inv_std.reshape(1, c, 1, 1) / m) * (m * gxhat - s1 - xhat * s2)
        else:
            gx = gxhat * inv_std.reshape(1, c, 1, 1)
        return gx, ggamma, gbeta

    return make_result(y, [x, gamma, beta], backward_fn, "batchnorm2d")


# ------------------------------------------------------------- elementwise ops


def relu(x):
    x = _as_tensor(x)
    pos = _gate(x.data > 0)
    y = np.where(pos, x.data, x.dtype.type(0))

    def backward_fn(g):
        return (g * pos,)

    return make_result(y, [x], backward_fn, "relu")


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add needs identical shapes, got {a.shape} and {b.shape}")

    def backward_fn(g):
        return g, g

    return make_result(a.data + b.data, [a, b], backward_fn, "add")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul needs identical shapes, got {a.shape} and {b.shape}")

    def backward_fn(g):
        return g * b.data, g * a.data

    return make_result(a.data * b.data, [a, b], backward_fn, "mul")


def concat_channels(parts):
    """Concatenate NCHW tensors along channels, preserving part order."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_channels needs at least one part")
    ref = parts[0].shape
    for idx, p in enumerate(parts):
        if p.ndim != 4 or (p.shape[0], p.shape[2], p.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(
                f"concat_channels part {idx} has shape {p.shape}, incompatible with {ref}"
            )
    widths = [p.shape[1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def backward_fn(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    y = np.concatenate([p.data for p in parts], axis=1)
    return make_result(y, parts, backward_fn, "concat_channels")


def slice_channels(x, start, stop):
    x = _as_tensor(x)
    c = x.shape[1]
    if not 0 <= start < stop <= c:
        raise ShapeError(f"channel slice [{start}:{stop}) out of range for {c} channels")

    def backward_fn(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return make_result(np.ascontiguousarray(x.data[:, start:stop]), [x], backward_fn, "slice_channels")


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with weight stored as [out, in]."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    y = x.data @ weight.data.T
    inputs = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear bias shape {bias.shape} does not match weight {weight.shape}")
        y = y + bias.data
        inputs.append(bias)

    def backward_fn(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return make_result(y, inputs, backward_fn, "linear")


def flatten(x):
    x = _as_tensor(x)
    shape = x.shape

    def backward_fn(g):
        return (g.reshape(shape),)

    return make_result(x.data.reshape(shape[0], -1), [x], backward_fn, "flatten")


# --------------------------------------------------------------------- losses


def sum_all(x):
    x = _as_tensor(x)

    def backward_fn(g):
        return (np.full(x.shape, g, dtype=x.dtype),)

    return make_result(np.asarray(x.data.sum()), [x], backward_fn, "sum")


def mean_square(x, target=None):
    """Mean of squared entries of ``x - target``."""
    x = _as_tensor(x)
    diff = x.data if target is None else x.data - np.asarray(target, dtype=x.dtype)
    scale = 2.0 / diff.size

    def backward_fn(g):
        return (g * scale * diff,)

    return make_result(np.asarray(np.mean(diff * diff)), [x], backward_fn, "mean_square")


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [N, C], got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch of {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DataError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.intp)
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward_fn(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return make_result(np.asarray(loss, dtype=logits.dtype), [logits], backward_fn, "softmax_cross_entropy")
