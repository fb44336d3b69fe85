"""Reverse-mode automatic differentiation over dense float32 arrays.

Every op records its parents and a closure mapping the output gradient to
parent gradients. Node ids come from a single monotonically increasing
counter, so the creation order of tensors is a topological order of any
graph built from them; ``backward`` replays the reachable nodes in reverse
id order and visits each exactly once.

Feature maps use the batch x channels x height x width layout.
"""

import contextlib
import itertools
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

DTYPE = np.float32

_node_ids = itertools.count()
_state = threading.local()


def get_dtype():
    return getattr(_state, "dtype", DTYPE)


@contextlib.contextmanager
def precision(dtype):
    """Set the floating type new tensors are stored in on this thread.

    The library runs in float32; gradient oracles evaluate in float64.
    """
    prev = get_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def is_grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def record_relu_masks():
    """Collect the activation mask of every relu evaluated in the block.

    Used by gradient oracles to detect finite-difference steps that cross
    a relu kink.
    """
    log = []
    prev = getattr(_state, "relu_log", None)
    _state.relu_log = log
    try:
        yield log
    finally:
        _state.relu_log = prev


class Tensor:
    """A node in a reverse-mode graph.

    ``grad`` is only populated on leaves (tensors without parents) and
    accumulates across ``backward`` calls until reset with ``zero_grad``.
    """

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        self.data = np.asarray(data, dtype=get_dtype())
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = tuple(parents)
        self._backward_fn = backward_fn
        self.op = op
        self.node_id = next(_node_ids)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __deepcopy__(self, memo):
        out = type(self).__new__(type(self))
        memo[id(self)] = out
        out.__dict__.update({k: v for k, v in self.__dict__.items()})
        out.data = self.data.copy()
        out.grad = None if self.grad is None else self.grad.copy()
        out.parents = ()
        out._backward_fn = None
        out.node_id = next(_node_ids)
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self.parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __neg__ = lambda self: scale(self, -1.0)
    __matmul__ = lambda self, other: matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    parents = tuple(parents)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)
    return Tensor(data, op=op)


def backward(loss):
    """Populate ``grad`` on every leaf reachable from the scalar ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")

    reachable = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in reachable:
            continue
        reachable[id(node)] = node
        stack.extend(p for p in node.parents if p.requires_grad)

    pending = {id(loss): np.ones_like(loss.data)}
    for node in sorted(reachable.values(), key=lambda t: t.node_id, reverse=True):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node._backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


# --- elementwise -----------------------------------------------------------


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} do not match") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def scale(a, c):
    c = DTYPE(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(x):
    mask = x.data > 0
    log = getattr(_state, "relu_log", None)
    if log is not None:
        log.append(mask)
    return _make(np.where(mask, x.data, DTYPE(0)), (x,), lambda g: (g * mask,), "relu")


def exp(x):
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def clamp_min(x, lo):
    """Elementwise ``max(x, lo)``; gradient is zero where clamped."""
    mask = x.data >= lo
    return _make(np.where(mask, x.data, DTYPE(lo)), (x,), lambda g: (g * mask,), "clamp_min")


# --- reductions and shape ---------------------------------------------------


def sum(x, axis=None):
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), bw, "sum")


def mean(x, axis=None):
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis), 1.0 / n)


def reshape(x, shape):
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def global_avg_pool(x):
    """Mean over the spatial axes: [b, C, H, W] -> [b, C]."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects a 4-d tensor, got shape {x.shape}")
    hw = x.shape[2] * x.shape[3]

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] / hw, x.shape).astype(g.dtype),)

    return _make(x.data.mean(axis=(2, 3)), (x,), bw, "global_avg_pool")


def concat_channels(xs):
    """Concatenate feature maps along the channel axis, preserving order."""
    if not xs:
        raise ContractError("concat_channels needs at least one tensor")
    ref = xs[0].shape
    for x in xs:
        if x.ndim != 4:
            raise DimensionError(f"concat_channels expects 4-d tensors, got shape {x.shape}")
        if x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
            raise DimensionError(
                f"concat_channels: shape {x.shape} does not match {ref} in batch/spatial extents; "
                "equalize resolutions with the resolution adapter first"
            )
    bounds = np.cumsum([0] + [x.shape[1] for x in xs])

    def bw(g):
        return tuple(g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(np.concatenate([x.data for x in xs], axis=1), xs, bw, "concat_channels")


def slice_channels(x, start, stop):
    def bw(g):
        out = np.zeros_like(x.data)
        out[:, start:stop] = g
        return (out,)

    return _make(x.data[:, start:stop], (x,), bw, "slice_channels")


# --- linear algebra and convolution -----------------------------------------


def matmul(a, w):
    """[batch, in] @ [in, out] -> [batch, out]."""
    if a.ndim != 2 or w.ndim != 2 or a.shape[1] != w.shape[0]:
        raise DimensionError(f"matmul: inner extents of {a.shape} and {w.shape} do not match")
    return _make(a.data @ w.data, (a, w), lambda g: (g @ w.data.T, a.data.T @ g), "matmul")


def _out_extent(n, k, stride, padding, opname):
    out = (n + 2 * padding - k) // stride + 1
    if n + 2 * padding - k < 0 or out <= 0:
        raise DimensionError(
            f"{opname}: kernel extent {k} exceeds padded input extent {n + 2 * padding}"
        )
    return out


def _pad(x, padding):
    if padding == 0:
        return x
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    out[:, :, padding:padding + h, padding:padding + w] = x
    return out


def conv2d(x, k, stride=1, padding=0):
    """Cross-correlation of [b, Cin, H, W] with [Cout, Cin, kh, kw]."""
    if x.ndim != 4 or k.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {k.shape}")
    if stride < 1:
        raise ContractError(f"conv2d stride must be >= 1, got {stride}")
    b, cin, h, w = x.shape
    cout, kcin, kh, kw = k.shape
    if kcin != cin:
        raise DimensionError(f"conv2d: input {x.shape} has {cin} channels, kernel {k.shape} expects {kcin}")
    ho = _out_extent(h, kh, stride, padding, "conv2d")
    wo = _out_extent(w, kw, stride, padding, "conv2d")

    xp = _pad(x.data, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, cin * kh * kw)
    kmat = k.data.reshape(cout, -1)
    out = (cols @ kmat.T).reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gk = (g2.T @ cols).reshape(k.shape)
        dcols = (g2 @ kmat).reshape(b, ho, wo, cin, kh, kw)
        dcols = np.ascontiguousarray(dcols.transpose(4, 5, 0, 3, 1, 2))
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[i, j]
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gk

    return _make(np.ascontiguousarray(out), (x, k), bw, "conv2d")


def depthwise_conv2d(x, k, padding=1):
    """Per-channel 2-d cross-correlation, stride 1: kernel is [M, 1, kh, kw]."""
    if x.ndim != 4 or k.ndim != 4:
        raise DimensionError(f"depthwise_conv2d expects 4-d tensors, got {x.shape} and {k.shape}")
    b, m, h, w = x.shape
    if k.shape[0] != m or k.shape[1] != 1:
        raise DimensionError(
            f"depthwise_conv2d: input has {m} channels but kernel has shape {k.shape}"
        )
    kh, kw = k.shape[2:]
    ho = _out_extent(h, kh, 1, padding, "depthwise_conv2d")
    wo = _out_extent(w, kw, 1, padding, "depthwise_conv2d")
    xp = _pad(x.data, padding)
    taps = k.data[:, 0]

    out = np.zeros((b, m, ho, wo), dtype=np.result_type(xp, taps))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i:i + ho, j:j + wo] * taps[None, :, i, j, None, None]

    def bw(g):
        gk = np.zeros_like(k.data)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gk[:, 0, i, j] = np.einsum("bchw,bchw->c", g, xp[:, :, i:i + ho, j:j + wo])
                gxp[:, :, i:i + ho, j:j + wo] += g * taps[None, :, i, j, None, None]
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gk

    return _make(out, (x, k), bw, "depthwise_conv2d")


def batchnorm2d(x, gamma, beta, running_mean, running_var, training, momentum=0.9, eps=1e-5):
    """Batch normalization over (batch, H, W) per channel.

    In training mode the batch statistics normalize the input and the
    running buffers are updated in place as
    ``running = momentum * running + (1 - momentum) * batch_stat``
    (unbiased variance). In eval mode the running buffers are read only.
    """
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d expects a 4-d tensor, got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm2d: affine params {gamma.shape} do not match {c} channels")
    g_ = gamma.data[None, :, None, None]

    if training:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var * (n / max(n - 1, 1))
    else:
        n = None
        mu, var = running_mean, running_var

    inv_std = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * g_ + beta.data[None, :, None, None]

    def bw(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * g_
        if training:
            s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = (inv_std[None, :, None, None] / n) * (n * gxhat - s1 - xhat * s2)
        else:
            gx = gxhat * inv_std[None, :, None, None]
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), bw, "batchnorm2d")


# --- classification primitives ----------------------------------------------


def log_softmax(z, temperature=1.0):
    """Row-wise ``log(softmax(z / T))`` with max subtraction."""
    if z.ndim != 2:
        raise DimensionError(f"log_softmax expects [batch, classes], got shape {z.shape}")
    t = DTYPE(temperature)
    y = z.data / t
    y = y - y.max(axis=1, keepdims=True)
    out = y - np.log(np.exp(y).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def bw(g):
        return ((g - probs * g.sum(axis=1, keepdims=True)) / t,)

    return _make(out, (z,), bw, "log_softmax")


# --- oracle -------------------------------------------------------------------


def finite_difference_grad(f, x, step=1e-3):
    """Central-difference estimate of d f(x) / d x, one element at a time.

    ``f`` maps a Tensor to a scalar (Tensor or float). ``x.data`` is
    perturbed in place and restored afterwards.
    """
    if step <= 0:
        raise ContractError(f"finite-difference step must be positive, got {step}")
    flat = x.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)

    def evaluate():
        with no_grad():
            out = f(x)
        return float(out.data if isinstance(out, Tensor) else out)

    for i in range(flat.size):
        orig = flat[i]
        hi, lo = orig + DTYPE(step), orig - DTYPE(step)
        flat[i] = hi
        f_plus = evaluate()
        flat[i] = lo
        f_minus = evaluate()
        flat[i] = orig
        # float32 rounding makes the realized step differ from 2 * step
        grad[i] = (f_plus - f_minus) / (float(hi) - float(lo))
    return Tensor(grad.reshape(x.shape))
