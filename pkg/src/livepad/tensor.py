"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records its inputs and a backward closure on the output tensor.
``Tensor.backward`` orders the recorded graph topologically and visits each
node once in reverse. Only leaf tensors (created by the user, with
``requires_grad=True``) accumulate into ``.grad``; calling ``backward`` twice
without ``zero_grad`` therefore doubles every leaf gradient.

Convolution follows the cross-correlation convention (the kernel is not
flipped).
"""

import contextlib
import struct
import threading

import numpy as np

from . import kernels
from .errors import DegenerateInputError


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """Layer hyper-parameters produce an empty or invalid output."""


class NumericError(FloatingPointError):
    """A forward op produced NaN or Inf from finite inputs."""


_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (eval-mode inference)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    # make ndarray <op> Tensor dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data / b.data, (a, b), backward, "div")


def power(a, p):
    a = as_tensor(a)

    def backward(g):
        return (g * p * a.data ** (p - 1),)

    return _make(a.data**p, (a,), backward, "pow")


def exp(a):
    out_data = np.exp(a.data)

    def backward(g):
        return (g * out_data,)

    return _make(out_data, (a,), backward, "exp")


def log(a):
    def backward(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), backward, "log")


def sqrt(a):
    out_data = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / out_data,)

    return _make(out_data, (a,), backward, "sqrt")


def cos(a):
    def backward(g):
        return (-g * np.sin(a.data),)

    return _make(np.cos(a.data), (a,), backward, "cos")


def arccos(a):
    """Inverse cosine; callers keep inputs strictly inside (-1, 1)."""

    def backward(g):
        return (-g / np.sqrt(1.0 - a.data * a.data),)

    return _make(np.arccos(a.data), (a,), backward, "arccos")


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient is zero where the clamp is active."""
    inside = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        return (g * inside,)

    return _make(np.clip(a.data, lo, hi), (a,), backward, "clip")


def activation(x, kind="relu", negative_slope=0.01):
    """ReLU or leaky ReLU. At exactly zero the positive-side slope (1) is used."""
    x = as_tensor(x)
    if kind == "relu":
        slope = 0.0
    elif kind == "leaky_relu":
        if not 0.0 <= negative_slope < 1.0:
            raise ValueError(f"negative_slope must lie in [0, 1), got {negative_slope}")
        slope = float(negative_slope)
    else:
        raise ValueError(f"unknown activation kind {kind!r}")
    positive = x.data >= 0
    if slope == 0.0:
        out_data = np.maximum(x.data, 0.0)
    else:
        out_data = np.where(positive, x.data, x.data * slope)
    local = np.where(positive, 1.0, slope)

    def backward(g):
        return (g * local,)

    return _make(out_data, (x,), backward, kind)


def relu(x):
    return activation(x, "relu")


def leaky_relu(x, negative_slope=0.01):
    return activation(x, "leaky_relu", negative_slope)


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def logsumexp(a, axis=-1):
    """Numerically stable log-sum-exp along ``axis`` (dimension removed)."""
    a = as_tensor(a)
    mx = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - mx)
    total = shifted.sum(axis=axis, keepdims=True)
    out = (np.log(total) + mx).squeeze(axis)
    soft = shifted / total

    def backward(g):
        return (np.expand_dims(g, axis) * soft,)

    return _make(out, (a,), backward, "logsumexp")


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def l2_normalize(a, axis=-1):
    """Divide by the L2 norm along ``axis``. Raises on zero-norm slices."""
    a = as_tensor(a)
    norms = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(norms == 0.0):
        raise DegenerateInputError("cannot normalize a zero-norm vector")
    return a / sqrt(tsum(a * a, axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# linear algebra and layers


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def conv2d(x, w, stride=1, pad=0):
    """2-D cross-correlation of ``x`` (B, C, H, W) with ``w`` (F, C, k, k)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d operands, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}")
    if stride < 1 or pad < 0:
        raise ConfigurationError(f"invalid stride={stride} / pad={pad}")
    k = w.shape[2]
    ho = kernels.output_size(x.shape[2], k, stride, pad)
    wo = kernels.output_size(x.shape[3], k, stride, pad)
    if ho < 1 or wo < 1:
        raise ConfigurationError(
            f"conv2d output would be {ho}x{wo} for input {x.shape[2:]} with k={k}, "
            f"stride={stride}, pad={pad}"
        )

    def backward(g):
        return kernels.conv2d_backward(x.data, w.data, g, stride, pad, x.requires_grad)

    return _make(kernels.conv2d_forward(x.data, w.data, stride, pad), (x, w), backward, "conv2d")


class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps


def batchnorm2d(x, gamma, beta, state, mode="train"):
    """Per-channel normalization over (B, H, W).

    Train mode uses batch statistics and updates ``state`` in place; eval mode
    uses the running statistics.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm params {gamma.shape}/{beta.shape} vs input {x.shape}")
    eps = state.eps
    if mode == "train":
        axes = (0, 2, 3)
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        n = x.data.size // c
        m = state.momentum
        unbiased = var * n / (n - 1) if n > 1 else var
        state.running_mean = (1 - m) * state.running_mean + m * mu
        state.running_var = (1 - m) * state.running_var + m * unbiased
    elif mode == "eval":
        mu, var = state.running_mean, state.running_var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data[None, :, None, None]
        if mode == "train":
            n = x.data.size // c
            dx = (
                inv[None, :, None, None]
                / n
                * (
                    n * dxhat
                    - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                )
            )
        else:
            dx = dxhat * inv[None, :, None, None]
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), backward, "batchnorm2d")


# ---------------------------------------------------------------------------
# verification


def grad_check(f, x, eps=1e-4, coords=None):
    """Compare autodiff against central differences for a scalar function.

    ``f`` maps the tensor ``x`` to a scalar Tensor. ``coords`` optionally
    restricts the check to a subset of flat indices. Returns the maximum over
    checked coordinates of ``|a - n| / max(1, |a|, |n|)``.
    """
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None

    flat = x.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(x).item()
            flat[i] = orig - eps
            fm = f(x).item()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    return worst


# ---------------------------------------------------------------------------
# serialization: u32 rank, u32 extents, little-endian f64 payload


def tensor_to_bytes(t):
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    header = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def tensor_from_bytes(buf, offset=0):
    """Decode one tensor at ``offset``; returns (array, next_offset)."""
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    shape = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    n = int(np.prod(shape)) if rank else 1
    arr = np.frombuffer(buf, dtype="<f8", count=n, offset=offset).reshape(shape)
    return arr.astype(np.float64), offset + 8 * n


def save_tensor(path, t):
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path):
    with open(path, "rb") as fh:
        arr, _ = tensor_from_bytes(fh.read())
    return Tensor(arr)
