"""Dense float32 tensors with reverse-mode automatic differentiation.

The engine records a tape of operations whenever an input has
``requires_grad`` set; ``backward`` replays the tape once in reverse
topological order. Reductions accumulate in float64 and store float32.

Supported ops: add, sub, mul (elementwise or scalar), matmul (2D),
conv2d (stride 1, same padding), silu, relu, mean, sum, abs,
concat_channels, downsample2x (average pooling), upsample2x (nearest),
affine_scale_shift.
"""

from __future__ import annotations

import struct

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "ShapeError",
    "Adam",
    "no_grad",
    "add",
    "sub",
    "mul",
    "matmul",
    "conv2d",
    "silu",
    "relu",
    "mean",
    "tsum",
    "tabs",
    "concat_channels",
    "downsample2x",
    "upsample2x",
    "affine_scale_shift",
    "save_vct",
    "load_vct",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's rule."""


class Tensor:
    """N-dimensional float32 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # convenience arithmetic, delegating to the module-level ops
    def __add__(self, other):
        return add(self, _wrap(other))

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __radd__ = __add__
    __rmul__ = __mul__

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.astype(np.float32, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Populate ``grad`` on every requires_grad leaf reachable from a scalar."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.data.shape}")
        topo = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
        # non-leaf grads are transient; free them
        for node in topo:
            if node._backward is not None and node is not self:
                node.grad = None


def _wrap(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


def _toposort(root):
    order = []
    seen = set()
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


_grad_enabled = True


class no_grad:
    """Context manager disabling tape recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _track(out, parents, backward):
    """Attach tape metadata if any parent participates in autodiff."""
    if _grad_enabled and any(p.requires_grad or p._backward is not None for p in parents):
        out.requires_grad = False  # not a leaf; grads flow through
        out._parents = tuple(parents)
        out._backward = backward
        # mark so descendants keep recording
        out.requires_grad = True
    return out


def _needs(p):
    return p.requires_grad or p._backward is not None


# ---------------------------------------------------------------------------
# elementwise / scalar ops

def _binary_shapes(a, b, name):
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise ShapeError(f"{name}: shape mismatch {a.data.shape} vs {b.data.shape}")


def _reduce_to(g, shape):
    """Sum a broadcast gradient back down to the original (scalar) shape."""
    if g.shape == shape:
        return g
    return np.sum(g, dtype=np.float64).astype(np.float32).reshape(shape)


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b, "add")
    out = Tensor(a.data + b.data)

    def backward(g):
        if _needs(a):
            a._accumulate(_reduce_to(g, a.data.shape))
        if _needs(b):
            b._accumulate(_reduce_to(g, b.data.shape))

    return _track(out, (a, b), backward)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b, "sub")
    out = Tensor(a.data - b.data)

    def backward(g):
        if _needs(a):
            a._accumulate(_reduce_to(g, a.data.shape))
        if _needs(b):
            b._accumulate(_reduce_to(-g, b.data.shape))

    return _track(out, (a, b), backward)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b, "mul-elementwise")
    out = Tensor(a.data * b.data)

    def backward(g):
        if _needs(a):
            a._accumulate(_reduce_to(g * b.data, a.data.shape))
        if _needs(b):
            b._accumulate(_reduce_to(g * a.data, b.data.shape))

    return _track(out, (a, b), backward)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        if _needs(a):
            a._accumulate(g @ b.data.T)
        if _needs(b):
            b._accumulate(a.data.T @ g)

    return _track(out, (a, b), backward)


def silu(a):
    a = _wrap(a)
    s = expit(a.data)
    out = Tensor(a.data * s)

    def backward(g):
        if _needs(a):
            a._accumulate(g * (s * (1.0 + a.data * (1.0 - s))))

    return _track(out, (a,), backward)


def relu(a):
    a = _wrap(a)
    out = Tensor(np.maximum(a.data, 0.0))

    def backward(g):
        if _needs(a):
            a._accumulate(g * (a.data > 0.0))

    return _track(out, (a,), backward)


def tabs(a):
    a = _wrap(a)
    out = Tensor(np.abs(a.data))

    def backward(g):
        if _needs(a):
            a._accumulate(g * np.sign(a.data))

    return _track(out, (a,), backward)


def tsum(a):
    a = _wrap(a)
    out = Tensor(np.sum(a.data, dtype=np.float64).astype(np.float32))

    def backward(g):
        if _needs(a):
            a._accumulate(np.full(a.data.shape, float(g), dtype=np.float32))

    return _track(out, (a,), backward)


def mean(a):
    a = _wrap(a)
    n = a.data.size
    out = Tensor(np.asarray(np.mean(a.data, dtype=np.float64), dtype=np.float32))

    def backward(g):
        if _needs(a):
            a._accumulate(np.full(a.data.shape, float(g) / n, dtype=np.float32))

    return _track(out, (a,), backward)


# ---------------------------------------------------------------------------
# image ops; layout is (B, C, H, W)

def _im2col(xp, k):
    b, c, hp, wp = xp.shape
    h, w = hp - k + 1, wp - k + 1
    cols = np.empty((b, c, k, k, h, w), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(b, c * k * k, h * w)


def _col2im(cols, x_shape, k):
    """Adjoint of _im2col over a same-padded input; returns (B, C, H, W)."""
    b, c, h, w = x_shape
    p = (k - 1) // 2
    cols = cols.reshape(b, c, k, k, h, w)
    xp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + h, j:j + w] += cols[:, :, i, j]
    return xp[:, :, p:p + h, p:p + w] if p else xp


def _corr2d(x, w):
    """Stride-1 same-padding cross-correlation; x (B,Cin,H,W), w (Cout,Cin,k,k)."""
    k = w.shape[2]
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = _im2col(xp, k)
    out = w.reshape(w.shape[0], -1) @ cols
    b, _, h, wdt = x.shape
    return out.reshape(b, w.shape[0], h, wdt), cols


def conv2d(x, w, bias=None):
    """2D convolution (cross-correlation), stride 1, same padding, odd kernel."""
    x, w = _wrap(x), _wrap(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4D input and kernel, got {x.data.shape} and {w.data.shape}")
    if w.data.shape[1] != x.data.shape[1]:
        raise ShapeError(f"conv2d: channel mismatch, input {x.data.shape} vs kernel {w.data.shape}")
    k = w.data.shape[2]
    if w.data.shape[3] != k or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {w.data.shape}")
    if bias is not None:
        bias = _wrap(bias)
        if bias.data.shape != (w.data.shape[0],):
            raise ShapeError(f"conv2d: bias shape {bias.data.shape} vs {w.data.shape[0]} channels")

    y, cols = _corr2d(x.data, w.data)
    if bias is not None:
        y = y + bias.data[None, :, None, None]
    out = Tensor(y)
    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        cout = w.data.shape[0]
        gm = g.reshape(g.shape[0], cout, -1)
        if _needs(w):
            # batched GEMM with transposed operand; no materialized copies
            dw = np.einsum("boj,bkj->ok", gm, cols, optimize=True)
            w._accumulate(dw.reshape(w.data.shape))
        if bias is not None and _needs(bias):
            bias._accumulate(np.sum(g, axis=(0, 2, 3), dtype=np.float64).astype(np.float32))
        if _needs(x):
            # dcols = W^T g, then scatter-add patches back (col2im)
            dcols = np.matmul(w.data.reshape(cout, -1).T, gm)
            x._accumulate(_col2im(dcols, x.data.shape, k))

    return _track(out, parents, backward)


def downsample2x(x):
    """2x average pooling over the spatial axes."""
    x = _wrap(x)
    b, c, h, w = _spatial4(x, "downsample2x")
    if h % 2 or w % 2:
        raise ShapeError(f"downsample2x: spatial extents must be even, got {x.data.shape}")
    y = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    out = Tensor(y)

    def backward(g):
        if _needs(x):
            gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
            x._accumulate(gx)

    return _track(out, (x,), backward)


def upsample2x(x):
    """2x nearest-neighbor upsampling over the spatial axes."""
    x = _wrap(x)
    _spatial4(x, "upsample2x")
    y = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    out = Tensor(y)

    def backward(g):
        if _needs(x):
            b, c, h, w = g.shape
            gx = g.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))
            x._accumulate(gx.astype(np.float32))

    return _track(out, (x,), backward)


def concat_channels(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError(f"concat-channels: need 4D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ShapeError(f"concat-channels: shape mismatch {a.data.shape} vs {b.data.shape}")
    out = Tensor(np.concatenate([a.data, b.data], axis=1))
    ca = a.data.shape[1]

    def backward(g):
        if _needs(a):
            a._accumulate(g[:, :ca])
        if _needs(b):
            b._accumulate(g[:, ca:])

    return _track(out, (a, b), backward)


def affine_scale_shift(x, scale, shift):
    """Per-channel FiLM conditioning: x * (1 + scale) + shift.

    scale and shift have shape (B, C); broadcast over the spatial axes.
    """
    x, scale, shift = _wrap(x), _wrap(scale), _wrap(shift)
    b, c, _, _ = _spatial4(x, "affine-scale-shift")
    if scale.data.shape != (b, c) or shift.data.shape != (b, c):
        raise ShapeError(
            f"affine-scale-shift: conditioning shape {scale.data.shape}/{shift.data.shape} "
            f"vs input {x.data.shape}"
        )
    s4 = scale.data[:, :, None, None]
    out = Tensor(x.data * (1.0 + s4) + shift.data[:, :, None, None])

    def backward(g):
        if _needs(x):
            x._accumulate(g * (1.0 + s4))
        if _needs(scale):
            scale._accumulate(np.sum(g * x.data, axis=(2, 3), dtype=np.float64).astype(np.float32))
        if _needs(shift):
            shift._accumulate(np.sum(g, axis=(2, 3), dtype=np.float64).astype(np.float32))

    return _track(out, (x, scale, shift), backward)


def _spatial4(x, name):
    if x.data.ndim != 4:
        raise ShapeError(f"{name}: need a (B,C,H,W) tensor, got shape {x.data.shape}")
    return x.data.shape


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Adam with bias correction; zeroes grads after each step."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p in self.params:
            if p.grad is None:
                raise ValueError("adam_step: parameter has no gradient")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(np.float32)
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# .vct on-disk format: magic "VCT1", u32 LE rank, rank x u64 LE extents,
# then raw little-endian float32 values, row-major.

_MAGIC = b"VCT1"


def save_vct(path, array):
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.tobytes())


def load_vct(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a .vct file (magic {magic!r})")
        (rank,) = struct.unpack("<I", f.read(4))
        shape = struct.unpack(f"<{rank}Q", f.read(8 * rank))
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(f.read(4 * n), dtype="<f4")
        if data.size != n:
            raise ValueError(f"{path}: truncated payload, expected {n} values got {data.size}")
    return data.reshape(shape).copy()
