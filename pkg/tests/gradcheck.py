"""Finite-difference gradient oracle, independent of the tensor engine.

Each op has a plain-numpy float64 forward replica. The check projects the
op output onto a fixed random vector to get a scalar, differentiates that
scalar by central differences in float64, and compares against the
engine's reverse-mode gradients.
"""

import numpy as np
from scipy.ndimage import correlate

from vce import tensor as T


def np_silu(x):
    return x / (1.0 + np.exp(-x))


def np_conv2d(x, w, bias=None):
    b, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    out = np.zeros((b, cout, h, wd))
    for bi in range(b):
        for o in range(cout):
            acc = np.zeros((h, wd))
            for c in range(cin):
                acc += correlate(x[bi, c], w[o, c], mode="constant", cval=0.0)
            if bias is not None:
                acc += bias[o]
            out[bi, o] = acc
    return out


def np_downsample2x(x):
    b, c, h, w = x.shape
    return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def np_upsample2x(x):
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def np_affine(x, scale, shift):
    return x * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]


# name -> (engine fn over Tensors, numpy float64 replica)
OPS = {
    "add": (T.add, lambda a, b: a + b),
    "sub": (T.sub, lambda a, b: a - b),
    "mul-elementwise": (T.mul, lambda a, b: a * b),
    "matmul": (T.matmul, lambda a, b: a @ b),
    "conv2d": (T.conv2d, np_conv2d),
    "silu": (T.silu, np_silu),
    "relu": (T.relu, lambda x: np.maximum(x, 0.0)),
    "mean": (T.mean, np.mean),
    "sum": (T.tsum, np.sum),
    "abs": (T.tabs, np.abs),
    "concat-channels": (T.concat_channels, lambda a, b: np.concatenate([a, b], axis=1)),
    "downsample2x": (T.downsample2x, np_downsample2x),
    "upsample2x": (T.upsample2x, np_upsample2x),
    "affine-scale-shift": (T.affine_scale_shift, np_affine),
}


def op_inputs(name, rng):
    """Random small float64 operands for each op-kind."""
    if name in ("add", "sub", "mul-elementwise"):
        shape = (3, 4)
        return [rng.normal(size=shape), rng.normal(size=shape)]
    if name == "matmul":
        return [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]
    if name == "conv2d":
        return [rng.normal(size=(2, 2, 6, 6)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)]
    if name == "concat-channels":
        return [rng.normal(size=(2, 2, 4, 4)), rng.normal(size=(2, 3, 4, 4))]
    if name in ("downsample2x", "upsample2x"):
        return [rng.normal(size=(2, 3, 4, 4))]
    if name == "affine-scale-shift":
        return [rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3)), rng.normal(size=(2, 3))]
    # unary elementwise / reductions
    return [rng.normal(size=(3, 5))]


def fd_grads(np_fn, inputs, proj, h=1e-5):
    """Central finite differences of proj . np_fn in float64."""

    def scalar(args):
        out = np.asarray(np_fn(*args), dtype=np.float64)
        return float(np.sum(out * proj))

    grads = []
    for i, base in enumerate(inputs):
        g = np.zeros_like(base, dtype=np.float64)
        flat = g.reshape(-1)
        for j in range(base.size):
            args_p = [a.copy() for a in inputs]
            args_m = [a.copy() for a in inputs]
            args_p[i].reshape(-1)[j] += h
            args_m[i].reshape(-1)[j] -= h
            flat[j] = (scalar(args_p) - scalar(args_m)) / (2 * h)
        grads.append(g)
    return grads


def check_op(name, rng, rtol=1e-3):
    """Run one random instance; return worst normwise relative error."""
    eng_fn, np_fn = OPS[name]
    inputs = op_inputs(name, rng)
    out_shape = np.asarray(np_fn(*inputs)).shape
    proj = rng.normal(size=out_shape) if out_shape else np.asarray(rng.normal())

    tensors = [T.Tensor(a, requires_grad=True) for a in inputs]
    out = eng_fn(*tensors)
    loss = T.tsum(T.mul(out, T.Tensor(proj)))
    loss.backward()

    fd = fd_grads(np_fn, inputs, proj)
    worst = 0.0
    for tns, g_ref in zip(tensors, fd):
        g = tns.grad.astype(np.float64)
        denom = np.linalg.norm(g_ref) + 1e-12
        worst = max(worst, np.linalg.norm(g - g_ref) / denom)
    assert worst < rtol, f"{name}: gradcheck relative error {worst:.2e} >= {rtol}"
    return worst
