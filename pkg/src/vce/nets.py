"""Reduced conditional U-Net used in three roles: end-to-end difference
predictor, diffusion noise predictor, and flow-matching velocity field.

Three encoder levels of conv-silu blocks with 2x average-pool
downsampling, a mirrored decoder with nearest-neighbor upsampling and
skip concatenation, and a zero-initialized 1x1 output head (so the E2E
prediction starts at identity enhancement and the flow field at zero
drift). Generative roles concatenate the state to the conditioning stack
and inject a sinusoidal time embedding through per-block scale-shift.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = ["UNetLite", "sinusoidal_embedding"]

EMBED_WIDTH = 32


def sinusoidal_embedding(t, width=EMBED_WIDTH):
    """(B, width) sinusoidal features of t in [0, 1]."""
    t = np.asarray(t, dtype=np.float32).reshape(-1, 1)
    half = width // 2
    freqs = np.exp(np.linspace(0.0, np.log(1000.0), half)).astype(np.float32)
    ang = t * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class UNetLite:
    """Conditional U-Net on the autodiff tensor engine."""

    def __init__(self, in_channels=7, base_channels=16, levels=3,
                 time_conditioned=False, seed=0, role="e2e"):
        if levels < 1:
            raise ValueError("need at least one level")
        self.in_channels = in_channels
        self.base_channels = base_channels
        self.levels = levels
        self.time_conditioned = time_conditioned
        self.role = role
        self.epoch = 0
        self.params = {}
        rng = np.random.default_rng(seed)
        chans = [base_channels * 2 ** i for i in range(levels)]
        self.chans = chans

        def conv_param(name, cin, cout, k=3):
            std = np.sqrt(2.0 / (cin * k * k))
            self.params[name + ".w"] = Tensor(
                rng.normal(0.0, std, size=(cout, cin, k, k)), requires_grad=True)
            self.params[name + ".b"] = Tensor(np.zeros(cout), requires_grad=True)

        def film_param(name, cout):
            # small init keeps the embedding non-degenerate without swamping activations
            self.params[name + ".w"] = Tensor(
                rng.normal(0.0, 0.02, size=(EMBED_WIDTH + 1, 2 * cout)), requires_grad=True)

        c_prev = in_channels
        for i, c in enumerate(chans):
            conv_param(f"enc{i}.c1", c_prev, c)
            conv_param(f"enc{i}.c2", c, c)
            if time_conditioned:
                film_param(f"enc{i}.film", c)
            c_prev = c
        for i in reversed(range(levels - 1)):
            cin = chans[i + 1] + chans[i]  # upsampled features + skip
            conv_param(f"dec{i}.c1", cin, chans[i])
            conv_param(f"dec{i}.c2", chans[i], chans[i])
            if time_conditioned:
                film_param(f"dec{i}.film", chans[i])
        # zero-initialized head
        self.params["head.w"] = Tensor(np.zeros((1, chans[0], 1, 1)), requires_grad=True)
        self.params["head.b"] = Tensor(np.zeros(1), requires_grad=True)

    def parameters(self):
        return list(self.params.values())

    def parameter_count(self):
        return sum(p.size for p in self.parameters())

    def _block(self, h, name, emb):
        h = T.silu(T.conv2d(h, self.params[f"{name}.c1.w"], self.params[f"{name}.c1.b"]))
        if emb is not None:
            cond = T.matmul(emb, self.params[f"{name}.film.w"])
            c = h.data.shape[1]
            scale = _slice_cols(cond, 0, c)
            shift = _slice_cols(cond, c, 2 * c)
            h = T.affine_scale_shift(h, scale, shift)
        return T.silu(T.conv2d(h, self.params[f"{name}.c2.w"], self.params[f"{name}.c2.b"]))

    def __call__(self, x, y=None, t=None):
        """Forward pass; x (B,C,H,W) numpy or Tensor.

        For generative roles pass the state x, the conditioning stack y,
        and per-sample times t in [0, 1]; the state is concatenated to y
        on channels.
        """
        x = x if isinstance(x, Tensor) else Tensor(x)
        if y is not None:
            y = y if isinstance(y, Tensor) else Tensor(y)
            x = T.concat_channels(x, y)
        b, c, h, w = x.data.shape
        if c != self.in_channels:
            raise T.ShapeError(f"expected {self.in_channels} input channels, got {c}")
        div = 2 ** (self.levels - 1)
        if h % div or w % div:
            raise T.ShapeError(f"spatial extents must be divisible by {div}, got {h}x{w}")

        emb = None
        if self.time_conditioned:
            if t is None:
                raise ValueError("time-conditioned network needs t")
            t = np.asarray(t, dtype=np.float32).reshape(-1)
            if np.any(t < 0.0) or np.any(t > 1.0):
                raise ValueError(f"t out of range [0, 1]: {t}")
            e = sinusoidal_embedding(t)
            emb = Tensor(np.concatenate([e, np.ones((e.shape[0], 1), np.float32)], axis=1))
        elif t is not None:
            raise ValueError("network is not time-conditioned but t was given")

        skips = []
        hcur = x
        for i in range(self.levels):
            hcur = self._block(hcur, f"enc{i}", emb)
            if i < self.levels - 1:
                skips.append(hcur)
                hcur = T.downsample2x(hcur)
        for i in reversed(range(self.levels - 1)):
            hcur = T.upsample2x(hcur)
            hcur = T.concat_channels(hcur, skips[i])
            hcur = self._block(hcur, f"dec{i}", emb)
        return T.conv2d(hcur, self.params["head.w"], self.params["head.b"])

    # ------------------------------------------------------------------
    # checkpoints: JSON header + one flat .vct parameter bundle

    def hyperparams(self):
        return {"in_channels": self.in_channels, "base_channels": self.base_channels,
                "levels": self.levels, "time_conditioned": self.time_conditioned}

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        names = sorted(self.params)
        header = {
            "hyperparams": self.hyperparams(),
            "role": self.role,
            "epoch": self.epoch,
            "params": [{"name": n, "shape": list(self.params[n].shape)} for n in names],
        }
        with open(os.path.join(directory, "header.json"), "w") as f:
            json.dump(header, f, indent=2, sort_keys=True)
        flat = np.concatenate([self.params[n].data.ravel() for n in names])
        T.save_vct(os.path.join(directory, "params.vct"), flat)

    @classmethod
    def load(cls, directory):
        with open(os.path.join(directory, "header.json")) as f:
            header = json.load(f)
        net = cls(seed=0, role=header["role"], **header["hyperparams"])
        net.epoch = header["epoch"]
        flat = T.load_vct(os.path.join(directory, "params.vct"))
        off = 0
        for entry in header["params"]:
            n, shape = entry["name"], tuple(entry["shape"])
            size = int(np.prod(shape)) if shape else 1
            net.params[n].data = flat[off:off + size].reshape(shape).astype(np.float32)
            off += size
        if off != flat.size:
            raise ValueError(f"checkpoint size mismatch: used {off} of {flat.size}")
        return net


def _slice_cols(t, a, b):
    """Column slice of a 2D tensor as a differentiable view."""
    out = Tensor(t.data[:, a:b])

    def backward(g):
        full = np.zeros_like(t.data)
        full[:, a:b] = g
        t._accumulate(full)

    return T._track(out, (t,), backward)
