"""Training loops for the three model roles.

All roles share the difference-image target: the network sees the
normalized 2.5D pre-contrast stack and learns post - pre at the central
slice. T1 inputs keep their physical scale on disk; for the networks they
are converted by a fixed unit constant so activations stay O(1). This is
a unit choice, not a data-dependent normalization, and is inverted on
prediction.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .diffusion import dsm_loss, sampling_t_max
from .flowmatch import cfm_loss
from .tensor import Adam

__all__ = ["model_scale", "pairs_to_arrays", "train_model", "predict_e2e",
           "warm_start_from", "DIFF_GAIN", "INPUT_SHIFT"]

T1_UNIT = 1.0 / 4500.0   # fixed millisecond-to-model-unit conversion

# fixed affine offset removed from the conditioning stack: both modalities
# produce all-positive images near this level, and centering the network
# input markedly shortens the early training plateau
INPUT_SHIFT = 0.5

# generative roles model diff * DIFF_GAIN so the target is O(1) against the
# unit-variance latent; inverted after sampling
DIFF_GAIN = 15.0


def model_scale(modality):
    return T1_UNIT if modality == "T1" else 1.0


def pairs_to_arrays(pairs):
    """Stack normalized SlicePairs into (Y, D) model-unit arrays.

    Y: (N, 7, H, W) conditioning; D: (N, 1, H, W) difference targets.
    """
    if not pairs:
        raise ValueError("no slice pairs")
    scale = model_scale(pairs[0].modality)
    y = np.stack([np.transpose(p.y, (2, 0, 1)) for p in pairs]).astype(np.float32) * scale
    d = np.stack([p.diff[None] for p in pairs]).astype(np.float32) * scale
    return y - INPUT_SHIFT, d


def _batches(n, batch_size, rng):
    idx = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield idx[i:i + batch_size]


def train_model(net, pairs, role, epochs, rng, batch_size=8, lr=1e-3,
                schedule=None, log_every=1, augment_fn=None,
                lr_decay="cosine"):
    """Train one network in role 'e2e', 'dm', or 'fm'.

    lr_decay 'cosine' anneals the step size to zero over the whole run,
    which damps the late-training oscillations Adam shows on these small
    models; 'none' keeps it constant. Returns a list of (epoch, mean_loss)
    rows. Raises FloatingPointError on a non-finite loss.
    """
    if role not in ("e2e", "dm", "fm"):
        raise ValueError(f"unknown role {role!r}")
    if role == "dm" and schedule is None:
        raise ValueError("diffusion training needs a noise schedule")
    if lr_decay not in ("cosine", "none"):
        raise ValueError(f"unknown lr_decay {lr_decay!r}")
    opt = Adam(net.parameters(), lr=lr)
    t_max = sampling_t_max(schedule) if role == "dm" else None
    steps_per_epoch = -(-len(pairs) // batch_size)
    total_steps = max(epochs * steps_per_epoch, 1)
    step = 0
    log = []
    for epoch in range(1, epochs + 1):
        cur = pairs if augment_fn is None else [augment_fn(p, rng) for p in pairs]
        ys, ds = pairs_to_arrays(cur)
        losses = []
        for sel in _batches(len(cur), batch_size, rng):
            if lr_decay == "cosine":
                opt.lr = lr * (0.5 + 0.5 * np.cos(np.pi * step / total_steps))
            step += 1
            yb, db = ys[sel], ds[sel]
            if role == "e2e":
                pred = net(yb)
                loss = T.mean(T.tabs(T.sub(pred, T.Tensor(db))))
            elif role == "dm":
                loss = dsm_loss(net, db * DIFF_GAIN, yb, rng, schedule, t_max)
            else:
                loss = cfm_loss(net, db * DIFF_GAIN, yb, rng)
            lval = float(loss.data)
            if not np.isfinite(lval):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            opt.step()
            losses.append(lval)
        net.epoch = epoch
        if epoch % log_every == 0 or epoch == epochs:
            log.append({"epoch": epoch, "loss": float(np.mean(losses))})
    return log


def warm_start_from(net, source):
    """Initialize a generative net's feature weights from a trained E2E net.

    The conditioning-to-feature pathway (every conv weight and bias) is the
    part both roles share; copying it spares the generative net the long
    plateau of relearning the enhancement features from scratch. The first
    conv of the generative net sees [state, conditioning] on channels, so
    the source's input channels land at offset 1 while the state channel
    keeps its fresh init; FiLM and head parameters also stay fresh.
    """
    if net.in_channels != source.in_channels + 1:
        raise ValueError(
            f"warm start needs one extra (state) channel: "
            f"{net.in_channels} vs source {source.in_channels}")
    for name, p in source.params.items():
        if name.startswith("head."):
            continue
        dst = net.params.get(name)
        if dst is None:
            continue
        if name == "enc0.c1.w":
            dst.data[:, 1:] = p.data
        elif dst.data.shape == p.data.shape:
            dst.data[...] = p.data


def predict_e2e(net, pairs):
    """Difference predictions per pair, back in normalized units."""
    ys, _ = pairs_to_arrays(pairs)
    scale = model_scale(pairs[0].modality)
    with T.no_grad():
        out = net(ys)
    return [out.data[i, 0] / scale for i in range(len(pairs))]
