"""Evaluation metrics: MAE/rMAE, windowed SSIM, Pearson correlation with
the zero-difference skip rule, percentile-threshold segmentation, Dice and
Jaccard scores, and the threshold sweep over 1-30%.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc

__all__ = ["mae", "ssim", "pearson", "relative_error", "threshold_segment",
           "dice_jaccard", "sweep", "SegmentationMask", "write_report_csv"]


def mae(pred, target, mask=None):
    """Mean absolute error, optionally restricted to a mask (rMAE)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"mae: shape mismatch {pred.shape} vs {target.shape}")
    err = np.abs(pred - target)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != pred.shape:
            raise ValueError(f"mae: mask shape {mask.shape} vs {pred.shape}")
        if not mask.any():
            raise ValueError("mae: empty mask")
        err = err[mask]
    return float(err.mean())


def _gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _windowed_stats(img, window):
    """Gaussian-weighted local mean over all fully interior window positions."""
    k = window.shape[0]
    h, w = img.shape
    oh, ow = h - k + 1, w - k + 1
    s = img.strides
    patches = np.lib.stride_tricks.as_strided(img, (oh, ow, k, k), (s[0], s[1], s[0], s[1]))
    return np.einsum("ijkl,kl->ij", patches, window)


def ssim(a, b, data_range=1.0, window_size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean local SSIM with an 11x11 Gaussian window (sigma 1.5).

    Local statistics are Gaussian-weighted and evaluated only where the
    window fits entirely inside the image.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < window_size:
        raise ValueError(f"ssim: image {a.shape} smaller than {window_size}x{window_size} window")
    win = _gaussian_window(window_size, sigma)
    mu_a = _windowed_stats(a, win)
    mu_b = _windowed_stats(b, win)
    var_a = _windowed_stats(a * a, win) - mu_a ** 2
    var_b = _windowed_stats(b * b, win) - mu_b ** 2
    cov = _windowed_stats(a * b, win) - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def pearson(u, v, skip_mask=None):
    """Pearson r and two-sided p-value (t distribution, n-2 dof).

    skip_mask marks entries excluded from the correlation (the paper's
    rule for voxels with zero pre-post difference).
    """
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"pearson: length mismatch {u.size} vs {v.size}")
    if skip_mask is not None:
        keep = ~np.asarray(skip_mask, dtype=bool).ravel()
        u, v = u[keep], v[keep]
    n = u.size
    if n < 3:
        raise ValueError(f"pearson: need at least 3 points after skipping, got {n}")
    du = u - u.mean()
    dv = v - v.mean()
    su = np.sqrt(np.sum(du * du))
    sv = np.sqrt(np.sum(dv * dv))
    if su == 0.0:
        raise ValueError("pearson: first argument has zero variance")
    if sv == 0.0:
        raise ValueError("pearson: second argument has zero variance")
    r = float(np.clip(np.sum(du * dv) / (su * sv), -1.0, 1.0))
    if abs(r) == 1.0:
        return r, 0.0
    # two-sided p via the regularized incomplete beta function
    dof = n - 2
    t2 = dof * r * r / (1.0 - r * r)
    p = float(betainc(dof / 2.0, 0.5, dof / (dof + t2)))
    return r, p


def relative_error(mean_pred, post, pre):
    """|mean - post| / |pre - post| plus the skip mask where pre == post."""
    mean_pred = np.asarray(mean_pred, dtype=np.float64)
    post = np.asarray(post, dtype=np.float64)
    pre = np.asarray(pre, dtype=np.float64)
    if not (mean_pred.shape == post.shape == pre.shape):
        raise ValueError("relative_error: shape mismatch")
    denom = np.abs(pre - post)
    skip = denom == 0.0
    re = np.zeros_like(denom)
    np.divide(np.abs(mean_pred - post), denom, out=re, where=~skip)
    return re, skip


@dataclass
class SegmentationMask:
    mask: np.ndarray       # binary, same shape as the field
    percentile: float
    source: str = "ground-truth"


def threshold_segment(diff_field, roi, p, source="ground-truth"):
    """Top-p% |difference| voxels inside the ROI; ties broken in raster order."""
    diff_field = np.asarray(diff_field, dtype=np.float64)
    roi = np.asarray(roi, dtype=bool)
    if diff_field.shape != roi.shape:
        raise ValueError("threshold_segment: shape mismatch")
    if not 0.0 < p <= 30.0:
        raise ValueError(f"threshold_segment: percentile {p} outside (0, 30]")
    idx = np.flatnonzero(roi.ravel())
    if idx.size == 0:
        raise ValueError("threshold_segment: empty ROI")
    vals = np.abs(diff_field.ravel()[idx])
    k = int(np.floor(p / 100.0 * idx.size + 0.5))
    k = max(1, min(k, idx.size))
    # stable sort on -value keeps raster order among ties
    order = np.argsort(-vals, kind="stable")
    mask = np.zeros(diff_field.size, dtype=bool)
    mask[idx[order[:k]]] = True
    return SegmentationMask(mask=mask.reshape(diff_field.shape), percentile=float(p),
                            source=source)


def dice_jaccard(pred_mask, gt_mask):
    """(Dice, Jaccard); both-empty masks score 1 by convention."""
    a = _as_mask(pred_mask)
    b = _as_mask(gt_mask)
    if a.shape != b.shape:
        raise ValueError(f"dice_jaccard: shape mismatch {a.shape} vs {b.shape}")
    tp = int(np.sum(a & b))
    fp = int(np.sum(a & ~b))
    fn = int(np.sum(~a & b))
    if tp + fp + fn == 0:
        return 1.0, 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn), tp / (tp + fp + fn)


def _as_mask(m):
    if isinstance(m, SegmentationMask):
        return m.mask.astype(bool)
    return np.asarray(m, dtype=bool)


def sweep(gt_diffs, pred_diffs, rois, thresholds=range(1, 31)):
    """Dice/Jaccard curves of predicted vs ground-truth segmentations.

    gt_diffs: list of ground-truth difference slices; pred_diffs: mapping
    model name -> list of predicted difference slices; rois: matching ROI
    masks. Returns rows (model, threshold, dice, jaccard) averaged over
    slices.
    """
    rows = []
    for model, preds in pred_diffs.items():
        if len(preds) != len(gt_diffs):
            raise ValueError(f"sweep: {model} has {len(preds)} slices vs {len(gt_diffs)}")
        for p in thresholds:
            dices, jacs = [], []
            for gt, pred, roi in zip(gt_diffs, preds, rois):
                gt_seg = threshold_segment(gt, roi, p)
                pr_seg = threshold_segment(pred, roi, p, source=model)
                d, j = dice_jaccard(pr_seg, gt_seg)
                dices.append(d)
                jacs.append(j)
            rows.append({"model": model, "threshold": int(p),
                         "dice": float(np.mean(dices)), "jaccard": float(np.mean(jacs))})
    return rows


def write_report_csv(path, rows, fieldnames=None):
    """Deterministic CSV emission (fixed field order, repr-stable floats)."""
    if not rows:
        raise ValueError("no rows to write")
    if fieldnames is None:
        fieldnames = list(rows[0].keys())
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row.get(k)) for k in fieldnames})


def _fmt(v):
    if isinstance(v, float):
        return format(v, ".9g")
    return v


def plot_sweep_svg(path, rows):
    """Self-contained SVG of the Dice/Jaccard threshold curves."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    models = sorted({r["model"] for r in rows})
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for metric, ax in zip(("dice", "jaccard"), axes):
        for m in models:
            pts = sorted((r["threshold"], r[metric]) for r in rows if r["model"] == m)
            ax.plot([p[0] for p in pts], [p[1] for p in pts], label=m)
        ax.set_xlabel("outlier threshold [%]")
        ax.set_ylabel(metric)
        ax.set_ylim(0, 1.05)
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
