"""Slow, loop-based reference implementations used to cross-check metrics."""

import numpy as np
from scipy import stats


def dice_jaccard_ref(a, b):
    a = np.asarray(a, bool).ravel()
    b = np.asarray(b, bool).ravel()
    tp = fp = fn = 0
    for x, y in zip(a, b):
        if x and y:
            tp += 1
        elif x:
            fp += 1
        elif y:
            fn += 1
    if tp + fp + fn == 0:
        return 1.0, 1.0
    return 2 * tp / (2 * tp + fp + fn), tp / (tp + fp + fn)


def threshold_segment_ref(field, roi, p):
    """Top-k selection by explicit sort on (-|value|, raster index)."""
    field = np.asarray(field, np.float64).ravel()
    roi = np.asarray(roi, bool).ravel()
    cand = [(-abs(field[i]), i) for i in range(field.size) if roi[i]]
    k = int(np.floor(p / 100.0 * len(cand) + 0.5))
    k = max(1, min(k, len(cand)))
    cand.sort()
    mask = np.zeros(field.size, dtype=bool)
    for _, i in cand[:k]:
        mask[i] = True
    return mask.reshape(np.asarray(roi).shape if False else (-1,))


def pearson_ref(u, v):
    r, p = stats.pearsonr(np.asarray(u, np.float64), np.asarray(v, np.float64))
    return float(r), float(p)


def ssim_ref(a, b, data_range=1.0, size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Windowed SSIM by explicit loops over interior window positions."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    w /= w.sum()
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    h, wd = a.shape
    vals = []
    for i in range(h - size + 1):
        for j in range(wd - size + 1):
            pa = a[i:i + size, j:j + size]
            pb = b[i:i + size, j:j + size]
            ma = (w * pa).sum()
            mb = (w * pb).sum()
            va = (w * pa * pa).sum() - ma ** 2
            vb = (w * pb * pb).sum() - mb ** 2
            cov = (w * pa * pb).sum() - ma * mb
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2))
                        / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))
