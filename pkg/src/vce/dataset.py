"""Volumes to training samples: 2.5D conditioning stacks, difference-image
targets, modality-specific normalization, joint augmentation, and the
train/val/test split discipline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

__all__ = ["SlicePair", "Split", "extract_pairs", "normalize", "denormalize",
           "augment", "make_split"]

STACK_DEPTH = 7
_HALF = STACK_DEPTH // 2


@dataclass
class SlicePair:
    y: np.ndarray        # (H, W, 7) pre-contrast stack
    x: np.ndarray        # (H, W) post-contrast central slice
    diff: np.ndarray     # (H, W) post - pre at the central slice
    roi: np.ndarray      # (H, W) bool
    modality: str
    volume_id: int
    slice_index: int
    norm_factor: float = 1.0


@dataclass
class Split:
    train_ids: list
    val_ids: list
    test_ids: list

    def __post_init__(self):
        sets = [set(self.train_ids), set(self.val_ids), set(self.test_ids)]
        for i in range(3):
            for j in range(i + 1, 3):
                if sets[i] & sets[j]:
                    raise ValueError(f"split id sets overlap: {sets[i] & sets[j]}")


def extract_pairs(vol, volume_id=0):
    """One SlicePair per interior slice index d in [3, D-4]."""
    d = vol.pre.shape[2]
    if d < STACK_DEPTH:
        raise ValueError(f"need depth >= {STACK_DEPTH}, got {d}")
    pairs = []
    for di in range(_HALF, d - _HALF):
        stack = vol.pre[:, :, di - _HALF: di + _HALF + 1]
        post = vol.post[:, :, di]
        pre_c = vol.pre[:, :, di]
        pairs.append(SlicePair(
            y=np.ascontiguousarray(stack),
            x=post.copy(),
            diff=(post - pre_c).astype(np.float32),
            roi=vol.roi[:, :, di].copy(),
            modality=vol.modality,
            volume_id=volume_id,
            slice_index=di,
        ))
    return pairs


def normalize(pair):
    """T1w: scale y, x, diff by 1/max of the 2.5D pre stack. T1: identity."""
    if pair.modality != "T1w":
        return pair
    factor = float(pair.y.max())
    if factor <= 0:
        raise ValueError("T1w stack max must be positive")
    return replace(pair,
                   y=pair.y / factor,
                   x=pair.x / factor,
                   diff=pair.diff / factor,
                   norm_factor=factor)


def denormalize(pair):
    """Invert normalize(); exact up to float32 rounding."""
    f = pair.norm_factor
    if f == 1.0:
        return pair
    return replace(pair, y=pair.y * f, x=pair.x * f, diff=pair.diff * f,
                   norm_factor=1.0)


def augment(pair, rng, max_angle=15.0, crop=None):
    """Joint random rotation (quarter turns plus a small bilinear angle)
    and crop applied identically to y, x, diff, and roi."""
    k = int(rng.integers(0, 4))
    angle = float(rng.uniform(-max_angle, max_angle))
    y = np.rot90(pair.y, k, axes=(0, 1))
    imgs = [np.rot90(a, k, axes=(0, 1)) for a in (pair.x, pair.diff)]
    roi = np.rot90(pair.roi, k, axes=(0, 1))
    if angle != 0.0:
        y = ndimage.rotate(y, angle, axes=(0, 1), reshape=False, order=1, mode="nearest")
        imgs = [ndimage.rotate(a, angle, reshape=False, order=1, mode="nearest")
                for a in imgs]
        roi = ndimage.rotate(roi.astype(np.uint8), angle, reshape=False,
                             order=0, mode="nearest") > 0
    x, diff = imgs
    if crop is not None:
        ch, cw = crop
        h, w = x.shape
        if ch > h or cw > w:
            raise ValueError(f"crop {crop} larger than image {(h, w)}")
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        y = y[top:top + ch, left:left + cw]
        x = x[top:top + ch, left:left + cw]
        diff = diff[top:top + ch, left:left + cw]
        roi = roi[top:top + ch, left:left + cw]
    return replace(pair, y=np.ascontiguousarray(y, dtype=np.float32),
                   x=np.ascontiguousarray(x, dtype=np.float32),
                   diff=np.ascontiguousarray(diff, dtype=np.float32),
                   roi=np.ascontiguousarray(roi))


def make_split(volumes, n_train, n_test, seed=0):
    """Disjoint volume split; test volumes must carry a nonempty ROI.

    volumes: list of PhantomVolume; ids are list positions. Remaining
    volumes after train and test become validation.
    """
    n = len(volumes)
    if n_train + n_test > n:
        raise ValueError(f"split {n_train}+{n_test} exceeds {n} volumes")
    rng = np.random.default_rng(seed)
    ids = list(rng.permutation(n))
    with_roi = [i for i in ids if volumes[i].roi.any()]
    if len(with_roi) < n_test:
        raise ValueError(f"only {len(with_roi)} volumes have an ROI, need {n_test} for test")
    test_ids = with_roi[:n_test]
    rest = [i for i in ids if i not in set(test_ids)]
    train_ids = rest[:n_train]
    val_ids = rest[n_train:]
    return Split(train_ids=[int(i) for i in train_ids],
                 val_ids=[int(i) for i in val_ids],
                 test_ids=[int(i) for i in test_ids])


def test_pairs(volumes, split, stride=1):
    """Normalized test slices, filtered to those intersecting the ROI."""
    out = []
    for vid in split.test_ids:
        pairs = [p for p in extract_pairs(volumes[vid], volume_id=vid) if p.roi.any()]
        out.extend(normalize(p) for p in pairs[::stride])
    return out


def save_manifest(path, volume_files, split, seed):
    with open(path, "w") as f:
        json.dump({"volumes": list(volume_files), "seed": seed,
                   "split": {"train": split.train_ids, "val": split.val_ids,
                             "test": split.test_ids}}, f, indent=2, sort_keys=True)


def load_manifest(path):
    with open(path) as f:
        m = json.load(f)
    split = Split(train_ids=m["split"]["train"], val_ids=m["split"]["val"],
                  test_ids=m["split"]["test"])
    return m["volumes"], split, m["seed"]
