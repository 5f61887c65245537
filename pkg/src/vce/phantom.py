"""Procedural paired pre/post-contrast brain phantoms.

Anatomy is a stack of nested smooth tissue ellipsoids plus tumor
ellipsoids with a partially enhancing rim. The same seed produces
geometrically identical anatomy and enhancement support in both
modalities; only the intensity mapping differs:

* T1 (quantitative): fixed physical range, enhancement darkens.
* T1w: per-volume scanner gain, enhancement brightens.

Voxel differences in the two modalities are proportional, so top-p%%
difference segmentations agree exactly in the noiseless case.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .tensor import load_vct, save_vct

__all__ = ["PhantomRecipe", "PhantomVolume", "generate", "paired_modalities",
           "save_volume", "load_volume", "write_pgm"]

T1_MIN, T1_MAX = 200.0, 4500.0        # simulated milliseconds
_T1_CONTRAST = T1_MAX - T1_MIN - 800.0  # span used by tissue mapping
_T1_ENHANCE = 1400.0                  # peak darkening inside enhancing voxels
_T1W_BASE, _T1W_SPAN = 100.0, 900.0
_T1W_ENHANCE = 550.0


@dataclass
class PhantomRecipe:
    height: int = 64
    width: int = 64
    depth: int = 16
    tissue_count: int = 3
    tumor_count: int = 3
    tumor_radius: tuple = (8.0, 14.0)
    enhancement_fraction: float = 0.42
    noise_sigma: float = 0.01          # fraction of tissue contrast
    modality: str = "T1"
    seed: int = 0

    def validate(self):
        if min(self.height, self.width, self.depth) < 16:
            raise ValueError(f"all extents must be >= 16, got "
                             f"{self.height}x{self.width}x{self.depth}")
        if not 0.0 <= self.enhancement_fraction <= 1.0:
            raise ValueError(f"enhancement fraction must lie in [0, 1], "
                             f"got {self.enhancement_fraction}")
        if self.tumor_count == 0 and self.enhancement_fraction > 0:
            raise ValueError("recipe requests enhancement but has no tumors")
        if self.modality not in ("T1", "T1w"):
            raise ValueError(f"unknown modality {self.modality!r}")
        if not 2 <= self.tissue_count <= 4:
            raise ValueError("tissue count must be 2..4")


@dataclass
class PhantomVolume:
    pre: np.ndarray      # (H, W, D) float32
    post: np.ndarray     # (H, W, D) float32
    roi: np.ndarray      # (H, W, D) bool
    modality: str
    seed: int


def _ellipsoid_r2(shape, center, semiaxes):
    """Squared normalized radius field for one ellipsoid."""
    h, w, d = shape
    yy, xx, zz = np.meshgrid(np.arange(h), np.arange(w), np.arange(d), indexing="ij")
    return (((yy - center[0]) / semiaxes[0]) ** 2
            + ((xx - center[1]) / semiaxes[1]) ** 2
            + ((zz - center[2]) / semiaxes[2]) ** 2)


def _anatomy(recipe, rng):
    """Shared geometry: tissue signal field, ROI mask, enhancement field.

    Returns (signal, roi, enh) where signal is in [0, 1], enh >= 0 is
    nonzero exactly on the selected enhancing subset of the ROI, and the
    nonzero fraction of the ROI matches the recipe target up to rounding.
    """
    shape = (recipe.height, recipe.width, recipe.depth)
    h, w, d = shape
    center = np.array([h / 2, w / 2, d / 2]) + rng.uniform(-1.5, 1.5, 3)

    signal = np.full(shape, 0.05, dtype=np.float64)  # background
    semi = np.array([h, w, d]) * 0.42
    levels = rng.uniform(0.2, 0.9, size=recipe.tissue_count)
    for i in range(recipe.tissue_count):
        r2 = _ellipsoid_r2(shape, center + rng.uniform(-1.0, 1.0, 3),
                           semi * (1.0 - 0.18 * i) * rng.uniform(0.95, 1.05, 3))
        signal[r2 <= 1.0] = levels[i]
    # smooth radial texture so tissue is not piecewise constant
    signal += 0.05 * gaussian_filter(rng.standard_normal(shape), sigma=4.0)
    signal = np.clip(signal, 0.02, 0.98)

    roi = np.zeros(shape, dtype=bool)
    rim = np.zeros(shape, dtype=np.float64)
    for _ in range(recipe.tumor_count):
        rad = rng.uniform(*recipe.tumor_radius)
        c = center + rng.uniform(-0.22, 0.22, 3) * np.array([h, w, d])
        c[2] = np.clip(c[2], d * 0.25, d * 0.75)
        ax = rad * rng.uniform(0.7, 1.3, 3)
        ax[2] = max(2.0, ax[2] * d / max(h, w))
        r2 = _ellipsoid_r2(shape, c, ax)
        inside = r2 <= 1.0
        roi |= inside
        # rim-weighted propensity: strongest near the boundary
        rim = np.maximum(rim, np.where(inside, np.sqrt(np.clip(r2, 0.0, 1.0)), 0.0))

    # tumor tissue sits mid-range so enhancement never leaves the physical range
    signal = np.where(roi, 0.45 + 0.2 * (signal - 0.5), signal)

    enh = np.zeros(shape, dtype=np.float64)
    if recipe.enhancement_fraction > 0 and roi.any():
        # mostly geometric (rim-dominated) so enhancement is predictable
        # from visible anatomy; the small random field keeps supports from
        # being perfectly sharp
        propensity = rim + 0.08 * gaussian_filter(rng.standard_normal(shape), sigma=2.0)
        vals = propensity[roi]
        k = int(round(recipe.enhancement_fraction * vals.size))
        k = max(1, min(k, vals.size))
        cut = np.sort(vals)[vals.size - k]
        support = roi & (propensity >= cut)
        # magnitude: smooth positive profile over the support
        mag = 0.3 + 0.7 * (propensity - cut + 0.05) / (propensity.max() - cut + 0.05)
        enh[support] = np.clip(mag[support], 0.05, 1.0)
    return signal, roi, enh


def generate(recipe: PhantomRecipe) -> PhantomVolume:
    """Deterministic phantom volume for (recipe, seed)."""
    recipe.validate()
    ss = np.random.SeedSequence(recipe.seed)
    rng_geom, rng_gain, rng_noise = (np.random.default_rng(s) for s in ss.spawn(3))
    signal, roi, enh = _anatomy(recipe, rng_geom)

    if recipe.modality == "T1":
        pre = T1_MIN + 300.0 + _T1_CONTRAST * (1.0 - signal)
        post = pre - _T1_ENHANCE * enh
        contrast = _T1_CONTRAST
        rng_gain.uniform(0.5, 2.0)  # keep stream alignment with T1w
    else:
        gain = rng_gain.uniform(0.5, 2.0)
        pre = gain * (_T1W_BASE + _T1W_SPAN * signal)
        post = pre + gain * _T1W_ENHANCE * enh
        contrast = gain * _T1W_SPAN

    if recipe.noise_sigma > 0:
        sd = recipe.noise_sigma * contrast
        pre = pre + sd * rng_noise.standard_normal(pre.shape)
        post = post + sd * rng_noise.standard_normal(post.shape)
        if recipe.modality == "T1":
            pre = np.clip(pre, T1_MIN, T1_MAX)
            post = np.clip(post, T1_MIN, T1_MAX)
        else:
            np.maximum(pre, 1e-3, out=pre)
            np.maximum(post, 1e-3, out=post)

    return PhantomVolume(pre=pre.astype(np.float32), post=post.astype(np.float32),
                         roi=roi, modality=recipe.modality, seed=recipe.seed)


def paired_modalities(seed, recipe):
    """Same anatomy rendered in both modalities."""
    kw = asdict(recipe)
    kw["seed"] = seed
    t1 = generate(PhantomRecipe(**{**kw, "modality": "T1"}))
    t1w = generate(PhantomRecipe(**{**kw, "modality": "T1w"}))
    return t1, t1w


# ---------------------------------------------------------------------------
# persistence

def save_volume(vol, prefix, recipe=None):
    """Write pre/post/roi .vct files plus a JSON sidecar."""
    prefix = str(prefix)
    save_vct(prefix + ".pre.vct", vol.pre)
    save_vct(prefix + ".post.vct", vol.post)
    save_vct(prefix + ".roi.vct", vol.roi.astype(np.float32))
    sidecar = {"modality": vol.modality, "seed": vol.seed}
    if recipe is not None:
        sidecar["recipe"] = asdict(recipe)
    with open(prefix + ".json", "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)


def load_volume(prefix):
    prefix = str(prefix)
    with open(prefix + ".json") as f:
        sidecar = json.load(f)
    return PhantomVolume(
        pre=load_vct(prefix + ".pre.vct"),
        post=load_vct(prefix + ".post.vct"),
        roi=load_vct(prefix + ".roi.vct") > 0.5,
        modality=sidecar["modality"],
        seed=sidecar["seed"],
    )


def write_pgm(path, image):
    """8-bit max-normalized P5 export of one slice."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = img.min(), img.max()
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    data = np.round((img - lo) * scale).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(data.tobytes())
