"""Tour of the synthetic phantom generator.

Generates one paired pre/post volume in each modality, checks the headline
invariants by hand, and exports a few PGM slices for eyeballing.
"""

import os

import numpy as np

from vce.phantom import PhantomRecipe, paired_modalities, write_pgm

out = os.path.join(os.path.dirname(__file__), "out", "phantom")
os.makedirs(out, exist_ok=True)

recipe = PhantomRecipe(seed=7, noise_sigma=0.0)
t1, t1w = paired_modalities(7, recipe)

print(f"volume shape      {t1.pre.shape}, ROI voxels {int(t1.roi.sum())}")
print(f"T1 range          [{t1.pre.min():.0f}, {t1.pre.max():.0f}] ms")
print(f"T1w range         [{t1w.pre.min():.1f}, {t1w.pre.max():.1f}] (scanner units)")

# enhancement darkens T1 and brightens T1w on exactly the same voxels
d1, dw = t1.post - t1.pre, t1w.post - t1w.pre
support = d1 != 0
assert np.array_equal(support, dw != 0)
print(f"enhancing voxels  {int(support.sum())} "
      f"({support.sum() / t1.roi.sum():.0%} of ROI, target 42%)")
print(f"T1 diff sign      {np.sign(d1[support]).mean():+.0f} (darkens)")
print(f"T1w diff sign     {np.sign(dw[support]).mean():+.0f} (brightens)")

mid = t1.pre.shape[2] // 2
for name, img in (("t1_pre", t1.pre), ("t1_post", t1.post),
                  ("t1w_pre", t1w.pre), ("t1w_post", t1w.post)):
    write_pgm(os.path.join(out, f"{name}_slice{mid}.pgm"), img[:, :, mid])
write_pgm(os.path.join(out, f"diff_slice{mid}.pgm"), np.abs(d1[:, :, mid]))
print(f"wrote slices to   {out}")
