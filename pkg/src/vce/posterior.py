"""Posterior-sample aggregation: ensemble mean as the prediction surface
and per-voxel population standard deviation as the uncertainty map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["PosteriorEnsemble", "aggregate"]


@dataclass
class PosteriorEnsemble:
    samples: np.ndarray      # (N, H, W)
    mean: np.ndarray         # (H, W)
    stddev: np.ndarray       # (H, W), population
    model: str = "FM"
    condition_id: int = -1


def aggregate(samples, model="FM", condition_id=-1):
    """Reduce N congruent samples to mean and population stddev maps."""
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim < 2 or arr.shape[0] < 2:
        raise ValueError(f"need at least 2 congruent samples, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError("non-finite sample values")
    # center on the first sample so identical inputs give exactly zero spread
    shifted = arr - arr[0]
    mean = arr[0] + shifted.mean(axis=0)
    stddev = shifted.std(axis=0)  # population (ddof=0)
    return PosteriorEnsemble(samples=arr.astype(np.float32),
                             mean=mean.astype(np.float32),
                             stddev=stddev.astype(np.float32),
                             model=model, condition_id=condition_id)


def reconstruct(ensemble, pre_central, norm_factor=1.0):
    """Invert difference learning: post = (pre + mean) * norm_factor.

    pre_central and the ensemble are in normalized units; norm_factor is
    the recorded T1w scale (1.0 for T1).
    """
    post = np.asarray(pre_central, dtype=np.float64) + ensemble.mean.astype(np.float64)
    return (post * norm_factor).astype(np.float32)
