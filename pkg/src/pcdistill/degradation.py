"""Degradation operators: reduce a predicted complete cloud back toward a
partial observation so the prediction can be scored against it.

The default is the k-mask (keep, for each partial point, its k nearest
predicted points); tau-ball, voxel-occupancy and random-downsample variants
exist for ablations. Selection is a hard index mask: training treats the
indices as constants and lets gradients flow only to the selected points.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import kernels
from .geometry import PointCloud

METHODS = ("k_mask", "voxel_mask", "tau_mask", "random_downsample")


@dataclass
class DegradationConfig:
    method: str = "k_mask"
    k: int = 4
    tau: float = 0.05
    voxel_resolution: int = 32
    output_size: int = 2048
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown degradation method {self.method!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.voxel_resolution < 2:
            raise ValueError("voxel_resolution must be >= 2")
        if self.output_size < 1:
            raise ValueError("output_size must be >= 1")


def voxel_indices(points: np.ndarray, resolution: int) -> np.ndarray:
    """Integer cell triples on a uniform grid over [-1, 1]^3."""
    cells = np.floor((points + 1.0) / 2.0 * resolution).astype(np.int64)
    return np.clip(cells, 0, resolution - 1)


def selection_indices(
    predicted: np.ndarray, partial: np.ndarray, cfg: DegradationConfig, rng: np.random.Generator
) -> Tuple[np.ndarray, bool]:
    """Indices into `predicted` kept by the configured mask (sorted, unique).

    Returns (indices, fallback_flag); the flag is set when the mask selected
    nothing and the single globally nearest predicted point was used instead.
    """
    if cfg.method == "k_mask":
        k = min(cfg.k, len(predicted))
        idx, _ = kernels.knn(partial, predicted, k)
        sel = np.unique(idx.ravel())
    elif cfg.method == "tau_mask":
        _, d2 = kernels.nn1(predicted, partial)
        sel = np.flatnonzero(d2 <= cfg.tau**2)
    elif cfg.method == "voxel_mask":
        res = cfg.voxel_resolution
        occupied = {tuple(c) for c in voxel_indices(partial, res)}
        cells = voxel_indices(predicted, res)
        sel = np.array(
            [i for i, c in enumerate(cells) if tuple(c) in occupied], dtype=np.int64
        )
    else:  # random_downsample
        size = min(len(partial), len(predicted))
        sel = np.sort(rng.choice(len(predicted), size=size, replace=False))

    if len(sel) == 0:
        idx, d2 = kernels.nn1(partial, predicted)
        sel = np.array([idx[np.argmin(d2)]], dtype=np.int64)
        return sel, True
    return sel.astype(np.int64), False


def resample_indices(count: int, output_size: int, rng: np.random.Generator) -> np.ndarray:
    """Indices resampling `count` selected points to exactly `output_size`."""
    if count == output_size:
        return np.arange(count, dtype=np.int64)
    if count > output_size:
        return np.sort(rng.choice(count, size=output_size, replace=False))
    extra = rng.choice(count, size=output_size - count, replace=True)
    return np.concatenate([np.arange(count, dtype=np.int64), extra])


def degrade(predicted: PointCloud, partial: PointCloud, cfg: DegradationConfig) -> PointCloud:
    """Degrade a predicted complete cloud to a pseudo-partial cloud."""
    rng = np.random.default_rng(cfg.seed)
    sel, fell_back = selection_indices(predicted.points, partial.points, cfg, rng)
    if fell_back:
        warnings.warn(
            f"{cfg.method} selected no points; fell back to the nearest predicted point"
        )
    res = resample_indices(len(sel), cfg.output_size, rng)
    pts = predicted.points[sel][res]
    return PointCloud(pts, category=partial.category, id=partial.id, pair_id=partial.pair_id)
