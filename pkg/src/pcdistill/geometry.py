"""Point-cloud values and the evaluation/training distances.

Clouds are plain (n, 3) float64 arrays wrapped in :class:`PointCloud`.
Nearest-neighbor work is delegated to :mod:`pcdistill.kernels` (compiled
when available). Differentiable chamfer for training lives in
:mod:`pcdistill.losses`; the functions here are the metric-grade forward
path and agree with it numerically.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import kernels

EMD_MAX_POINTS = 512


def _as_points(arr) -> np.ndarray:
    pts = np.ascontiguousarray(arr, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must have shape (n, 3), got {pts.shape}")
    if pts.shape[0] < 1:
        raise ValueError("point cloud must contain at least one point")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud contains non-finite coordinates")
    return pts


@dataclass
class PointCloud:
    """Fixed-size set of 3D points with optional category label and id."""

    points: np.ndarray
    category: Optional[int] = None
    id: Optional[str] = None
    pair_id: Optional[int] = None

    def __post_init__(self):
        self.points = _as_points(self.points)

    def __len__(self) -> int:
        return self.points.shape[0]

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(points, category=self.category, id=self.id, pair_id=self.pair_id)


@dataclass
class MetricConfig:
    gamma: float = 1.0  # directional balance of the chamfer loss
    f1_threshold: float = 0.01
    emd_enabled: bool = False

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.f1_threshold <= 0:
            raise ValueError("f1_threshold must be positive")


class NormalizeResult(NamedTuple):
    cloud: PointCloud
    center: np.ndarray
    scale: float
    degenerate: bool


def normalize(cloud: PointCloud) -> NormalizeResult:
    """Center at the origin and scale so the farthest point has norm 1.

    Degenerate clouds (all points identical) keep scale 1 and are flagged.
    ``original = normalized * scale + center`` holds within float precision.
    """
    pts = cloud.points
    center = pts.mean(axis=0)
    shifted = pts - center
    scale = float(np.max(np.linalg.norm(shifted, axis=1)))
    degenerate = scale <= 0.0
    if degenerate:
        scale = 1.0
    out = cloud.with_points(shifted / scale)
    return NormalizeResult(out, center, scale, degenerate)


def denormalize(cloud: PointCloud, center: np.ndarray, scale: float) -> PointCloud:
    return cloud.with_points(cloud.points * scale + np.asarray(center, dtype=np.float64))


def nearest_neighbors(query: PointCloud, reference: PointCloud, k: int):
    """k nearest reference points per query point.

    Returns (idx, d2) arrays of shape (n, k), sorted ascending by squared
    distance, ties broken by lower reference index.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(reference):
        raise ValueError(f"k={k} exceeds reference cloud size {len(reference)}")
    return kernels.knn(query.points, reference.points, k)


def chamfer_distance(a: PointCloud, b: PointCloud, cfg: MetricConfig = MetricConfig()) -> float:
    """gamma * mean_a min_b |x-y|^2 + mean_b min_a |y-x|^2."""
    sum_ab, sum_ba = kernels.chamfer_sums(a.points, b.points)
    return cfg.gamma * sum_ab / len(a) + sum_ba / len(b)


def f1_score(pred: PointCloud, gt: PointCloud, cfg: MetricConfig = MetricConfig()) -> float:
    """Harmonic mean of distance-thresholded precision and recall."""
    tau2 = cfg.f1_threshold**2
    _, d2_pred = kernels.nn1(pred.points, gt.points)
    _, d2_gt = kernels.nn1(gt.points, pred.points)
    precision = float(np.mean(d2_pred <= tau2))
    recall = float(np.mean(d2_gt <= tau2))
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def emd_distance(a: PointCloud, b: PointCloud) -> float:
    """Mean point-matching distance under the optimal (exact) assignment.

    Desk-scale only: requires equal sizes and at most EMD_MAX_POINTS points.
    """
    if len(a) != len(b):
        raise ValueError(f"EMD requires equal sizes, got {len(a)} and {len(b)}")
    if len(a) > EMD_MAX_POINTS:
        raise ValueError(f"EMD supports at most {EMD_MAX_POINTS} points, got {len(a)}")
    diff = a.points[:, None, :] - b.points[None, :, :]
    cost = np.sqrt(np.einsum("nmd,nmd->nm", diff, diff))
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())
