"""Evaluation-only metrics: exact empirical Wasserstein-2 distances and a
two-component PCA projection for image clouds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .discrepancy import SampleCloud
from .ensemble import KdeDensity, kde_eval_batch, silverman_bandwidth

__all__ = ["PcaBasis", "w2_1d", "w2_assignment", "pca_fit_project", "kde_mode_count"]

_ASSIGNMENT_CAP = 4096


@dataclass(frozen=True)
class PcaBasis:
    """Mean plus two orthonormal principal directions of a reference cloud."""

    mean: np.ndarray
    components: np.ndarray  # (2, d) orthonormal rows
    explained_variance: np.ndarray  # (2,) descending

    def __post_init__(self):
        comps = np.asarray(self.components, dtype=float)
        var = np.asarray(self.explained_variance, dtype=float)
        if comps.shape[0] != 2 or var.shape != (2,):
            raise ValueError("basis must have exactly two components")
        if not np.allclose(comps @ comps.T, np.eye(2), atol=1e-10):
            raise ValueError("component rows must be orthonormal")
        if var[0] < var[1] or np.any(var < 0):
            raise ValueError("explained variances must be nonnegative, descending")
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "explained_variance", var)

    def project(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return (pts - self.mean) @ self.components.T


def w2_1d(a, b) -> float:
    """Exact empirical W2 between equal-size 1D samples: root mean squared
    difference of the sorted lists."""
    x = np.asarray(a, dtype=float).ravel()
    y = np.asarray(b, dtype=float).ravel()
    if x.size == 0 or y.size == 0:
        raise ValueError("empty input")
    if x.size != y.size:
        raise ValueError(f"sample sizes differ ({x.size} vs {y.size}); resample to match")
    d = np.sort(x) - np.sort(y)
    return float(np.sqrt(np.mean(d * d)))


def w2_assignment(a, b) -> float:
    """Exact W2 between equal-weight empirical measures via optimal
    assignment on the squared-distance cost."""
    x = np.asarray(a, dtype=float)
    y = np.asarray(b, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"counts differ ({x.shape[0]} vs {y.shape[0]})")
    if x.shape[0] > _ASSIGNMENT_CAP:
        raise ValueError(f"assignment solver capped at N <= {_ASSIGNMENT_CAP}")
    if x.shape[1] != y.shape[1]:
        raise ValueError("dimension mismatch")
    cost = ((x[:, None, :] - y[None, :, :]) ** 2).sum(axis=2)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


def kde_mode_count(samples, rel_height: float = 0.1, grid_size: int = 512, pad: float = 3.0) -> int:
    """Number of local maxima of a Silverman-bandwidth KDE that rise above
    rel_height times the peak (the bimodality check for marginals)."""
    x = np.asarray(samples, dtype=float).ravel()
    eps = silverman_bandwidth(x)
    width = float(np.sqrt(eps))
    grid = np.linspace(x.min() - pad * width, x.max() + pad * width, grid_size)
    dens = kde_eval_batch(KdeDensity(x[:, None], eps), grid[:, None])
    interior = dens[1:-1]
    is_max = (interior > dens[:-2]) & (interior > dens[2:])
    return int(np.sum(is_max & (interior > rel_height * dens.max())))


def pca_fit_project(reference, others=()) -> tuple:
    """Fit a 2-component basis on the reference cloud only, then project
    the reference and every other cloud in that one basis.

    Returns (basis, [projected clouds]) with the reference projected first.
    Raises on a rank-deficient reference (< 2 nonzero singular values).
    """
    ref = reference.points if isinstance(reference, SampleCloud) else SampleCloud(reference).points
    if ref.shape[0] < 3:
        raise ValueError("reference needs at least 3 points")
    mean = ref.mean(axis=0)
    centered = ref - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    if (svals > 1e-12 * max(1.0, svals[0])).sum() < 2:
        raise ValueError("degenerate basis: reference has fewer than 2 varying directions")
    basis = PcaBasis(
        mean=mean,
        components=vt[:2],
        explained_variance=(svals[:2] ** 2) / ref.shape[0],
    )
    clouds = [basis.project(ref)]
    for cloud in others:
        pts = cloud.points if isinstance(cloud, SampleCloud) else SampleCloud(cloud).points
        if pts.shape[1] != ref.shape[1]:
            raise ValueError("cloud dimension differs from the reference")
        clouds.append(basis.project(pts))
    return basis, clouds
