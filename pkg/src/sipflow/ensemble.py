"""Probability measures on parameter space: Gaussian mixtures, particle
ensembles, and Gaussian kernel density estimates.

The KDE bandwidth ``eps`` is a *variance* (the isotropic Gaussian kernel is
exp(-|y - c|^2 / (2 eps)) / (2 pi eps)^(d/2)). Silverman's rule-of-thumb
produces a width (a standard deviation), so :func:`silverman_bandwidth`
returns the squared width.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "GaussianMixtureSpec",
    "ParticleEnsemble",
    "KdeDensity",
    "sample_mixture",
    "kde_eval",
    "kde_eval_batch",
    "kde_grad_log",
    "kde_grad_log_batch",
    "kde_log_eval_batch",
    "silverman_bandwidth",
    "write_particles_csv",
    "read_particles_csv",
]

_WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class GaussianMixtureSpec:
    """A finite Gaussian mixture: list of (weight, mean, covariance).

    Weights must be nonnegative and sum to one; covariances must be
    symmetric positive definite; all components share one dimension.
    """

    components: tuple

    def __post_init__(self):
        comps = []
        for weight, mean, cov in self.components:
            mean = np.atleast_1d(np.asarray(mean, dtype=float))
            cov = np.atleast_2d(np.asarray(cov, dtype=float))
            comps.append((float(weight), mean, cov))
        object.__setattr__(self, "components", tuple(comps))
        weights = np.array([c[0] for c in comps])
        if len(comps) == 0:
            raise ValueError("mixture needs at least one component")
        if np.any(weights < 0):
            raise ValueError("mixture weights must be nonnegative")
        if abs(weights.sum() - 1.0) > _WEIGHT_TOL:
            raise ValueError(f"mixture weights sum to {weights.sum()!r}, not 1")
        d = comps[0][1].shape[0]
        for _, mean, cov in comps:
            if mean.shape != (d,):
                raise ValueError("all component means must share one dimension")
            if cov.shape != (d, d):
                raise ValueError(f"covariance must be {d}x{d}, got {cov.shape}")
            if not np.allclose(cov, cov.T, rtol=0, atol=1e-12):
                raise ValueError("covariance must be symmetric")
            if np.linalg.eigvalsh(cov).min() <= 0:
                raise ValueError("covariance must be positive definite")

    @property
    def dim(self) -> int:
        return self.components[0][1].shape[0]

    def mean(self) -> np.ndarray:
        return sum(w * mu for w, mu, _ in self.components)

    def covariance(self) -> np.ndarray:
        m = self.mean()
        out = np.zeros((self.dim, self.dim))
        for w, mu, cov in self.components:
            out += w * (cov + np.outer(mu - m, mu - m))
        return out


@dataclass(frozen=True)
class ParticleEnsemble:
    """N equally weighted parameter particles; row i is particle i.

    Weights are uniform 1/N by construction and never stored.
    """

    particles: np.ndarray
    generation: int = 0

    def __post_init__(self):
        pts = np.asarray(self.particles, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError("particles must be a nonempty N x d matrix")
        if not np.all(np.isfinite(pts)):
            raise ValueError("particles must be finite")
        if self.generation < 0:
            raise ValueError("generation must be >= 0")
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "particles", pts)

    @property
    def count(self) -> int:
        return self.particles.shape[0]

    @property
    def dim(self) -> int:
        return self.particles.shape[1]


@dataclass(frozen=True)
class KdeDensity:
    """Isotropic Gaussian KDE with centers (M x d) and variance bandwidth."""

    centers: np.ndarray
    bandwidth: float

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=float)
        if centers.ndim == 1:
            centers = centers[:, None]
        if centers.ndim != 2 or centers.shape[0] < 1:
            raise ValueError("centers must be a nonempty M x d matrix")
        if not np.all(np.isfinite(centers)):
            raise ValueError("centers must be finite")
        if not self.bandwidth > 0:
            raise ValueError(f"invalid bandwidth {self.bandwidth!r}: must be > 0")
        centers = centers.copy()
        centers.setflags(write=False)
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "bandwidth", float(self.bandwidth))

    @property
    def dim(self) -> int:
        return self.centers.shape[1]


def sample_mixture(spec: GaussianMixtureSpec, n: int, rng: np.random.Generator) -> ParticleEnsemble:
    """Draw n i.i.d. samples from the mixture.

    Component selection is inverse-CDF on the weights, followed by a
    Cholesky transform of standard normals, so a fixed stream yields a
    bit-reproducible sample.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    d = spec.dim
    weights = np.array([c[0] for c in spec.components])
    cum = np.cumsum(weights)
    cum[-1] = 1.0  # guard the top edge against rounding
    idx = np.searchsorted(cum, rng.random(n), side="right")
    z = rng.standard_normal((n, d))
    out = np.empty((n, d))
    for k, (_, mean, cov) in enumerate(spec.components):
        sel = idx == k
        if not np.any(sel):
            continue
        chol = np.linalg.cholesky(cov)
        out[sel] = mean + z[sel] @ chol.T
    return ParticleEnsemble(out, generation=0)


def _kde_exponents(density: KdeDensity, points: np.ndarray, dtype) -> tuple:
    pts = np.asarray(points, dtype=dtype)
    centers = density.centers.astype(dtype, copy=False)
    diff = pts[:, None, :] - centers[None, :, :]
    expo = np.einsum("qmd,qmd->qm", diff, diff)
    expo *= dtype(-0.5 / density.bandwidth)
    return diff, expo


def kde_eval_batch(density: KdeDensity, points: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Density values at each row of points, shape (Q,)."""
    pts = _check_points(density, points)
    d = density.dim
    norm = (2.0 * np.pi * density.bandwidth) ** (-0.5 * d)
    out = np.empty(pts.shape[0])
    for s in range(0, pts.shape[0], chunk):
        _, expo = _kde_exponents(density, pts[s : s + chunk], np.float64)
        out[s : s + chunk] = norm * np.exp(expo).mean(axis=1)
    return out


def kde_log_eval_batch(density: KdeDensity, points: np.ndarray, chunk: int = 512) -> np.ndarray:
    """log density at each row of points, computed via a shifted exponent
    sum so extreme queries cannot underflow to -inf prematurely."""
    pts = _check_points(density, points)
    d = density.dim
    m = density.centers.shape[0]
    log_norm = -0.5 * d * np.log(2.0 * np.pi * density.bandwidth) - np.log(m)
    out = np.empty(pts.shape[0])
    for s in range(0, pts.shape[0], chunk):
        _, expo = _kde_exponents(density, pts[s : s + chunk], np.float64)
        top = expo.max(axis=1, keepdims=True)
        out[s : s + chunk] = top[:, 0] + np.log(np.exp(expo - top).sum(axis=1)) + log_norm
    return out


def kde_grad_log_batch(
    density: KdeDensity, points: np.ndarray, chunk: int = 256, dtype=np.float64
) -> np.ndarray:
    """grad_y log rho at each row of points, shape (Q, d).

    Evaluated as a softmax-weighted average of per-center kernel gradients;
    finite for every finite query. ``dtype`` trades precision for speed on
    large clouds (the flow passes float32).
    """
    pts = _check_points(density, points)
    out = np.empty((pts.shape[0], density.dim))
    inv_eps = 1.0 / density.bandwidth
    for s in range(0, pts.shape[0], chunk):
        diff, expo = _kde_exponents(density, pts[s : s + chunk], dtype)
        expo -= expo.max(axis=1, keepdims=True)
        w = np.exp(expo)
        denom = w.sum(axis=1)
        num = np.einsum("qm,qmd->qd", w, diff)
        out[s : s + chunk] = -inv_eps * num / denom[:, None]
    return out


def kde_eval(density: KdeDensity, y) -> float:
    """Density value at a single point; strictly positive."""
    pt = np.atleast_1d(np.asarray(y, dtype=float))
    return float(kde_eval_batch(density, pt[None, :])[0])


def kde_grad_log(density: KdeDensity, y) -> np.ndarray:
    """grad_y log rho at a single point y."""
    pt = np.atleast_1d(np.asarray(y, dtype=float))
    return kde_grad_log_batch(density, pt[None, :])[0]


def _check_points(density: KdeDensity, points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.shape[1] != density.dim:
        raise ValueError(f"query dim {pts.shape[1]} != density dim {density.dim}")
    return pts


def silverman_bandwidth(samples) -> float:
    """Squared Silverman rule-of-thumb width for a 1D sample.

    width = 0.9 * min(std, IQR/1.34) * n^(-1/5); the return value is
    width**2 because KdeDensity's bandwidth is a variance. Quantiles use
    the inverted-CDF convention. Deterministic in the sample.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 2:
        raise ValueError("need at least 2 samples")
    std = float(x.std())
    if std == 0.0:
        raise ValueError("degenerate data: all samples identical")
    q75 = np.quantile(x, 0.75, method="inverted_cdf")
    q25 = np.quantile(x, 0.25, method="inverted_cdf")
    iqr = float(q75 - q25)
    scale = min(std, iqr / 1.34) if iqr > 0 else std
    width = 0.9 * scale * x.size ** (-0.2)
    return width * width


def write_particles_csv(path, ensemble: ParticleEnsemble) -> None:
    """One particle per row, header dim0..dim{d-1}, repr floats (exact
    IEEE-754 round trip)."""
    pts = ensemble.particles
    header = ",".join(f"dim{j}" for j in range(pts.shape[1]))
    lines = [header]
    for row in pts:
        lines.append(",".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_particles_csv(path, generation: int = 0) -> ParticleEnsemble:
    text = Path(path).read_text(encoding="utf-8").strip().splitlines()
    rows = [[float(v) for v in line.split(",")] for line in text[1:]]
    return ParticleEnsemble(np.array(rows), generation=generation)
