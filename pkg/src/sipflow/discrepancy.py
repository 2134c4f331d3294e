"""Discrepancy functionals between sample clouds.

Each discrepancy exposes its scalar value and the data-space gradient of
its first variation, evaluated at arbitrary query points. Double sums are
diagonal-inclusive throughout, so values and gradients are mutually
consistent. Norm gradients take the value 0 at their singular points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ensemble import KdeDensity, kde_grad_log_batch, kde_log_eval_batch
from .rng import substream

__all__ = [
    "SampleCloud",
    "EnergyKernel",
    "GaussianKernel",
    "DiscrepancySpec",
    "energy_distance",
    "mmd_sq_value",
    "mmd_first_variation_grad",
    "kl_value",
    "kl_first_variation_grad",
    "first_variation_grads",
    "discrepancy_value",
]


@dataclass(frozen=True)
class SampleCloud:
    """A finite set of points in data space, one per row."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError("points must be a nonempty N x d matrix")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def count(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


_GRAM_SWITCH = 1 << 21


def _pairwise_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance matrix.

    Small problems take the exact broadcasted-difference route; large ones
    (image clouds) use the Gram identity, whose GEMM is the only way to
    keep the flow's inner loop fast. The switch is on problem size only,
    so it is deterministic for a fixed configuration.
    """
    if a.shape[0] * b.shape[0] * a.shape[1] <= _GRAM_SWITCH:
        diff = a[:, None, :] - b[None, :, :]
        return np.sqrt(np.einsum("nmd,nmd->nm", diff, diff))
    a_sq = np.einsum("nd,nd->n", a, a)
    b_sq = np.einsum("md,md->m", b, b)
    sq = a_sq[:, None] + b_sq[None, :] - 2.0 * (a @ b.T)
    np.maximum(sq, 0.0, out=sq)
    return np.sqrt(sq)


class EnergyKernel:
    """k(x, y) = -|x - y| + |x| + |y|, the kernel whose MMD is the energy
    distance."""

    name = "energy"

    def matrix(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        na = np.linalg.norm(a, axis=1)
        nb = np.linalg.norm(b, axis=1)
        return -_pairwise_dist(a, b) + na[:, None] + nb[None, :]

    def grad_query(self, y: np.ndarray, z: np.ndarray) -> np.ndarray:
        """grad_y k(y, z_j) for each row z_j; each norm gradient is 0 at
        its singular point."""
        diff = y[None, :] - z
        dist = np.linalg.norm(diff, axis=1)
        out = np.zeros_like(diff)
        nz = dist > 0
        out[nz] = -diff[nz] / dist[nz, None]
        ny = np.linalg.norm(y)
        if ny > 0:
            out += y / ny
        return out


class GaussianKernel:
    """k(x, y) = exp(-|x - y|^2 / (2 lengthscale^2))."""

    name = "gaussian"

    def __init__(self, lengthscale: float):
        if not lengthscale > 0:
            raise ValueError("lengthscale must be > 0")
        self.lengthscale = float(lengthscale)

    def matrix(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        d = _pairwise_dist(a, b)
        return np.exp(-(d * d) / (2.0 * self.lengthscale**2))

    def grad_query(self, y: np.ndarray, z: np.ndarray) -> np.ndarray:
        diff = y[None, :] - z
        sq = np.einsum("md,md->m", diff, diff)
        k = np.exp(-sq / (2.0 * self.lengthscale**2))
        return -(diff / self.lengthscale**2) * k[:, None]


def _check_kernel_psd(kernel) -> None:
    """Reject kernels whose test Gram matrices are not PSD (within 1e-10)."""
    for dim in (1, 3):
        pts = substream(20250, "kernel-check", dim).standard_normal((8, dim))
        gram = kernel.matrix(pts, pts)
        if np.linalg.eigvalsh(gram).min() < -1e-10:
            raise ValueError(f"kernel {kernel!r} failed the positive-definiteness check")


@dataclass(frozen=True)
class DiscrepancySpec:
    """Which divergence is in force plus its hyperparameters.

    kind "energy" fixes the energy kernel; kind "mmd" requires an explicit
    kernel; kind "kl" requires a KDE bandwidth (a variance).
    """

    kind: str
    kernel: object = None
    kde_bandwidth: float | None = None

    def __post_init__(self):
        if self.kind not in ("energy", "mmd", "kl"):
            raise ValueError(f"unknown discrepancy kind {self.kind!r}")
        if self.kind == "energy":
            object.__setattr__(self, "kernel", EnergyKernel())
        elif self.kind == "mmd":
            if self.kernel is None:
                raise ValueError("mmd requires an explicit kernel")
            _check_kernel_psd(self.kernel)
        elif self.kind == "kl":
            if self.kde_bandwidth is None:
                raise ValueError("kl requires kde_bandwidth")
            if not self.kde_bandwidth > 0:
                raise ValueError("kde_bandwidth must be > 0")


def _points(cloud) -> np.ndarray:
    """Rows of a cloud; raw arrays pass through (dtype preserved) so the
    flow's float32 hot path avoids copies, while SampleCloud construction
    keeps its validation."""
    if isinstance(cloud, SampleCloud):
        return cloud.points
    pts = np.asarray(cloud)
    if pts.dtype not in (np.float32, np.float64):
        pts = pts.astype(float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise ValueError("points must be a nonempty N x d matrix")
    return pts


def _check_dims(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")


def _mean_abs_diff_sorted(a_sorted: np.ndarray, b: np.ndarray) -> float:
    """mean_{i,j} |a_i - b_j| for 1D samples, via prefix sums (exact in the
    sense of the plain double sum up to summation order)."""
    n = a_sorted.size
    prefix = np.concatenate([[0.0], np.cumsum(a_sorted)])
    pos = np.searchsorted(a_sorted, b, side="right")
    total = prefix[n]
    below = b * pos - prefix[pos]
    above = (total - prefix[pos]) - b * (n - pos)
    return float((below + above).sum() / (n * b.size))


def energy_distance(mu, nu, dtype=np.float64) -> float:
    """sqrt(max(0, 2 E|x-y| - E|x-x'| - E|y-y'|)) with diagonal-inclusive
    double sums; symmetric in its arguments. ``dtype`` lets image-sized
    clouds trade precision for speed."""
    a, b = _points(mu), _points(nu)
    _check_dims(a, b)
    if a.shape[1] == 1:
        asort = np.sort(a[:, 0].astype(np.float64))
        bsort = np.sort(b[:, 0].astype(np.float64))
        cross = _mean_abs_diff_sorted(asort, bsort)
        within_a = _mean_abs_diff_sorted(asort, asort)
        within_b = _mean_abs_diff_sorted(bsort, bsort)
    else:
        af = a.astype(dtype, copy=False)
        bf = b.astype(dtype, copy=False)
        cross = float(_pairwise_dist(af, bf).mean())
        within_a = float(_pairwise_dist(af, af).mean())
        within_b = float(_pairwise_dist(bf, bf).mean())
    return float(np.sqrt(max(0.0, 2.0 * cross - within_a - within_b)))


def mmd_sq_value(mu, nu, spec: DiscrepancySpec) -> float:
    """Half the (biased, diagonal-inclusive) squared MMD between the clouds."""
    a, b = _points(mu), _points(nu)
    _check_dims(a, b)
    kernel = spec.kernel
    n, m = a.shape[0], b.shape[0]
    kaa = kernel.matrix(a, a).sum() / (2.0 * n * n)
    kbb = kernel.matrix(b, b).sum() / (2.0 * m * m)
    kab = kernel.matrix(a, b).sum() / (n * m)
    return float(kaa + kbb - kab)


def mmd_first_variation_grad(y, mu, nu, spec: DiscrepancySpec) -> np.ndarray:
    """grad_y of (1/N) sum_i k(y, y_i) - (1/M) sum_j k(y, y_j*)."""
    a, b = _points(mu), _points(nu)
    _check_dims(a, b)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    kernel = spec.kernel
    return kernel.grad_query(y, a).mean(axis=0) - kernel.grad_query(y, b).mean(axis=0)


def _kl_densities(mu, nu, spec: DiscrepancySpec) -> tuple:
    if spec.kind != "kl":
        raise ValueError("spec.kind must be 'kl'")
    if spec.kde_bandwidth is None:
        raise ValueError("kl requires kde_bandwidth")
    a, b = _points(mu), _points(nu)
    _check_dims(a, b)
    return KdeDensity(a, spec.kde_bandwidth), KdeDensity(b, spec.kde_bandwidth), a


def kl_value(mu, nu, spec: DiscrepancySpec) -> float:
    """Sample KL estimate: mean over mu's points of log(rho_mu / rho_nu),
    both densities KDEs with the shared bandwidth."""
    da, db, a = _kl_densities(mu, nu, spec)
    return float((kde_log_eval_batch(da, a) - kde_log_eval_batch(db, a)).mean())


def kl_first_variation_grad(y, mu, nu, spec: DiscrepancySpec) -> np.ndarray:
    """grad_y log rho_mu(y) - grad_y log rho_nu(y); the constant in the
    first variation differentiates away."""
    da, db, _ = _kl_densities(mu, nu, spec)
    y = np.atleast_1d(np.asarray(y, dtype=float))[None, :]
    return (kde_grad_log_batch(da, y) - kde_grad_log_batch(db, y))[0]


# --------------------------------------------------------------------------
# batched evaluation (the flow's hot path)


def _energy_grads_1d(queries: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Energy first-variation gradient in 1D via rank counts.

    The mean kernel gradient over a cloud reduces to a signed rank count
    (the |y| terms cancel between the two clouds), so the whole batch
    costs O((N+M) log) with integer-exact counts.
    """
    q = queries[:, 0]

    def sign_mean(cloud: np.ndarray) -> np.ndarray:
        s = np.sort(cloud[:, 0])
        less = np.searchsorted(s, q, side="left")
        greater = s.size - np.searchsorted(s, q, side="right")
        return (less - greater) / s.size

    return (sign_mean(b) - sign_mean(a))[:, None]


def _energy_grads_nd(queries: np.ndarray, a: np.ndarray, b: np.ndarray, dtype) -> np.ndarray:
    """GEMM-backed energy first-variation gradients at many queries.

    Uses mean_z grad_y(-|y-z|) = -(sum_z w_z) y + sum_z w_z z with
    w_z = 1/|y-z| (0 at coincidence); the |y| terms cancel between clouds.
    """
    q = queries.astype(dtype, copy=False)
    out = np.zeros((q.shape[0], q.shape[1]), dtype=dtype)
    for cloud, sgn in ((a, -1.0), (b, 1.0)):
        z = cloud.astype(dtype, copy=False)
        dist = _pairwise_dist(q, z)
        w = np.zeros_like(dist)
        np.divide(1.0, dist, out=w, where=dist > 0)
        coeff = w.sum(axis=1)
        out += (sgn / z.shape[0]) * (coeff[:, None] * q - w @ z)
    return out.astype(np.float64)


def first_variation_grads(queries, mu, nu, spec: DiscrepancySpec, dtype=np.float64) -> np.ndarray:
    """grad_y (dD/d rho_y) at each query row, for the configured D.

    Matches the pointwise functions to reduction-order precision; image
    clouds may pass float32 for speed.
    """
    a, b = _points(mu), _points(nu)
    q = np.asarray(queries, dtype=float)
    if q.ndim == 1:
        q = q[:, None]
    _check_dims(q, a)
    _check_dims(a, b)
    if spec.kind == "kl":
        da = KdeDensity(a, spec.kde_bandwidth)
        db = KdeDensity(b, spec.kde_bandwidth)
        return kde_grad_log_batch(da, q, dtype=dtype) - kde_grad_log_batch(db, q, dtype=dtype)
    if isinstance(spec.kernel, EnergyKernel):
        if q.shape[1] == 1:
            return _energy_grads_1d(q, a, b)
        return _energy_grads_nd(q, a, b, dtype)
    out = np.empty((q.shape[0], q.shape[1]))
    for i, y in enumerate(q):
        out[i] = spec.kernel.grad_query(y, a).mean(axis=0) - spec.kernel.grad_query(y, b).mean(axis=0)
    return out


def discrepancy_value(mu, nu, spec: DiscrepancySpec, dtype=np.float64) -> float:
    """The flow's scalar loss: half squared MMD for kernel losses
    (energy distance runs use the energy kernel), sample KL otherwise."""
    if spec.kind == "kl":
        return kl_value(mu, nu, spec)
    a, b = _points(mu), _points(nu)
    if isinstance(spec.kernel, EnergyKernel):
        if a.shape[1] == 1:
            return 0.5 * energy_distance(a, b) ** 2
        af = a.astype(dtype, copy=False)
        bf = b.astype(dtype, copy=False)
        cross = float(_pairwise_dist(af, bf).mean())
        wa = float(_pairwise_dist(af, af).mean())
        wb = float(_pairwise_dist(bf, bf).mean())
        return 0.5 * max(0.0, 2.0 * cross - wa - wb)
    return mmd_sq_value(a, b, spec)


def within_cloud_term(cloud, spec: DiscrepancySpec, dtype=np.float64) -> float:
    """Per-run constant of the loss that depends only on one cloud;
    precompute it once for a fixed observed set."""
    b = _points(cloud)
    if spec.kind == "kl":
        return 0.0
    bf = b.astype(dtype, copy=False)
    if isinstance(spec.kernel, EnergyKernel) and b.shape[1] == 1:
        s = np.sort(bf[:, 0])
        return _mean_abs_diff_sorted(s, s)
    if isinstance(spec.kernel, EnergyKernel):
        return float(_pairwise_dist(bf, bf).mean())
    return float(spec.kernel.matrix(b, b).sum() / b.shape[0] ** 2)


def value_and_grads(
    pred, obs, spec: DiscrepancySpec, dtype=np.float64, obs_within: float | None = None
) -> tuple:
    """Loss value plus first-variation gradients at the predicted points,
    sharing one set of pairwise matrices (the flow calls this once per
    iteration). Matches (discrepancy_value, first_variation_grads) to
    reduction-order precision."""
    a, b = _points(pred), _points(obs)
    _check_dims(a, b)
    n, m = a.shape[0], b.shape[0]
    if spec.kind == "kl":
        return _kl_value_and_grads(a, b, spec, dtype)
    if isinstance(spec.kernel, EnergyKernel):
        if a.shape[1] == 1:
            asort = np.sort(a[:, 0])
            cross = _mean_abs_diff_sorted(asort, b[:, 0])
            wa = _mean_abs_diff_sorted(asort, asort)
            wb = within_cloud_term(b, spec) if obs_within is None else obs_within
            value = 0.5 * max(0.0, 2.0 * cross - wa - wb)
            return float(value), _energy_grads_1d(a, a, b)
        af = a.astype(dtype, copy=False)
        bf = b.astype(dtype, copy=False)
        dpp = _pairwise_dist(af, af)
        dpo = _pairwise_dist(af, bf)
        wb = within_cloud_term(b, spec, dtype) if obs_within is None else obs_within
        value = 0.5 * max(0.0, 2.0 * float(dpo.mean()) - float(dpp.mean()) - wb)
        wpp = np.zeros_like(dpp)
        np.divide(1.0, dpp, out=wpp, where=dpp > 0)
        wpo = np.zeros_like(dpo)
        np.divide(1.0, dpo, out=wpo, where=dpo > 0)
        grads = (-1.0 / n) * (wpp.sum(axis=1)[:, None] * af - wpp @ af)
        grads += (1.0 / m) * (wpo.sum(axis=1)[:, None] * af - wpo @ bf)
        return float(value), grads.astype(np.float64)
    # generic kernel (gaussian): kernel matrices feed both value and grads
    af = a.astype(dtype, copy=False)
    bf = b.astype(dtype, copy=False)
    kpp = spec.kernel.matrix(af, af)
    kpo = spec.kernel.matrix(af, bf)
    kobs = within_cloud_term(b, spec, dtype) if obs_within is None else obs_within
    value = float(kpp.sum() / (2.0 * n * n) + 0.5 * kobs - kpo.sum() / (n * m))
    if not isinstance(spec.kernel, GaussianKernel):
        return value, first_variation_grads(a, a, b, spec, dtype)
    inv = 1.0 / spec.kernel.lengthscale**2
    grads = (-inv / n) * (kpp.sum(axis=1)[:, None] * af - kpp @ af)
    grads += (inv / m) * (kpo.sum(axis=1)[:, None] * af - kpo @ bf)
    return value, grads.astype(np.float64)


def _kl_value_and_grads(a: np.ndarray, b: np.ndarray, spec: DiscrepancySpec, dtype) -> tuple:
    """KL loss and gradients at mu's own points in one pass over the
    pairwise exponent blocks."""
    eps = spec.kde_bandwidth
    d = a.shape[1]
    grads = np.empty((a.shape[0], d))
    log_na = -0.5 * d * np.log(2.0 * np.pi * eps) - np.log(a.shape[0])
    log_nb = -0.5 * d * np.log(2.0 * np.pi * eps) - np.log(b.shape[0])
    value = 0.0
    chunk = 256
    qf = a.astype(dtype, copy=False)
    for s in range(0, a.shape[0], chunk):
        q = qf[s : s + chunk]
        logs = []
        for centers, sgn in ((a, 1.0), (b, -1.0)):
            z = centers.astype(dtype, copy=False)
            diff = q[:, None, :] - z[None, :, :]
            expo = np.einsum("qmd,qmd->qm", diff, diff)
            expo *= dtype(-0.5 / eps)
            top = expo.max(axis=1, keepdims=True)
            w = np.exp(expo - top)
            ssum = w.sum(axis=1)
            logs.append(top[:, 0].astype(np.float64) + np.log(ssum.astype(np.float64)))
            gterm = np.einsum("qm,qmd->qd", w, diff).astype(np.float64)
            if sgn > 0:
                grads[s : s + chunk] = (-1.0 / eps) * gterm / ssum.astype(np.float64)[:, None]
            else:
                grads[s : s + chunk] += (1.0 / eps) * gterm / ssum.astype(np.float64)[:, None]
        value += float((logs[0] + log_na - logs[1] - log_nb).sum())
    return value / a.shape[0], grads
