"""Random forward operators mapping parameters plus nuisance draws to data.

Three operators are provided:

* :class:`AffineIdentityOperator` -- y = theta + noise (rotation ignored);
* :class:`NanoclusterOperator` -- a 2-vector latent rendered as four
  mirror-image Gaussian blobs on a square pixel grid, plus pixel noise;
* :class:`ToyProteinOperator` -- a pseudo-atom cloud displaced along
  orthonormal modes, rotated, orthographically projected (drop z),
  splatted on the pixel grid, plus pixel noise.

Each operator exposes an exact analytic vector-Jacobian (adjoint) action
in the latent; additive noise has zero Jacobian. Everything here is pure
and stateless after construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "NuisanceDraw",
    "ImageSpec",
    "PseudoAtomModel",
    "AffineIdentityOperator",
    "NanoclusterOperator",
    "ToyProteinOperator",
    "affine_identity_apply",
    "nanocluster_render",
    "toy_protein_apply",
    "sample_rotation",
    "sample_rotations",
    "rotation_matrix",
    "identity_quaternion",
    "vjp",
    "finite_difference_check",
    "default_pseudo_atom_model",
    "write_image_stack",
    "read_image_stack",
]

_MIRROR_SIGNS = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])


@dataclass(frozen=True)
class NuisanceDraw:
    """One nuisance realization: a unit quaternion plus an additive noise
    field shaped like a single datum."""

    rotation: np.ndarray  # (w, x, y, z)
    noise: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=float)
        if q.shape != (4,):
            raise ValueError("rotation must be a quaternion (w, x, y, z)")
        if abs(np.linalg.norm(q) - 1.0) > 1e-12:
            raise ValueError("rotation quaternion must have unit norm")
        noise = np.asarray(self.noise, dtype=float)
        if not np.all(np.isfinite(noise)):
            raise ValueError("noise entries must be finite")
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "noise", noise)


@dataclass(frozen=True)
class ImageSpec:
    """Square pixel grid: side pixels per axis, physical half-width
    ``extent``, Gaussian splat width ``kernel_width`` (tau), and the
    noise standard deviation used when generating draws."""

    side: int
    extent: float
    kernel_width: float
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.side < 2:
            raise ValueError("side must be >= 2")
        if not self.extent > 0:
            raise ValueError("extent must be > 0")
        if not self.kernel_width > 0:
            raise ValueError("kernel_width must be > 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    def grid(self) -> np.ndarray:
        """Pixel coordinates along one axis: -extent + 2*extent*i/side."""
        i = np.arange(self.side, dtype=float)
        return -self.extent + 2.0 * self.extent * i / self.side

    @property
    def pixel_count(self) -> int:
        return self.side * self.side


@dataclass(frozen=True)
class PseudoAtomModel:
    """Reference atom positions plus orthonormal displacement modes.

    ``modes[i]`` is an A x 3 field, pairwise orthonormal under the
    flattened inner product; ``mode_scales[i]`` plays the role of the
    inverse square-root eigenvalue multiplying mode i's amplitude.
    """

    base_positions: np.ndarray  # (A, 3)
    modes: np.ndarray  # (d_theta, A, 3)
    mode_scales: np.ndarray  # (d_theta,)

    def __post_init__(self):
        base = np.asarray(self.base_positions, dtype=float)
        modes = np.asarray(self.modes, dtype=float)
        scales = np.asarray(self.mode_scales, dtype=float)
        if base.ndim != 2 or base.shape[1] != 3 or base.shape[0] < 1:
            raise ValueError("base_positions must be A x 3 with A >= 1")
        if modes.ndim != 3 or modes.shape[1:] != base.shape:
            raise ValueError("each mode must be shaped like base_positions")
        if scales.shape != (modes.shape[0],) or np.any(scales <= 0):
            raise ValueError("mode_scales must be positive, one per mode")
        flat = modes.reshape(modes.shape[0], -1)
        gram = flat @ flat.T
        if not np.allclose(gram, np.eye(modes.shape[0]), atol=1e-10):
            raise ValueError("modes must be pairwise orthonormal")
        object.__setattr__(self, "base_positions", base)
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "mode_scales", scales)

    @property
    def atom_count(self) -> int:
        return self.base_positions.shape[0]

    @property
    def mode_count(self) -> int:
        return self.modes.shape[0]

    def positions(self, theta: np.ndarray) -> np.ndarray:
        """Atom positions base + sum_i theta_i * scale_i * mode_i."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.mode_count,):
            raise ValueError(f"theta must have dim {self.mode_count}")
        amps = theta * self.mode_scales
        return self.base_positions + np.tensordot(amps, self.modes, axes=(0, 0))


def identity_quaternion() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def sample_rotation(rng: np.random.Generator) -> np.ndarray:
    """One Haar-uniform rotation via the Shoemake subgroup construction."""
    return _shoemake(rng.random(3))


def sample_rotations(rng: np.random.Generator, n: int) -> np.ndarray:
    """n Haar-uniform quaternions, rows identical to n sequential
    sample_rotation calls on the same stream."""
    return _shoemake(rng.random((n, 3)))


def _shoemake(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    u1, u2, u3 = u[..., 0], u[..., 1], u[..., 2]
    a, b = np.sqrt(1.0 - u1), np.sqrt(u1)
    t2, t3 = 2.0 * np.pi * u2, 2.0 * np.pi * u3
    return np.stack([b * np.cos(t3), a * np.sin(t2), a * np.cos(t2), b * np.sin(t3)], axis=-1)


def rotation_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z); R(q) = R(-q)."""
    w, x, y, z = np.asarray(q, dtype=float)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_angle(q: np.ndarray) -> float:
    """Rotation angle in [0, pi] of a unit quaternion."""
    w = abs(float(np.asarray(q, dtype=float)[0]))
    return 2.0 * np.arccos(min(w, 1.0))


# --------------------------------------------------------------------------
# rendering primitives


def _splat_axis_weights(coords: np.ndarray, grid: np.ndarray, tau: float) -> np.ndarray:
    """exp(-(c - g)^2 / (2 tau^2)) for every (atom, pixel) pair."""
    d = coords[..., None] - grid
    return np.exp(-(d * d) / (2.0 * tau * tau))


def _render_points(points2d: np.ndarray, spec: ImageSpec) -> np.ndarray:
    """Sum of Gaussian splats, exploiting the kernel's axis separability.

    points2d is (..., A, 2); returns images (..., side, side) with
    I[i, j] = sum_k exp(-((px_k - g_i)^2 + (py_k - g_j)^2) / (2 tau^2)).
    """
    grid = spec.grid()
    ex = _splat_axis_weights(points2d[..., 0], grid, spec.kernel_width)
    ey = _splat_axis_weights(points2d[..., 1], grid, spec.kernel_width)
    return np.einsum("...ki,...kj->...ij", ex, ey)


def _nanocluster_atoms(theta: np.ndarray) -> np.ndarray:
    """Four mirror-image atom positions from a 2-vector latent."""
    return 0.5 * np.asarray(theta, dtype=float)[..., None, :] * _MIRROR_SIGNS


def nanocluster_render(theta, spec: ImageSpec) -> np.ndarray:
    """Noiseless four-blob image of a 2-vector latent."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (2,):
        raise ValueError("nanocluster latent must be a 2-vector")
    if not np.all(np.isfinite(theta)):
        raise ValueError("latent must be finite")
    return _render_points(_nanocluster_atoms(theta), spec)


def affine_identity_apply(theta, draw: NuisanceDraw) -> np.ndarray:
    """theta + noise; the rotation component is ignored."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    noise = np.atleast_1d(draw.noise)
    if theta.shape != noise.shape:
        raise ValueError(f"dim mismatch: theta {theta.shape} vs noise {noise.shape}")
    return theta + noise


def toy_protein_apply(theta, draw: NuisanceDraw, model: PseudoAtomModel, spec: ImageSpec) -> np.ndarray:
    """Displace atoms along the modes, rotate, project on z, splat, add noise."""
    pos = model.positions(theta)
    rot = pos @ rotation_matrix(draw.rotation).T
    image = _render_points(rot[:, :2], spec)
    if draw.noise.shape != image.shape:
        raise ValueError(f"noise shape {draw.noise.shape} != image shape {image.shape}")
    return image + draw.noise


# --------------------------------------------------------------------------
# operators


class AffineIdentityOperator:
    """y = theta + noise in R^dim."""

    def __init__(self, dim: int = 1):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = int(dim)

    @property
    def theta_dim(self) -> int:
        return self.dim

    @property
    def output_shape(self) -> tuple:
        return (self.dim,)

    @property
    def uses_rotation(self) -> bool:
        return False

    def apply(self, theta, draw: NuisanceDraw) -> np.ndarray:
        return affine_identity_apply(theta, draw)

    def apply_noiseless(self, theta, rotation=None) -> np.ndarray:
        return np.atleast_1d(np.asarray(theta, dtype=float)).copy()

    def vjp(self, theta, draw: NuisanceDraw, cotangent) -> np.ndarray:
        cot = np.asarray(cotangent, dtype=float)
        if cot.shape != self.output_shape:
            raise ValueError("cotangent shaped unlike operator output")
        return cot.copy()

    # batched paths used by the flow loop -------------------------------
    def apply_batch(self, thetas: np.ndarray, rotations, noises: np.ndarray) -> np.ndarray:
        return thetas + noises

    def vjp_batch(self, thetas: np.ndarray, rotations, cotangents: np.ndarray) -> np.ndarray:
        return np.asarray(cotangents, dtype=float).reshape(thetas.shape).copy()


class NanoclusterOperator:
    """Four mirror-image Gaussian blobs plus pixel noise; rotation ignored."""

    def __init__(self, spec: ImageSpec):
        self.spec = spec

    @property
    def theta_dim(self) -> int:
        return 2

    @property
    def output_shape(self) -> tuple:
        return (self.spec.side, self.spec.side)

    @property
    def uses_rotation(self) -> bool:
        return False

    def apply(self, theta, draw: NuisanceDraw) -> np.ndarray:
        image = nanocluster_render(theta, self.spec)
        if draw.noise.shape != image.shape:
            raise ValueError("noise shaped unlike the image")
        return image + draw.noise

    def apply_noiseless(self, theta, rotation=None) -> np.ndarray:
        return nanocluster_render(theta, self.spec)

    def vjp(self, theta, draw: NuisanceDraw, cotangent) -> np.ndarray:
        cot = np.asarray(cotangent, dtype=float)
        if cot.shape != self.output_shape:
            raise ValueError("cotangent shaped unlike operator output")
        return self.vjp_batch(np.asarray(theta, dtype=float)[None, :], None, cot[None])[0]

    def apply_batch(self, thetas: np.ndarray, rotations, noises: np.ndarray) -> np.ndarray:
        return _render_points(_nanocluster_atoms(thetas), self.spec) + noises

    def vjp_batch(self, thetas: np.ndarray, rotations, cotangents: np.ndarray) -> np.ndarray:
        """Pull image cotangents back to the 2-vector latents.

        dI/da_k factorizes along axes; the latent picks up the mirror
        signs and the 1/2 from a_1 = theta / 2.
        """
        spec = self.spec
        tau2 = spec.kernel_width**2
        grid = spec.grid()
        atoms = _nanocluster_atoms(thetas)  # (B, 4, 2)
        dx = atoms[:, :, 0][:, :, None] - grid  # (B, 4, S)
        dy = atoms[:, :, 1][:, :, None] - grid
        ex = np.exp(-(dx * dx) / (2 * tau2))
        ey = np.exp(-(dy * dy) / (2 * tau2))
        cot = np.asarray(cotangents, dtype=float)
        # d I_ij / d a_kx = -(dx_ki / tau^2) ex_ki ey_kj  (and symmetrically in y)
        ga_x = np.einsum("bij,bki,bkj->bk", cot, ex * (-dx / tau2), ey)
        ga_y = np.einsum("bij,bki,bkj->bk", cot, ex, ey * (-dy / tau2))
        gx = 0.5 * (ga_x * _MIRROR_SIGNS[:, 0]).sum(axis=1)
        gy = 0.5 * (ga_y * _MIRROR_SIGNS[:, 1]).sum(axis=1)
        return np.stack([gx, gy], axis=1)


class ToyProteinOperator:
    """Pseudo-atom cloud: modes -> rotate -> project -> splat -> noise."""

    def __init__(self, model: PseudoAtomModel, spec: ImageSpec):
        self.model = model
        self.spec = spec

    @property
    def theta_dim(self) -> int:
        return self.model.mode_count

    @property
    def output_shape(self) -> tuple:
        return (self.spec.side, self.spec.side)

    @property
    def uses_rotation(self) -> bool:
        return True

    def apply(self, theta, draw: NuisanceDraw) -> np.ndarray:
        return toy_protein_apply(theta, draw, self.model, self.spec)

    def apply_noiseless(self, theta, rotation=None) -> np.ndarray:
        rot = identity_quaternion() if rotation is None else rotation
        pos = self.model.positions(theta) @ rotation_matrix(rot).T
        return _render_points(pos[:, :2], self.spec)

    def vjp(self, theta, draw: NuisanceDraw, cotangent) -> np.ndarray:
        cot = np.asarray(cotangent, dtype=float)
        if cot.shape != self.output_shape:
            raise ValueError("cotangent shaped unlike operator output")
        rots = np.asarray(draw.rotation, dtype=float)[None, :]
        return self.vjp_batch(np.asarray(theta, dtype=float)[None, :], rots, cot[None])[0]

    def apply_batch(self, thetas: np.ndarray, rotations: np.ndarray, noises: np.ndarray) -> np.ndarray:
        proj = self._projected(thetas, rotations)
        return _render_points(proj, self.spec) + noises

    def _projected(self, thetas: np.ndarray, rotations: np.ndarray) -> np.ndarray:
        amps = thetas * self.model.mode_scales  # (B, M)
        pos = self.model.base_positions + np.tensordot(amps, self.model.modes, axes=(1, 0))
        mats = _rotation_matrices(rotations)  # (B, 3, 3)
        rot = np.einsum("bad,bcd->bac", pos, mats)
        return rot[..., :2]

    def vjp_batch(self, thetas: np.ndarray, rotations: np.ndarray, cotangents: np.ndarray) -> np.ndarray:
        """Chain rule through splat -> projection -> rotation -> modes."""
        spec = self.spec
        tau2 = spec.kernel_width**2
        grid = spec.grid()
        proj = self._projected(thetas, rotations)  # (B, A, 2)
        dx = proj[:, :, 0][:, :, None] - grid
        dy = proj[:, :, 1][:, :, None] - grid
        ex = np.exp(-(dx * dx) / (2 * tau2))
        ey = np.exp(-(dy * dy) / (2 * tau2))
        cot = np.asarray(cotangents, dtype=float)
        gp_x = np.einsum("bij,bki,bkj->bk", cot, ex * (-dx / tau2), ey)
        gp_y = np.einsum("bij,bki,bkj->bk", cot, ex, ey * (-dy / tau2))
        gproj = np.stack([gp_x, gp_y], axis=2)  # (B, A, 2) gradient in projected coords
        mats = _rotation_matrices(rotations)
        # projected coords p = (R u)_{xy}: pull back through the top 2 rows of R
        gpos = np.einsum("bak,bkd->bad", gproj, mats[:, :2, :])  # (B, A, 3)
        # positions are linear in theta: d pos / d theta_m = scale_m * mode_m
        gtheta = np.einsum("bad,mad->bm", gpos, self.model.modes)
        return gtheta * self.model.mode_scales


def _rotation_matrices(quats: np.ndarray) -> np.ndarray:
    q = np.asarray(quats, dtype=float)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = np.empty((q.shape[0], 3, 3))
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def vjp(operator, theta, draw: NuisanceDraw, cotangent) -> np.ndarray:
    """Adjoint Jacobian action grad T^T(theta) . cotangent for one draw.

    Additive noise contributes nothing; the operator must be one of the
    handles defined in this module (anything exposing a ``vjp`` method).
    """
    method = getattr(operator, "vjp", None)
    if method is None:
        raise ValueError(f"unknown operator handle {operator!r}")
    return method(theta, draw, cotangent)


def finite_difference_check(operator, theta, draw: NuisanceDraw, step: float = 1e-4) -> float:
    """Worst Frobenius-weighted relative discrepancy between the analytic
    adjoint (assembled row by row from canonical cotangents) and a central
    finite-difference Jacobian."""
    if not step > 0:
        raise ValueError("step must be > 0")
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    d = theta.size
    out_shape = operator.output_shape
    flat = int(np.prod(out_shape))
    fd = np.empty((flat, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = 0.5 * step
        hi = operator.apply(theta + e, draw)
        lo = operator.apply(theta - e, draw)
        fd[:, j] = (hi - lo).ravel() / step
    analytic = np.empty((flat, d))
    for l in range(flat):
        cot = np.zeros(flat)
        cot[l] = 1.0
        analytic[l] = operator.vjp(theta, draw, cot.reshape(out_shape))
    denom = np.linalg.norm(fd)
    if denom == 0.0:
        return float(np.linalg.norm(analytic - fd))
    return float(np.linalg.norm(analytic - fd) / denom)


def default_pseudo_atom_model(
    seed: int = 2304,
    atom_count: int = 16,
    mode_count: int = 4,
    mode_scales=(1.0, 0.8, 0.5, 0.3),
    radius: float = 8.0 / 3.0,
) -> PseudoAtomModel:
    """Built-in stand-in for a normal-mode protein model.

    Atoms are seeded uniform draws in a ball; modes come from a QR
    orthonormalization of seeded Gaussian fields. Larger mode_scales mean
    larger (easier to recover) motions.
    """
    from .rng import substream

    rng = substream(seed, "pseudo-atoms")
    pts = []
    while len(pts) < atom_count:
        cand = rng.uniform(-radius, radius, size=3)
        if np.linalg.norm(cand) <= radius:
            pts.append(cand)
    base = np.array(pts)
    raw = substream(seed, "pseudo-modes").standard_normal((atom_count * 3, mode_count))
    q, r = np.linalg.qr(raw)
    q = q * np.sign(np.diag(r))  # fix the sign convention so the model is unique
    modes = q.T.reshape(mode_count, atom_count, 3)
    return PseudoAtomModel(base, modes, np.asarray(mode_scales, dtype=float))


# --------------------------------------------------------------------------
# image stack serialization: raw little-endian float32 + JSON sidecar


def write_image_stack(path, images: np.ndarray, spec: ImageSpec) -> None:
    """Raw little-endian float32, row-major, with a .json sidecar."""
    arr = np.ascontiguousarray(np.asarray(images, dtype="<f4"))
    if arr.ndim == 2:
        arr = arr[None]
    path = Path(path)
    path.write_bytes(arr.tobytes())
    meta = {
        "side": spec.side,
        "extent": spec.extent,
        "count": int(arr.shape[0]),
        "dtype": "<f4",
    }
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def read_image_stack(path) -> tuple:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text(encoding="utf-8"))
    raw = np.frombuffer(path.read_bytes(), dtype=meta["dtype"])
    images = raw.reshape(meta["count"], meta["side"], meta["side"])
    return images, meta
