import numpy as np
import pytest

from sipflow.discrepancy import (
    DiscrepancySpec,
    EnergyKernel,
    GaussianKernel,
    SampleCloud,
    discrepancy_value,
    energy_distance,
    first_variation_grads,
    kl_first_variation_grad,
    kl_value,
    mmd_first_variation_grad,
    mmd_sq_value,
    value_and_grads,
    within_cloud_term,
)
from sipflow.ensemble import KdeDensity, kde_eval
from sipflow.rng import substream


# ---------------------------------------------------------------------------
# brute-force oracles (independent plain double loops)


def energy_distance_oracle(a, b):
    def mean_dist(x, y):
        total = 0.0
        for xi in x:
            for yj in y:
                total += np.linalg.norm(xi - yj)
        return total / (len(x) * len(y))

    val = 2 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b)
    return np.sqrt(max(0.0, val))


def mmd_sq_oracle(a, b, kernel):
    def ksum(x, y):
        total = 0.0
        for xi in x:
            for yj in y:
                total += kernel(xi, yj)
        return total

    n, m = len(a), len(b)
    return ksum(a, a) / (2 * n * n) + ksum(b, b) / (2 * m * m) - ksum(a, b) / (n * m)


def kl_oracle(a, b, eps):
    da = KdeDensity(a, eps)
    db = KdeDensity(b, eps)
    return np.mean([np.log(kde_eval(da, y) / kde_eval(db, y)) for y in a])


def energy_kernel_fn(x, y):
    return -np.linalg.norm(x - y) + np.linalg.norm(x) + np.linalg.norm(y)


def random_clouds(seed, dim, max_n=8):
    rng = substream(seed, "clouds")
    n = int(rng.integers(1, max_n + 1))
    m = int(rng.integers(1, max_n + 1))
    return rng.standard_normal((n, dim)) * 2, rng.standard_normal((m, dim)) * 2


class TestEnergyDistance:
    def test_identical_clouds(self):
        a = np.array([[0.0], [2.0]])
        assert energy_distance(a, a.copy()) == 0.0

    def test_point_masses(self):
        assert energy_distance(np.array([[0.0]]), np.array([[2.0]])) == pytest.approx(2.0)

    def test_small_hand_case(self):
        assert energy_distance(np.array([[0.0], [2.0]]), np.array([[1.0]])) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    @pytest.mark.parametrize("dim", [1, 3])
    def test_matches_brute_force(self, seed, dim):
        a, b = random_clouds(seed, dim)
        assert energy_distance(a, b) == pytest.approx(energy_distance_oracle(a, b), abs=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_symmetry_and_nonnegativity(self, seed):
        a, b = random_clouds(100 + seed, 2)
        d1, d2 = energy_distance(a, b), energy_distance(b, a)
        assert d1 == pytest.approx(d2, abs=1e-12)
        assert d1 >= 0

    def test_zero_iff_equal_multisets(self):
        rng = substream(200, "t")
        a = rng.standard_normal((6, 2))
        perm = a[rng.permutation(6)]
        # the square root amplifies summation-order residue to ~sqrt(eps)
        assert energy_distance(a, perm) == pytest.approx(0.0, abs=1e-6)
        assert mmd_sq_value(a, perm, DiscrepancySpec(kind="energy")) == pytest.approx(0.0, abs=1e-13)
        b = a.copy()
        b[0] += 0.5
        assert energy_distance(a, b) > 1e-3

    @pytest.mark.parametrize("seed", range(5))
    def test_rigid_rotation_invariance(self, seed):
        rng = substream(300 + seed, "t")
        a, b = random_clouds(seed, 3)
        q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        assert energy_distance(a @ q.T, b @ q.T) == pytest.approx(energy_distance(a, b), abs=1e-10)

    def test_exchangeability(self):
        rng = substream(400, "t")
        a, b = random_clouds(7, 2)
        pa = a[rng.permutation(len(a))]
        pb = b[rng.permutation(len(b))]
        assert energy_distance(pa, pb) == pytest.approx(energy_distance(a, b), abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            energy_distance(np.zeros((2, 1)), np.zeros((2, 2)))


class TestMmdSq:
    def test_identical_clouds(self):
        rng = substream(500, "t")
        a = rng.standard_normal((5, 2))
        spec = DiscrepancySpec(kind="energy")
        assert abs(mmd_sq_value(a, a.copy(), spec)) < 1e-12

    def test_energy_kernel_hand_case(self):
        spec = DiscrepancySpec(kind="energy")
        val = mmd_sq_value(np.array([[0.0], [2.0]]), np.array([[1.0]]), spec)
        assert val == pytest.approx(0.5, abs=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_brute_force_energy(self, seed):
        a, b = random_clouds(seed, 2)
        spec = DiscrepancySpec(kind="energy")
        assert mmd_sq_value(a, b, spec) == pytest.approx(mmd_sq_oracle(a, b, energy_kernel_fn), abs=1e-10)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_brute_force_gaussian(self, seed):
        a, b = random_clouds(seed, 2)
        ell = 0.9
        spec = DiscrepancySpec(kind="mmd", kernel=GaussianKernel(ell))
        oracle = mmd_sq_oracle(a, b, lambda x, y: np.exp(-np.sum((x - y) ** 2) / (2 * ell**2)))
        assert mmd_sq_value(a, b, spec) == pytest.approx(oracle, abs=1e-10)

    def test_half_energy_distance_squared(self):
        for seed in range(8):
            a, b = random_clouds(600 + seed, 3)
            spec = DiscrepancySpec(kind="energy")
            assert mmd_sq_value(a, b, spec) == pytest.approx(0.5 * energy_distance(a, b) ** 2, abs=1e-10)

    def test_wide_gaussian_kernel_limit(self):
        a, b = random_clouds(700, 2)
        spec = DiscrepancySpec(kind="mmd", kernel=GaussianKernel(1e8))
        assert abs(mmd_sq_value(a, b, spec)) < 1e-10

    def test_nonnegative_for_pd_kernels(self):
        for seed in range(10):
            a, b = random_clouds(800 + seed, 2)
            spec = DiscrepancySpec(kind="mmd", kernel=GaussianKernel(1.3))
            assert mmd_sq_value(a, b, spec) >= -1e-12


class TestMmdFirstVariation:
    def test_identical_clouds_zero(self):
        rng = substream(900, "t")
        a = rng.standard_normal((5, 2))
        spec = DiscrepancySpec(kind="energy")
        g = mmd_first_variation_grad(rng.standard_normal(2), a, a.copy(), spec)
        np.testing.assert_allclose(g, 0.0, atol=1e-14)

    def test_energy_hand_chain_rule(self):
        spec = DiscrepancySpec(kind="energy")
        g = mmd_first_variation_grad(np.array([1.0]), np.array([[0.0]]), np.array([[4.0]]), spec)
        assert g[0] == pytest.approx(-2.0, abs=1e-14)

    @pytest.mark.parametrize("kind", ["energy", "gaussian"])
    def test_matches_finite_difference(self, kind):
        rng = substream(1000, kind)
        a, b = random_clouds(31, 2)
        if kind == "energy":
            spec = DiscrepancySpec(kind="energy")
        else:
            spec = DiscrepancySpec(kind="mmd", kernel=GaussianKernel(0.8))
        kernel = spec.kernel

        def scalar_field(y):
            return kernel.matrix(y[None, :], a).mean() - kernel.matrix(y[None, :], b).mean()

        h = 1e-6
        for _ in range(100):
            y = rng.standard_normal(2) * 2
            if min(np.linalg.norm(a - y, axis=1).min(), np.linalg.norm(b - y, axis=1).min()) < 1e-3:
                continue
            if np.linalg.norm(y) < 1e-3:
                continue
            fd = np.empty(2)
            for j in range(2):
                e = np.zeros(2)
                e[j] = h / 2
                fd[j] = (scalar_field(y + e) - scalar_field(y - e)) / h
            g = mmd_first_variation_grad(y, a, b, spec)
            np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-8)


class TestKl:
    SPEC = DiscrepancySpec(kind="kl", kde_bandwidth=0.4)

    def test_identical_clouds(self):
        rng = substream(1100, "t")
        a = rng.standard_normal((6, 1))
        assert kl_value(a, a.copy(), self.SPEC) == 0.0

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_oracle(self, seed):
        a, b = random_clouds(seed, 1)
        assert kl_value(a, b, self.SPEC) == pytest.approx(kl_oracle(a, b, 0.4), abs=1e-8)

    def test_gaussian_closed_form_limit(self):
        rng = substream(1200, "t")
        n = 4000
        a = rng.standard_normal((n, 1))
        b = rng.standard_normal((n, 1)) + 1.0
        spec = DiscrepancySpec(kind="kl", kde_bandwidth=0.02)
        # KL(N(0,1) || N(1,1)) = 1/2
        assert kl_value(a, b, spec) == pytest.approx(0.5, abs=0.05)

    def test_asymmetry(self):
        rng = substream(1300, "t")
        a = rng.standard_normal((50, 1))
        b = rng.standard_normal((50, 1)) + 1.0
        assert abs(kl_value(a, b, self.SPEC) - kl_value(b, a, self.SPEC)) > 1e-3

    def test_requires_bandwidth(self):
        with pytest.raises(ValueError, match="bandwidth"):
            DiscrepancySpec(kind="kl")

    def test_single_center_gradient_constant(self):
        spec = DiscrepancySpec(kind="kl", kde_bandwidth=0.3)
        for y in (0.0, 0.9, -2.0):
            g = kl_first_variation_grad(np.array([y]), np.array([[0.4]]), np.array([[-0.2]]), spec)
            assert g[0] == pytest.approx((0.4 - (-0.2)) / 0.3, rel=1e-12)

    def test_gradient_matches_finite_difference(self):
        rng = substream(1400, "t")
        a, b = random_clouds(77, 1)
        spec = self.SPEC
        h = 1e-6
        for _ in range(100):
            y = rng.standard_normal(1) * 2
            da, db = KdeDensity(a, 0.4), KdeDensity(b, 0.4)

            def field(q):
                return np.log(kde_eval(da, q)) - np.log(kde_eval(db, q))

            fd = (field(y + h / 2) - field(y - h / 2)) / h
            g = kl_first_variation_grad(y, a, b, spec)
            assert g[0] == pytest.approx(fd, rel=1e-5, abs=1e-8)


class TestBatchPaths:
    """The flow's batched fast paths must agree with the pointwise API."""

    @pytest.mark.parametrize("dim", [1, 3])
    def test_energy_batch_matches_pointwise(self, dim):
        rng = substream(1500, "t", dim)
        a = rng.standard_normal((40, dim))
        b = rng.standard_normal((30, dim))
        spec = DiscrepancySpec(kind="energy")
        queries = a[:10]
        batch = first_variation_grads(queries, a, b, spec)
        for i, y in enumerate(queries):
            np.testing.assert_allclose(batch[i], mmd_first_variation_grad(y, a, b, spec), atol=1e-12)

    def test_gaussian_batch_matches_pointwise(self):
        rng = substream(1600, "t")
        a = rng.standard_normal((20, 2))
        b = rng.standard_normal((25, 2))
        spec = DiscrepancySpec(kind="mmd", kernel=GaussianKernel(0.7))
        queries = rng.standard_normal((8, 2))
        batch = first_variation_grads(queries, a, b, spec)
        for i, y in enumerate(queries):
            np.testing.assert_allclose(batch[i], mmd_first_variation_grad(y, a, b, spec), atol=1e-12)

    def test_kl_batch_matches_pointwise(self):
        rng = substream(1700, "t")
        a = rng.standard_normal((15, 1))
        b = rng.standard_normal((12, 1))
        spec = DiscrepancySpec(kind="kl", kde_bandwidth=0.5)
        queries = rng.standard_normal((6, 1))
        batch = first_variation_grads(queries, a, b, spec)
        for i, y in enumerate(queries):
            np.testing.assert_allclose(batch[i], kl_first_variation_grad(y, a, b, spec), atol=1e-12)

    @pytest.mark.parametrize("kind", ["energy", "kl", "gaussian"])
    @pytest.mark.parametrize("dim", [1, 2])
    def test_value_and_grads_consistency(self, kind, dim):
        rng = substream(1800, kind, dim)
        a = rng.standard_normal((30, dim))
        b = rng.standard_normal((35, dim))
        if kind == "energy":
            spec = DiscrepancySpec(kind="energy")
        elif kind == "gaussian":
            spec = DiscrepancySpec(kind="mmd", kernel=GaussianKernel(1.1))
        else:
            spec = DiscrepancySpec(kind="kl", kde_bandwidth=0.6)
        value, grads = value_and_grads(a, b, spec)
        assert value == pytest.approx(discrepancy_value(a, b, spec), abs=1e-10)
        np.testing.assert_allclose(grads, first_variation_grads(a, a, b, spec), atol=1e-10)

    def test_obs_within_precompute_matches(self):
        rng = substream(1900, "t")
        a = rng.standard_normal((10, 2))
        b = rng.standard_normal((12, 2))
        spec = DiscrepancySpec(kind="energy")
        v1, g1 = value_and_grads(a, b, spec)
        v2, g2 = value_and_grads(a, b, spec, obs_within=within_cloud_term(b, spec))
        assert v1 == v2
        np.testing.assert_array_equal(g1, g2)


class TestReductionOrder:
    def test_permutation_changes_nothing_beyond_1e12(self):
        rng = substream(2000, "t")
        a = rng.standard_normal((64, 2))
        b = rng.standard_normal((50, 2))
        spec = DiscrepancySpec(kind="energy")
        base = mmd_sq_value(a, b, spec)
        for _ in range(5):
            pa = a[rng.permutation(len(a))]
            pb = b[rng.permutation(len(b))]
            assert mmd_sq_value(pa, pb, spec) == pytest.approx(base, abs=1e-12)


class TestSampleCloud:
    def test_rejects_empty_and_nonfinite(self):
        with pytest.raises(ValueError):
            SampleCloud(np.empty((0, 1)))
        with pytest.raises(ValueError):
            SampleCloud(np.array([[np.inf, 0.0]]))

    def test_kernel_psd_check(self):
        class BadKernel:
            def matrix(self, a, b):
                return -np.ones((a.shape[0], b.shape[0]))

            def grad_query(self, y, z):
                return np.zeros_like(z)

        with pytest.raises(ValueError, match="positive-definiteness"):
            DiscrepancySpec(kind="mmd", kernel=BadKernel())
