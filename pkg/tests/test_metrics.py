import itertools

import numpy as np
import pytest

from sipflow.ensemble import GaussianMixtureSpec, sample_mixture
from sipflow.metrics import kde_mode_count, pca_fit_project, w2_1d, w2_assignment
from sipflow.rng import substream


def w2_permutation_oracle(a, b):
    n = len(a)
    best = np.inf
    for perm in itertools.permutations(range(n)):
        cost = sum(np.sum((a[i] - b[p]) ** 2) for i, p in enumerate(perm))
        best = min(best, cost)
    return np.sqrt(best / n)


class TestW2OneD:
    def test_identical(self):
        x = substream(0, "t").standard_normal(20)
        assert w2_1d(x, x.copy()) == 0.0

    def test_point_masses(self):
        assert w2_1d([0.0], [3.0]) == 3.0

    def test_sorted_pairing(self):
        assert w2_1d([0.0, 1.0], [2.0, 5.0]) == pytest.approx(np.sqrt(10), rel=1e-12)

    def test_empty_and_mismatch(self):
        with pytest.raises(ValueError, match="empty"):
            w2_1d([], [])
        with pytest.raises(ValueError, match="resample"):
            w2_1d([0.0], [1.0, 2.0])

    def test_decreases_with_sample_size(self):
        mix = GaussianMixtureSpec(((0.5, [-2.0], [[0.5625]]), (0.5, [2.0], [[0.09]])))
        medians = []
        for n in (100, 1000, 10000):
            vals = []
            for seed in range(20):
                a = sample_mixture(mix, n, substream(seed, "a", n)).particles[:, 0]
                b = sample_mixture(mix, n, substream(seed, "b", n)).particles[:, 0]
                vals.append(w2_1d(a, b))
            medians.append(np.median(vals))
        assert medians[0] > medians[1] > medians[2]


class TestW2Assignment:
    def test_shuffled_equal_clouds(self):
        rng = substream(1, "t")
        a = rng.standard_normal((12, 3))
        assert w2_assignment(a, a[rng.permutation(12)]) == pytest.approx(0.0, abs=1e-8)

    def test_matches_1d_sorting(self):
        rng = substream(2, "t")
        a = rng.standard_normal(15)
        b = rng.standard_normal(15) + 0.5
        assert w2_assignment(a, b) == pytest.approx(w2_1d(a, b), abs=1e-10)

    @pytest.mark.parametrize("n", [3, 4, 5, 6])
    def test_matches_exhaustive_permutations(self, n):
        rng = substream(3, "t", n)
        a = rng.standard_normal((n, 2))
        b = rng.standard_normal((n, 2))
        assert w2_assignment(a, b) == pytest.approx(w2_permutation_oracle(a, b), abs=1e-12)

    def test_symmetry(self):
        rng = substream(4, "t")
        a, b = rng.standard_normal((8, 2)), rng.standard_normal((8, 2))
        assert w2_assignment(a, b) == pytest.approx(w2_assignment(b, a), abs=1e-12)

    def test_triangle_inequality(self):
        rng = substream(5, "t")
        for _ in range(10):
            a, b, c = (rng.standard_normal((6, 2)) for _ in range(3))
            assert w2_assignment(a, c) <= w2_assignment(a, b) + w2_assignment(b, c) + 1e-10

    def test_rigid_motion_invariance(self):
        rng = substream(6, "t")
        a, b = rng.standard_normal((7, 3)), rng.standard_normal((7, 3))
        q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        base = w2_assignment(a, b)
        assert w2_assignment(a @ q.T, b @ q.T) == pytest.approx(base, abs=1e-10)
        perm = rng.permutation(7)
        assert w2_assignment(a[perm], b[perm]) == pytest.approx(base, abs=1e-12)

    def test_count_mismatch(self):
        with pytest.raises(ValueError, match="counts"):
            w2_assignment(np.zeros((2, 1)), np.zeros((3, 1)))


class TestPca:
    def test_planar_reference_exact(self):
        rng = substream(7, "t")
        coords = rng.standard_normal((40, 2)) * [3.0, 1.0]
        basis_vecs, _ = np.linalg.qr(rng.standard_normal((6, 2)))
        cloud = coords @ basis_vecs.T + 0.5
        basis, (proj_ref,) = pca_fit_project(cloud, [])
        recon = proj_ref @ basis.components + basis.mean
        np.testing.assert_allclose(recon, cloud, atol=1e-8)

    def test_reference_projection_variance_matches(self):
        rng = substream(8, "t")
        cloud = rng.standard_normal((500, 5)) * [4.0, 2.0, 1.0, 0.5, 0.2]
        basis, (proj,) = pca_fit_project(cloud, [])
        np.testing.assert_allclose(proj.var(axis=0), basis.explained_variance, atol=1e-8)
        assert basis.explained_variance[0] >= basis.explained_variance[1]

    def test_isotropic_spectrum(self):
        cloud = substream(9, "t").standard_normal((10_000, 4))
        basis, _ = pca_fit_project(cloud, [])
        v1, v2 = basis.explained_variance
        assert abs(v1 - v2) / v1 < 0.10

    def test_duplication_invariance(self):
        rng = substream(10, "t")
        cloud = rng.standard_normal((30, 4))
        b1, _ = pca_fit_project(cloud, [])
        b2, _ = pca_fit_project(np.vstack([cloud, cloud]), [])
        # components are sign-ambiguous
        for row1, row2 in zip(b1.components, b2.components):
            assert min(np.abs(row1 - row2).max(), np.abs(row1 + row2).max()) < 1e-10

    def test_degenerate_reference(self):
        line = np.outer(np.arange(10.0), np.array([1.0, 2.0, 0.0]))
        with pytest.raises(ValueError, match="degenerate"):
            pca_fit_project(line, [])

    def test_others_projected_in_reference_frame(self):
        rng = substream(11, "t")
        ref = rng.standard_normal((50, 3))
        other = rng.standard_normal((20, 3)) + 5.0
        basis, (pref, pother) = pca_fit_project(ref, [other])
        np.testing.assert_allclose(pother, (other - basis.mean) @ basis.components.T, atol=1e-12)


class TestModeCount:
    def test_bimodal(self):
        mix = GaussianMixtureSpec(((0.5, [-3.0], [[0.3]]), (0.5, [3.0], [[0.3]])))
        x = sample_mixture(mix, 2000, substream(12, "t")).particles[:, 0]
        assert kde_mode_count(x) == 2

    def test_unimodal(self):
        x = substream(13, "t").standard_normal(2000)
        assert kde_mode_count(x) == 1
