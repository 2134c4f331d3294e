import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sipflow.ensemble import (
    GaussianMixtureSpec,
    KdeDensity,
    ParticleEnsemble,
    kde_eval,
    kde_eval_batch,
    kde_grad_log,
    read_particles_csv,
    sample_mixture,
    silverman_bandwidth,
    write_particles_csv,
)
from sipflow.rng import substream

PAPER_MIX = GaussianMixtureSpec(
    ((0.5, [-2.0], [[0.75**2]]), (0.5, [2.0], [[0.3**2]]))
)


class TestMixtureSpec:
    def test_rejects_indefinite_covariance(self):
        with pytest.raises(ValueError, match="positive definite"):
            GaussianMixtureSpec(((1.0, [0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]]),))

    def test_rejects_asymmetric_covariance(self):
        with pytest.raises(ValueError, match="symmetric"):
            GaussianMixtureSpec(((1.0, [0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]]),))

    def test_rejects_bad_weights(self):
        with pytest.raises(ValueError, match="sum"):
            GaussianMixtureSpec(((0.6, [0.0], [[1.0]]), (0.6, [1.0], [[1.0]])))
        with pytest.raises(ValueError, match="nonnegative"):
            GaussianMixtureSpec(((1.5, [0.0], [[1.0]]), (-0.5, [1.0], [[1.0]])))

    def test_moments(self):
        assert PAPER_MIX.mean() == pytest.approx([0.0])
        var = 0.5 * (0.75**2 + 4.0) + 0.5 * (0.3**2 + 4.0)
        assert PAPER_MIX.covariance()[0, 0] == pytest.approx(var)


class TestSampleMixture:
    def test_identity_case(self):
        spec = GaussianMixtureSpec(((1.0, [0.0, 0.0, 0.0], np.eye(3)),))
        ens = sample_mixture(spec, 4, substream(0, "t"))
        assert ens.particles.shape == (4, 3)
        assert np.all(np.isfinite(ens.particles))

    def test_paper_mixture_mean(self):
        ens = sample_mixture(PAPER_MIX, 10_000, substream(1, "t"))
        pop_std = np.sqrt(PAPER_MIX.covariance()[0, 0])
        assert abs(ens.particles.mean()) < 3 * pop_std / 100

    def test_degenerate_weights(self):
        spec = GaussianMixtureSpec(((1.0, [-2.0], [[0.75**2]]), (0.0, [2.0], [[0.09]])))
        ens = sample_mixture(spec, 4000, substream(2, "t"))
        assert ens.particles.mean() == pytest.approx(-2.0, abs=0.06)

    def test_bit_reproducible(self):
        a = sample_mixture(PAPER_MIX, 100, substream(3, "t")).particles
        b = sample_mixture(PAPER_MIX, 100, substream(3, "t")).particles
        assert np.array_equal(a, b)

    def test_rejects_bad_count(self):
        with pytest.raises(ValueError):
            sample_mixture(PAPER_MIX, 0, substream(0, "t"))


class TestKde:
    def test_single_center_at_center(self):
        kd = KdeDensity(np.array([[0.0]]), 1.0)
        assert kde_eval(kd, 0.0) == pytest.approx((2 * np.pi) ** -0.5, rel=1e-12)

    def test_two_centers(self):
        kd = KdeDensity(np.array([[-1.0], [1.0]]), 1.0)
        expected = (2 * np.pi) ** -0.5 * np.exp(-0.5)
        assert kde_eval(kd, 0.0) == pytest.approx(expected, rel=1e-12)

    def test_decays_beyond_hull(self):
        kd = KdeDensity(np.array([[-1.0], [2.0]]), 0.5)
        queries = np.linspace(2.5, 9.0, 30)
        vals = kde_eval_batch(kd, queries[:, None])
        assert np.all(np.diff(vals) < 0)
        assert np.all(vals > 0)

    def test_linearity_in_centers(self):
        rng = substream(4, "t")
        centers = rng.standard_normal((7, 2))
        kd = KdeDensity(centers, 0.7)
        q = rng.standard_normal(2)
        singles = [kde_eval(KdeDensity(c[None, :], 0.7), q) for c in centers]
        assert kde_eval(kd, q) == pytest.approx(np.mean(singles), rel=1e-12)

    def test_integrates_to_one_1d(self):
        rng = substream(5, "t")
        centers = rng.standard_normal(6) * 2.0
        eps = 0.8
        kd = KdeDensity(centers[:, None], eps)
        width = np.sqrt(eps)
        grid = np.linspace(centers.min() - 8 * width, centers.max() + 8 * width, 4001)
        vals = kde_eval_batch(kd, grid[:, None])
        assert np.trapezoid(vals, grid) == pytest.approx(1.0, abs=1e-4)

    def test_invalid_bandwidth(self):
        with pytest.raises(ValueError, match="bandwidth"):
            KdeDensity(np.array([[0.0]]), 0.0)


class TestKdeGradLog:
    def test_single_center_exact(self):
        kd = KdeDensity(np.array([[0.4, -0.2]]), 0.3)
        y = np.array([1.0, 0.5])
        np.testing.assert_allclose(kde_grad_log(kd, y), -(y - kd.centers[0]) / 0.3, rtol=1e-12)

    def test_symmetric_centers_zero(self):
        kd = KdeDensity(np.array([[-1.0], [1.0]]), 1.0)
        assert kde_grad_log(kd, 0.0)[0] == pytest.approx(0.0, abs=1e-14)

    def test_matches_finite_difference(self):
        rng = substream(6, "t")
        kd = KdeDensity(rng.standard_normal((5, 1)) * 1.5, 0.6)
        h = 1e-6
        for _ in range(100):
            y = rng.standard_normal(1) * 2.0
            lo = np.log(kde_eval(kd, y - h / 2))
            hi = np.log(kde_eval(kd, y + h / 2))
            fd = (hi - lo) / h
            assert kde_grad_log(kd, y)[0] == pytest.approx(fd, rel=1e-5)

    def test_finite_far_away(self):
        kd = KdeDensity(np.array([[0.0]]), 0.01)
        g = kde_grad_log(kd, np.array([50.0]))
        assert np.isfinite(g).all()


class TestSilverman:
    def test_two_point_closed_form(self):
        # std = 0.5, inverted-CDF IQR = 1 so IQR/1.34 > std and the min picks std
        width = 0.9 * 0.5 * 2 ** (-0.2)
        assert silverman_bandwidth([0.0, 1.0]) == pytest.approx(width**2, rel=1e-12)

    def test_scale_equivariance(self):
        rng = substream(7, "t")
        x = rng.standard_normal(400)
        base = silverman_bandwidth(x)
        assert silverman_bandwidth(3.0 * x) == pytest.approx(9.0 * base, rel=1e-10)

    def test_degenerate_data(self):
        with pytest.raises(ValueError, match="degenerate|identical"):
            silverman_bandwidth([1.0] * 10)

    def test_observed_dataset_bandwidth(self):
        # width on the bimodal-plus-noise benchmark dataset (n = 1e4, sigma = 1.5)
        latents = sample_mixture(PAPER_MIX, 10_000, substream(8, "latents")).particles[:, 0]
        noise = 1.5 * substream(8, "noise").standard_normal(10_000)
        width = np.sqrt(silverman_bandwidth(latents + noise))
        assert width == pytest.approx(0.3496, abs=0.02)


class TestParticleCsv:
    def test_round_trip_exact(self, tmp_path):
        pts = substream(9, "t").standard_normal((17, 3)) * np.pi
        path = tmp_path / "particles.csv"
        write_particles_csv(path, ParticleEnsemble(pts))
        back = read_particles_csv(path)
        assert np.array_equal(back.particles, pts)
        header = path.read_text().splitlines()[0]
        assert header == "dim0,dim1,dim2"


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=1, max_value=6), st.integers(min_value=0, max_value=2**32 - 1))
def test_kde_positive_everywhere(m, seed):
    rng = substream(seed, "hyp")
    kd = KdeDensity(rng.standard_normal((m, 2)), 0.5)
    q = rng.standard_normal((8, 2)) * 5
    assert np.all(kde_eval_batch(kd, q) > 0)


def test_ensemble_validation():
    with pytest.raises(ValueError):
        ParticleEnsemble(np.array([[np.inf]]))
    with pytest.raises(ValueError):
        ParticleEnsemble(np.empty((0, 2)))
