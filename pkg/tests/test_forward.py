import numpy as np
import pytest
from scipy.stats import chisquare

from sipflow.ensemble import GaussianMixtureSpec, sample_mixture
from sipflow.forward import (
    AffineIdentityOperator,
    ImageSpec,
    NanoclusterOperator,
    NuisanceDraw,
    ToyProteinOperator,
    affine_identity_apply,
    default_pseudo_atom_model,
    finite_difference_check,
    identity_quaternion,
    nanocluster_render,
    read_image_stack,
    rotation_angle,
    rotation_matrix,
    sample_rotation,
    sample_rotations,
    toy_protein_apply,
    vjp,
    write_image_stack,
)
from sipflow.rng import substream

SPEC16 = ImageSpec(side=16, extent=4.0, kernel_width=0.5)


def _draw(shape, seed=0, rotation=None):
    rng = substream(seed, "draw")
    q = rotation if rotation is not None else identity_quaternion()
    return NuisanceDraw(q, rng.standard_normal(shape))


class TestAffineIdentity:
    def test_zero_noise(self):
        out = affine_identity_apply(3.0, NuisanceDraw(identity_quaternion(), np.zeros(1)))
        assert out[0] == 3.0

    def test_direct_sum(self):
        out = affine_identity_apply(-2.0, NuisanceDraw(identity_quaternion(), np.array([0.5])))
        assert out[0] == -1.5

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            affine_identity_apply(np.zeros(2), NuisanceDraw(identity_quaternion(), np.zeros(3)))

    def test_variance_additivity(self):
        mix = GaussianMixtureSpec(((0.5, [-2.0], [[0.75**2]]), (0.5, [2.0], [[0.3**2]])))
        thetas = sample_mixture(mix, 10_000, substream(1, "t")).particles
        noise = 1.5 * substream(1, "n").standard_normal((10_000, 1))
        out = thetas + noise
        expected = mix.covariance()[0, 0] + 2.25
        assert out.var() == pytest.approx(expected, rel=0.05)


class TestNanoclusterRender:
    def test_coincident_atoms_origin(self):
        img = nanocluster_render(np.zeros(2), SPEC16)
        grid = SPEC16.grid()
        nearest = np.argmin(np.abs(grid))
        expected_peak = 4 * np.exp(-2 * grid[nearest] ** 2 / (2 * 0.5**2))
        assert img.max() == pytest.approx(expected_peak, rel=1e-12)
        # grid points mirror as g[side - i] = -g[i] for i >= 1
        assert np.allclose(img[1:], img[1:][::-1], atol=1e-12)
        assert np.allclose(img[:, 1:], img[:, 1:][:, ::-1], atol=1e-12)

    def test_latent_sign_flip_invariance(self):
        theta = np.array([1.1, 0.7])
        base = nanocluster_render(theta, SPEC16)
        for flip in ([-1.0, 1.0], [1.0, -1.0], [-1.0, -1.0]):
            np.testing.assert_allclose(nanocluster_render(theta * flip, SPEC16), base, atol=1e-13)

    def test_four_blob_pixel_formula(self):
        spec = ImageSpec(side=128, extent=4.0, kernel_width=0.4)
        theta = np.array([3.0, 3.0])
        img = nanocluster_render(theta, spec)
        grid = spec.grid()
        i = int(np.argmin(np.abs(grid - 1.5)))
        atoms = 0.5 * theta * np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]])
        direct = sum(
            np.exp(-((a[0] - grid[i]) ** 2 + (a[1] - grid[i]) ** 2) / (2 * 0.4**2)) for a in atoms
        )
        assert img[i, i] == pytest.approx(direct, abs=1e-6)
        # four well-separated blobs: intensity concentrated near (+-1.5, +-1.5)
        peak = img.max()
        centre = int(np.argmin(np.abs(grid)))
        assert img[centre, centre] < 0.01 * peak

    def test_grid_matches_convention(self):
        spec = ImageSpec(side=128, extent=4.0, kernel_width=0.4)
        g = spec.grid()
        i = np.arange(128)
        np.testing.assert_allclose(g, -4 + 8 * i / 128, rtol=0, atol=0)


class TestToyProtein:
    model = default_pseudo_atom_model()
    spec = SPEC16

    def test_modes_orthonormal(self):
        flat = self.model.modes.reshape(self.model.mode_count, -1)
        np.testing.assert_allclose(flat @ flat.T, np.eye(4), atol=1e-10)

    def test_zero_theta_renders_base(self):
        op = ToyProteinOperator(self.model, self.spec)
        img = toy_protein_apply(np.zeros(4), _draw((16, 16), 2) , self.model, self.spec)
        noiseless = op.apply_noiseless(np.zeros(4))
        np.testing.assert_allclose(img - _draw((16, 16), 2).noise, noiseless, atol=1e-12)

    def test_position_linearity(self):
        rng = substream(3, "t")
        t1, t2 = rng.standard_normal(4), rng.standard_normal(4)
        p = self.model.positions
        residual = p(t1 + t2) - p(t1) - p(t2) + p(np.zeros(4))
        np.testing.assert_allclose(residual, 0.0, atol=1e-12)

    def test_z_rotation_commutes_with_projection(self):
        from sipflow.forward import _render_points

        alpha = 0.73
        q = np.array([np.cos(alpha / 2), 0.0, 0.0, np.sin(alpha / 2)])
        theta = substream(4, "t").standard_normal(4)
        op = ToyProteinOperator(self.model, self.spec)
        rotated_render = op.apply_noiseless(theta, q)
        pos = self.model.positions(theta)
        rot2d = np.array([[np.cos(alpha), -np.sin(alpha)], [np.sin(alpha), np.cos(alpha)]])
        direct = _render_points(pos[:, :2] @ rot2d.T, self.spec)
        np.testing.assert_allclose(rotated_render, direct, atol=1e-6)

    def test_quaternion_sign_flip(self):
        q = sample_rotation(substream(5, "t"))
        op = ToyProteinOperator(self.model, self.spec)
        theta = substream(6, "t").standard_normal(4)
        np.testing.assert_array_equal(op.apply_noiseless(theta, q), op.apply_noiseless(theta, -q))

    def test_noise_enters_affinely(self):
        op = ToyProteinOperator(self.model, self.spec)
        q = sample_rotation(substream(7, "t"))
        noise = substream(8, "t").standard_normal((16, 16))
        theta = substream(9, "t").standard_normal(4)
        with_n = op.apply(theta, NuisanceDraw(q, noise))
        without = op.apply(theta, NuisanceDraw(q, np.zeros((16, 16))))
        np.testing.assert_allclose(with_n - without, noise, atol=1e-12)


class TestSampleRotation:
    def test_unit_norm(self):
        rng = substream(10, "t")
        for _ in range(50):
            assert abs(np.linalg.norm(sample_rotation(rng)) - 1.0) < 1e-12

    def test_deterministic_sequence(self):
        a = [sample_rotation(substream(11, "t", i)) for i in range(5)]
        b = [sample_rotation(substream(11, "t", i)) for i in range(5)]
        np.testing.assert_array_equal(a, b)

    def test_batch_matches_sequential(self):
        batch = sample_rotations(substream(12, "t"), 6)
        seq = np.array([sample_rotation(substream(12, "t")) for _ in range(1)])
        np.testing.assert_array_equal(batch[0], seq[0])

    def test_haar_mean_rotation_matrix(self):
        quats = sample_rotations(substream(13, "t"), 100_000)
        mats = np.array([rotation_matrix(q) for q in quats[:20_000]])
        assert np.abs(mats.mean(axis=0)).max() < 0.02

    def test_angle_density_chi_square(self):
        quats = sample_rotations(substream(14, "t"), 40_000)
        angles = np.array([rotation_angle(q) for q in quats])
        edges = np.linspace(0.0, np.pi, 21)
        counts, _ = np.histogram(angles, bins=edges)
        cdf = (edges - np.sin(edges)) / np.pi
        expected = np.diff(cdf) * len(angles)
        stat = chisquare(counts, expected)
        assert stat.pvalue > 0.001


class TestVjp:
    def test_identity_returns_cotangent(self):
        op = AffineIdentityOperator(3)
        cot = np.array([0.1, -2.0, 4.0])
        out = vjp(op, np.zeros(3), _draw(3, 15), cot)
        np.testing.assert_array_equal(out, cot)

    def test_nanocluster_origin_symmetry_kills_gradient(self):
        op = NanoclusterOperator(SPEC16)
        cot = substream(16, "t").standard_normal((16, 16))
        out = op.vjp(np.zeros(2), _draw((16, 16), 16), cot)
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_unknown_operator(self):
        with pytest.raises(ValueError, match="unknown operator"):
            vjp(object(), np.zeros(1), _draw(1), np.zeros(1))

    @pytest.mark.parametrize("case", ["identity", "nanocluster", "protein"])
    def test_matches_finite_differences(self, case):
        rng = substream(17, case)
        if case == "identity":
            op = AffineIdentityOperator(4)
            for i in range(10):
                theta = rng.standard_normal(4)
                err = finite_difference_check(op, theta, _draw(4, i), 1e-4)
                assert err < 1e-10
            return
        if case == "nanocluster":
            op = NanoclusterOperator(SPEC16)
            dim = 2
        else:
            op = ToyProteinOperator(default_pseudo_atom_model(), SPEC16)
            dim = 4
        for i in range(10):
            theta = rng.standard_normal(dim)
            rot = sample_rotation(rng)
            err = finite_difference_check(op, theta, _draw((16, 16), i, rot), 1e-4)
            assert err < 1e-5

    def test_vjp_agrees_with_fd_jacobian_action(self):
        op = NanoclusterOperator(SPEC16)
        rng = substream(18, "t")
        theta = rng.standard_normal(2)
        draw = _draw((16, 16), 18)
        cot = rng.standard_normal((16, 16))
        h = 1e-5
        fd = np.empty(2)
        for j in range(2):
            e = np.zeros(2)
            e[j] = h / 2
            fd[j] = np.sum(cot * (op.apply(theta + e, draw) - op.apply(theta - e, draw))) / h
        np.testing.assert_allclose(op.vjp(theta, draw, cot), fd, rtol=1e-5)


class TestImageStack:
    def test_round_trip(self, tmp_path):
        spec = ImageSpec(side=8, extent=2.0, kernel_width=0.3)
        imgs = substream(19, "t").standard_normal((5, 8, 8)).astype(np.float32)
        path = tmp_path / "stack.f32"
        write_image_stack(path, imgs, spec)
        back, meta = read_image_stack(path)
        np.testing.assert_array_equal(back, imgs)
        assert meta["count"] == 5 and meta["side"] == 8 and meta["dtype"] == "<f4"


class TestNuisanceDraw:
    def test_rejects_non_unit_quaternion(self):
        with pytest.raises(ValueError, match="unit norm"):
            NuisanceDraw(np.array([1.0, 1.0, 0.0, 0.0]), np.zeros(1))

    def test_rejects_non_finite_noise(self):
        with pytest.raises(ValueError, match="finite"):
            NuisanceDraw(identity_quaternion(), np.array([np.nan]))
