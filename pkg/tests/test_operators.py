import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stsl.operators import (
    convolution_operator,
    dct_codec,
    dense_operator,
    downsample_operator,
    gaussian_blur_operator,
    gaussian_kernel,
    identity_codec,
    identity_operator,
    make_task,
    mask_operator,
    motion_blur_operator,
    motion_kernel,
    orthogonal_codec,
    random_mask_operator,
    salt_pepper,
)


def all_operators(rng):
    return [
        identity_operator(16),
        random_mask_operator(64, 0.4, rng),
        downsample_operator((8, 8), 4),
        gaussian_blur_operator((8, 8), 5, 1.0),
        motion_blur_operator((8, 8), 5, 30.0),
        convolution_operator((6, 7), rng.random((3, 3))),
        dense_operator(rng.standard_normal((3, 5))),
    ]


class TestAdjoint:
    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_dot_product_identity(self, seed):
        rng = np.random.default_rng(seed)
        for op in all_operators(rng):
            x, y = rng.standard_normal(op.input_dim), rng.standard_normal(op.output_dim)
            lhs, rhs = op.apply(x) @ y, x @ op.adjoint(y)
            assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))

    def test_matrix_transpose(self, rng):
        for op in all_operators(rng):
            M = op.matrix()
            np.testing.assert_allclose(op.adjoint(np.eye(op.output_dim)), M, atol=1e-14)

    def test_batched_apply(self, rng):
        op = gaussian_blur_operator((8, 8), 3, 0.7)
        X = rng.standard_normal((3, 64))
        np.testing.assert_allclose(op.apply(X), np.array([op.apply(x) for x in X]))

    def test_norms(self, rng):
        for op in all_operators(rng):
            assert op.norm() == pytest.approx(np.linalg.norm(op.matrix(), 2), rel=1e-10)


class TestOperators:
    def test_identity(self, rng):
        x = rng.standard_normal(9)
        np.testing.assert_array_equal(identity_operator(9).apply(x), x)

    def test_mask_keeps_and_zero_fills(self, rng):
        op = random_mask_operator(100, 0.4, rng)
        keep = op.params["keep"]
        assert op.output_dim == 60
        x = rng.standard_normal(100)
        np.testing.assert_array_equal(op.apply(x), x[keep])
        back = op.adjoint(op.apply(x))
        np.testing.assert_array_equal(back[keep], x[keep])
        assert np.count_nonzero(back) == 60

    def test_mask_from_bitmap(self):
        op = mask_operator([[True, False], [False, True]])
        np.testing.assert_array_equal(op.apply(np.arange(4.0)), [0.0, 3.0])

    def test_downsample_constant(self):
        op = downsample_operator((32, 32), 4)
        np.testing.assert_allclose(op.apply(np.full(1024, 0.7)), np.full(64, 0.7))

    def test_downsample_indivisible(self):
        with pytest.raises(ValueError):
            downsample_operator((10, 10), 4)

    @pytest.mark.parametrize("make", [lambda: gaussian_kernel(9, 1.5), lambda: motion_kernel(7, 45.0)])
    def test_blur_preserves_constants(self, make):
        op = convolution_operator((12, 12), make())
        np.testing.assert_allclose(op.apply(np.full(144, 0.3)), 0.3, rtol=1e-13)

    def test_unit_kernel_is_identity(self, rng):
        x = rng.standard_normal(25)
        np.testing.assert_allclose(gaussian_blur_operator((5, 5), 1, 1.0).apply(x), x)

    def test_gaussian_center_weight(self):
        # separable normalisation on the integer grid -2..2
        one_d = 1 + 2 * np.exp(-0.5) + 2 * np.exp(-2.0)
        assert gaussian_kernel(5, 1.0)[2, 2] == pytest.approx(1 / one_d**2, rel=1e-14)

    def test_motion_kernel_horizontal(self):
        k = motion_kernel(5, 0.0)
        assert k.sum() == pytest.approx(1.0)
        assert k[2].sum() == pytest.approx(1.0)
        np.testing.assert_allclose(k[2], k[2, ::-1])

    @pytest.mark.parametrize("side", [0, 4, -1])
    def test_kernel_side_must_be_odd(self, side):
        with pytest.raises(ValueError):
            gaussian_kernel(side, 1.0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="expects last dimension"):
            downsample_operator((8, 8), 2).apply(np.zeros(10))

    def test_task_shape_check(self, rng):
        op = dense_operator(np.ones((2, 3)))
        task = make_task(op, np.ones(3), 0.0, rng)
        np.testing.assert_array_equal(task.y, [3.0, 3.0])
        with pytest.raises(ValueError):
            type(task)(op, 0.1, np.zeros(3))


class TestSaltPepper:
    def test_rate_zero(self, rng):
        x = rng.random(50)
        np.testing.assert_array_equal(salt_pepper(x, 0.0, rng), x)

    def test_rate_one(self, rng):
        out = salt_pepper(rng.random(1000) * 0.5 + 0.25, 1.0, rng)
        assert np.all((out == 0.0) | (out == 1.0))

    def test_binomial_fraction(self, rng):
        x = np.full(100_000, 0.5)
        frac = np.mean(salt_pepper(x, 0.02, rng) != 0.5)
        assert abs(frac - 0.02) < 4 * np.sqrt(0.02 * 0.98 / 100_000)


class TestCodec:
    def test_identity_round_trip(self, rng):
        c, x = identity_codec(7), rng.standard_normal(7)
        np.testing.assert_array_equal(c.decode(c.encode(x)), x)

    @pytest.mark.parametrize("make", [lambda r: orthogonal_codec(20, 6, r), lambda r: dct_codec(8, 3)])
    def test_isometry_and_left_inverse(self, rng, make):
        c = make(rng)
        z = rng.standard_normal(c.latent_dim)
        assert np.linalg.norm(c.decode(z)) == pytest.approx(np.linalg.norm(z), abs=1e-10)
        np.testing.assert_allclose(c.encode(c.decode(z)), z, atol=1e-10)
        np.testing.assert_allclose(c.E @ c.E.T, np.eye(c.latent_dim), atol=1e-12)

    def test_dct_first_atom_is_constant(self):
        c = dct_codec(4, 2)
        np.testing.assert_allclose(c.E[0], 0.25)

    def test_wrong_dimension(self):
        with pytest.raises(ValueError):
            dct_codec(4, 2).decode(np.zeros(5))
