"""Tensor primitives against loop oracles and finite differences."""

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from emt import numerics as nx

from oracles import adam_trace, bicubic_pixelwise, conv2d_loops, psnr_scalar


def _fd_input_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


class TestConv2d:
    @given(
        n=st.integers(1, 2), ci=st.integers(1, 3), co=st.integers(1, 3),
        k=st.sampled_from([1, 3, 5]), size=st.integers(3, 7), seed=st.integers(0, 2**16),
    )
    def test_forward_matches_loop_oracle(self, n, ci, co, k, size, seed):
        r = np.random.default_rng(seed)
        x = r.standard_normal((n, ci, size, size))
        w = r.standard_normal((co, ci, k, k))
        b = r.standard_normal(co)
        p = (k - 1) // 2
        np.testing.assert_allclose(nx.conv2d_forward(x, w, b, p), conv2d_loops(x, w, b, p),
                                   rtol=1e-12, atol=1e-12)

    def test_unpadded_output_shrinks(self, rng):
        x = rng.standard_normal((1, 2, 6, 7))
        w = rng.standard_normal((4, 2, 3, 3))
        out = nx.conv2d_forward(x, w, np.zeros(4), 0)
        assert out.shape == (1, 4, 4, 5)
        np.testing.assert_allclose(out, conv2d_loops(x, w, np.zeros(4), 0), atol=1e-12)

    def test_float32_storage(self, rng):
        x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
        w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        assert nx.conv2d_forward(x, w, np.zeros(3, np.float32), 1).dtype == np.float32

    def test_backward_against_finite_differences(self, rng):
        x = rng.standard_normal((2, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        G = rng.standard_normal((2, 3, 5, 5))
        gx, gw, gb = nx.conv2d_backward(x, w, G, 1)
        np.testing.assert_allclose(gx, _fd_input_grad(lambda v: np.sum(G * nx.conv2d_forward(v, w, b, 1)), x),
                                   rtol=1e-6, atol=1e-7)
        np.testing.assert_allclose(gw, _fd_input_grad(lambda v: np.sum(G * nx.conv2d_forward(x, v, b, 1)), w),
                                   rtol=1e-6, atol=1e-7)
        np.testing.assert_allclose(gb, G.sum(axis=(0, 2, 3)), rtol=1e-12)

    @given(k=st.sampled_from([1, 3, 5]), pad=st.integers(0, 2), seed=st.integers(0, 2**16))
    def test_backward_is_adjoint(self, k, pad, seed):
        r = np.random.default_rng(seed)
        x = r.standard_normal((1, 2, 6, 6))
        w = r.standard_normal((3, 2, k, k))
        y = nx.conv2d_forward(x, w, None, pad)
        G = r.standard_normal(y.shape)
        gx, _, _ = nx.conv2d_backward(x, w, G, pad)
        assert np.isclose(np.sum(G * y), np.sum(gx * x), rtol=1e-10)

    def test_channel_mismatch_raises(self, rng):
        with pytest.raises(nx.ShapeError, match="input channels 2 != kernel C_in 3"):
            nx.conv2d_forward(rng.standard_normal((1, 2, 5, 5)), np.zeros((4, 3, 3, 3)), np.zeros(4), 1)

    def test_non_4d_input_raises(self):
        with pytest.raises(nx.ShapeError, match="4-D"):
            nx.conv2d_forward(np.zeros((2, 5, 5)), np.zeros((1, 2, 3, 3)), np.zeros(1), 1)


class TestActivations:
    @pytest.mark.parametrize("kind", ["relu", "tanh"])
    def test_backward_matches_derivative(self, kind, rng):
        x = rng.standard_normal((1, 2, 4, 4))
        x[np.abs(x) < 1e-3] = 0.5
        g = rng.standard_normal(x.shape)
        fd = _fd_input_grad(lambda v: np.sum(g * nx.activation_forward(kind, v)), x)
        np.testing.assert_allclose(nx.activation_backward(kind, x, g), fd, rtol=1e-6, atol=1e-8)

    def test_relu_gradient_at_zero_is_zero(self):
        x = np.zeros((1, 1, 1, 2))
        assert np.all(nx.activation_backward("relu", x, np.ones_like(x)) == 0)

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown activation"):
            nx.activation_forward("gelu", np.zeros(3))


class TestPixelShuffle:
    @pytest.mark.parametrize("r", [2, 3, 4])
    def test_index_formula(self, r, rng):
        x = rng.standard_normal((2, 3 * r * r, 3, 2))
        out = nx.pixel_shuffle(x, r)
        assert out.shape == (2, 3, 3 * r, 2 * r)
        for c in range(3):
            for i in range(r):
                for j in range(r):
                    np.testing.assert_array_equal(out[:, c, i::r, j::r], x[:, c * r * r + i * r + j])

    @pytest.mark.parametrize("r", [2, 3, 4])
    def test_backward_inverts(self, r, rng):
        x = rng.standard_normal((1, 2 * r * r, 4, 5))
        np.testing.assert_array_equal(nx.pixel_shuffle_backward(nx.pixel_shuffle(x, r), r), x)

    def test_indivisible_channels(self):
        with pytest.raises(nx.ShapeError, match="not divisible"):
            nx.pixel_shuffle(np.zeros((1, 5, 2, 2)), 2)


class TestBicubic:
    def test_kernel_interpolates(self):
        np.testing.assert_allclose(nx.cubic_kernel(np.array([0.0, 1.0, 2.0, 2.5])), [1, 0, 0, 0], atol=1e-15)
        # Catmull-Rom value at 0.5 with a = -0.5
        assert nx.cubic_kernel(np.array([0.5]))[0] == pytest.approx(0.5625)

    @pytest.mark.parametrize("scale", [2, 3, 4, Fraction(1, 2), Fraction(1, 3), Fraction(1, 4)])
    def test_matches_pixelwise_oracle(self, scale, rng):
        img = rng.random((2, 12, 12))
        got = nx.bicubic_resize(img[None], scale)[0]
        np.testing.assert_allclose(got, bicubic_pixelwise(img, float(scale)), atol=1e-12)

    @pytest.mark.parametrize("n,scale", [(7, 2), (12, Fraction(1, 3)), (5, 4)])
    def test_rows_partition_unity(self, n, scale):
        np.testing.assert_allclose(nx.bicubic_weights(n, scale).sum(axis=1), 1.0, atol=1e-14)

    def test_constant_image_is_preserved(self):
        img = np.full((1, 3, 8, 8), 0.37)
        np.testing.assert_allclose(nx.bicubic_resize(img, Fraction(1, 2)), 0.37, atol=1e-14)

    def test_empty_output(self):
        with pytest.raises(nx.ShapeError):
            nx.bicubic_weights(2, Fraction(1, 4))


class TestL1:
    def test_value_and_sign_gradient(self):
        pred = np.array([[[[0.5, 0.2, 0.3]]]])
        tgt = np.array([[[[0.1, 0.2, 0.6]]]])
        loss, g = nx.l1_loss(pred, tgt)
        assert loss == pytest.approx((0.4 + 0.0 + 0.3) / 3)
        np.testing.assert_array_equal(g, np.array([[[[1, 0, -1]]]]) / 3)

    def test_shape_mismatch(self):
        with pytest.raises(nx.ShapeError):
            nx.l1_loss(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)))


class TestAdam:
    def test_matches_scalar_trace(self, rng):
        theta = rng.standard_normal(7)
        grads = [rng.standard_normal(7) for _ in range(12)]
        state = nx.AdamState.fresh(7, lr=1e-2)
        cur = theta
        for g in grads:
            cur, state = nx.adam_step(cur, g, state)
        np.testing.assert_allclose(cur, adam_trace(theta, grads, 1e-2), rtol=1e-12, atol=1e-14)
        assert state.t == 12

    def test_first_step_moves_by_lr(self):
        theta = np.zeros(3)
        new, _ = nx.adam_step(theta, np.array([3.0, -0.2, 0.0]), nx.AdamState.fresh(3, lr=1e-4))
        np.testing.assert_allclose(new, [-1e-4, 1e-4, 0.0], rtol=1e-6)

    def test_input_state_untouched(self):
        s = nx.AdamState.fresh(2)
        nx.adam_step(np.zeros(2), np.ones(2), s)
        assert s.t == 0 and not s.m.any()

    def test_length_mismatch(self):
        with pytest.raises(nx.ShapeError, match="length mismatch"):
            nx.adam_step(np.zeros(3), np.zeros(2), nx.AdamState.fresh(3))


class TestPsnr:
    def test_identical_is_capped(self):
        a = np.random.default_rng(0).random((3, 4, 4))
        assert nx.psnr(a, a) == nx.PSNR_CAP_DB

    def test_known_value(self):
        a = np.zeros((1, 1, 2, 2))
        assert nx.psnr(a, a + 0.1) == pytest.approx(20.0)

    @given(seed=st.integers(0, 2**16), scale=st.floats(1e-3, 0.5))
    def test_matches_scalar_loop(self, seed, scale):
        r = np.random.default_rng(seed)
        a = r.random((3, 5, 6))
        b = np.clip(a + scale * r.standard_normal(a.shape), 0, 1)
        assert nx.psnr(a, b) == pytest.approx(psnr_scalar(a, b), abs=1e-9)
