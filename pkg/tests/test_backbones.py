"""Backbone layouts, forward wiring and analytic gradients."""

import numpy as np
import pytest

from emt import backbones as bb
from emt import numerics as nx

from oracles import StagedNet, central_differences

PAIRS = [(a, s) for a in bb.ARCH_IDS for s in bb.SCALES]


def _conv_params(ci, co, k):
    return co * ci * k * k + co


EXPECTED_P = {
    ("espcn", s): _conv_params(3, 64, 5) + _conv_params(64, 32, 3) + _conv_params(32, 3 * s * s, 3)
    for s in bb.SCALES
}
EXPECTED_P.update({("srcnn", s): _conv_params(3, 64, 9) + _conv_params(64, 32, 5) + _conv_params(32, 3, 5)
                   for s in bb.SCALES})
EXPECTED_P.update({
    ("edsr1", s): _conv_params(3, 64, 3) + 2 * _conv_params(64, 64, 3) + _conv_params(64, 3 * s * s, 3)
    for s in bb.SCALES
})


class TestLayout:
    @pytest.mark.parametrize("arch_id,scale", PAIRS)
    def test_param_count(self, arch_id, scale):
        assert bb.get_arch(arch_id, scale).param_count == EXPECTED_P[(arch_id, scale)]

    def test_espcn_x2_reference_count(self):
        assert bb.get_arch("espcn", 2).param_count == 26796

    @pytest.mark.parametrize("arch_id,scale", [("espcn", 3), ("edsr1", 2)])
    def test_flatten_is_layer_ordered(self, arch_id, scale):
        arch = bb.get_arch(arch_id, scale)
        theta = np.arange(arch.param_count, dtype=np.float64)
        layers = bb.unflatten(arch, theta)
        w0, b0 = layers[0]
        assert w0.reshape(-1)[0] == 0 and w0.reshape(-1)[-1] == w0.size - 1
        assert b0[0] == w0.size
        assert layers[1][0].reshape(-1)[0] == w0.size + b0.size
        np.testing.assert_array_equal(bb.flatten(arch, layers), theta)

    @pytest.mark.parametrize("arch_id,scale", [("vdsr", 2), ("espcn", 5), ("srcnn", 1)])
    def test_unsupported_pair(self, arch_id, scale):
        with pytest.raises(ValueError, match="unsupported architecture/scale pair"):
            bb.get_arch(arch_id, scale)

    def test_wrong_theta_length(self):
        arch = bb.get_arch("espcn", 2)
        with pytest.raises(nx.ShapeError, match="theta length"):
            bb.ModelParams(arch, np.zeros(10, np.float32))


class TestInit:
    def test_he_uniform_bounds_and_zero_bias(self):
        m = bb.build_model("espcn", 2, seed=5)
        for layer, (w, b) in zip(m.arch.layers, bb.unflatten(m.arch, m.theta)):
            bound = np.sqrt(6.0 / (layer.c_in * layer.k * layer.k))
            assert np.abs(w).max() <= bound
            # a uniform sample this large fills most of its range
            assert np.abs(w).max() > 0.9 * bound
            assert not b.any()

    def test_seeded(self):
        a = bb.build_model("edsr1", 3, seed=1)
        b = bb.build_model("edsr1", 3, seed=1)
        c = bb.build_model("edsr1", 3, seed=2)
        assert a.theta.tobytes() == b.theta.tobytes() != c.theta.tobytes()
        assert a.theta.dtype == np.float32 and a.provenance == "random"


class TestForward:
    @pytest.mark.parametrize("arch_id,scale", PAIRS)
    def test_output_shape(self, arch_id, scale, rng):
        m = bb.build_model(arch_id, scale, 0)
        out = bb.forward(m, rng.random((2, 3, 6, 5)).astype(np.float32))
        assert out.shape == (2, 3, 6 * scale, 5 * scale)
        assert out.dtype == np.float32

    @pytest.mark.parametrize("arch_id,scale", PAIRS)
    def test_matches_independent_wiring(self, arch_id, scale, rng):
        m = bb.build_model(arch_id, scale, 3)
        theta = m.theta.astype(np.float64) + 0.01 * rng.standard_normal(m.P)
        x = rng.random((2, 3, 6, 6))
        out = bb.forward(m.with_theta(theta), x)
        np.testing.assert_allclose(out, StagedNet(m.arch, theta, x).out, rtol=1e-12, atol=1e-12)

    def test_channel_check(self, espcn2):
        with pytest.raises(nx.ShapeError, match="channels"):
            bb.forward(espcn2, np.zeros((1, 1, 4, 4), np.float32))

    def test_predict_batches_like_forward(self, espcn2, rng):
        x = rng.random((5, 3, 6, 6)).astype(np.float32)
        np.testing.assert_array_equal(bb.predict(espcn2, x, batch=2), bb.forward(espcn2, x))


class TestGradients:
    @pytest.mark.parametrize("arch_id,scale", [("espcn", 2), ("srcnn", 3), ("edsr1", 4)])
    def test_backward_matches_central_differences(self, arch_id, scale, rng):
        m = bb.build_model(arch_id, scale, 11)
        theta = m.theta.astype(np.float64)
        m = m.with_theta(theta)
        x = rng.random((1, 3, 6, 6))
        net = StagedNet(m.arch, theta, x)
        G = rng.standard_normal(net.out.shape)
        g = bb.backward(m, x, G)
        coords = rng.choice(m.P, 40, replace=False)
        fd, kink = central_differences(net, G, coords, 1e-4)
        checked = 0
        for c in coords:
            if kink[c]:
                continue
            checked += 1
            assert abs(g[c] - fd[c]) <= 1e-4 * max(abs(g[c]), abs(fd[c]), 1e-6), (c, g[c], fd[c])
        assert checked >= 30

    def test_loss_and_grad_chains_l1(self, espcn2, rng):
        x = rng.random((2, 3, 5, 5)).astype(np.float32)
        y = rng.random((2, 3, 10, 10)).astype(np.float32)
        loss, g = bb.loss_and_grad(espcn2, x, y)
        sr = bb.forward(espcn2, x)
        ref_loss, gsr = nx.l1_loss(sr, y)
        assert loss == ref_loss
        np.testing.assert_array_equal(g, bb.backward(espcn2, x, gsr))

    def test_non_finite_loss(self, espcn2):
        theta = espcn2.theta.copy()
        theta[0] = np.nan
        with pytest.raises(FloatingPointError, match="non-finite"):
            bb.loss_and_grad(espcn2.with_theta(theta), np.ones((1, 3, 4, 4), np.float32),
                             np.ones((1, 3, 8, 8), np.float32))

    def test_provenance_tags(self, espcn2):
        t = espcn2.tagged("adapted", 4)
        assert (t.provenance, t.chunk) == ("adapted", 4)
        assert t.theta is espcn2.theta
