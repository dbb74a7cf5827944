import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from gradcheck import check_gradients
from toys import amf_toy
from tvnet.amf import AdaptiveMultiResFusion, pixel_shuffle, pixel_unshuffle, upsample2x

D = torch.float64


def _t(x):
    return torch.tensor(x, dtype=D)


def _np(t):
    return t.detach().numpy()


class TestPixelShuffle:
    def test_documented_order(self):
        x = _t([1.0, 2.0, 3.0, 4.0]).view(1, 4, 1, 1)
        assert pixel_shuffle(x)[0, 0].tolist() == [[1.0, 2.0], [3.0, 4.0]]

    def test_multiset_and_inverse(self, rng):
        x = _t(rng.normal(size=(1, 8, 3, 3)))
        y = pixel_shuffle(x)
        assert y.shape == (1, 2, 6, 6)
        np.testing.assert_array_equal(np.sort(_np(x).ravel()), np.sort(_np(y).ravel()))
        assert torch.equal(pixel_unshuffle(y), x)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 3), st.integers(1, 4), st.integers(1, 4))
    def test_matches_loop_oracle(self, seed, c, h, w):
        x = np.random.default_rng(seed).normal(size=(4 * c, h, w))
        np.testing.assert_array_equal(_np(pixel_shuffle(_t(x)[None]))[0], oracles.shuffle(x))

    def test_rejects_bad_channels(self):
        with pytest.raises(ValueError, match="divisible by 4"):
            pixel_shuffle(torch.zeros(1, 6, 2, 2))
        with pytest.raises(ValueError, match="divisible by 2"):
            pixel_unshuffle(torch.zeros(1, 1, 3, 2))


class TestUpsample:
    def test_constant_preserved(self):
        x = torch.full((1, 2, 3, 5), 0.7, dtype=D)
        torch.testing.assert_close(upsample2x(x), torch.full((1, 2, 6, 10), 0.7, dtype=D))

    def test_matches_half_pixel_oracle(self, rng):
        x = rng.normal(size=(2, 3, 4))
        np.testing.assert_allclose(_np(upsample2x(_t(x)[None]))[0], oracles.upsample2x(x), atol=1e-12)


@pytest.fixture
def amf():
    torch.manual_seed(0)
    return AdaptiveMultiResFusion(d_m=4, d_2=3).double()


class TestSuppress:
    def test_zero_path_is_relu_of_bias(self, amf):
        torch.nn.init.zeros_(amf.suppress.weight)
        with torch.no_grad():
            amf.norm.weight.zero_()
            amf.norm.bias.copy_(_t([0.5, -1.0, 2.0]))
        out = amf.suppress_background(torch.rand(1, 4, 2, 2, dtype=D), torch.rand(1, 3, 4, 4, dtype=D))
        expected = _t([0.5, 0.0, 2.0]).view(1, 3, 1, 1).expand(1, 3, 4, 4)
        torch.testing.assert_close(out, expected)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_nonnegative(self, seed):
        torch.manual_seed(seed)
        mod = AdaptiveMultiResFusion(d_m=4, d_2=3).double()
        out = mod.suppress_background(torch.randn(1, 4, 2, 2, dtype=D) * 5, torch.randn(1, 3, 4, 4, dtype=D) * 5)
        assert (out >= 0).all()

    def test_2x2_to_4x4_oracle(self, amf, rng):
        with torch.no_grad():
            amf.norm.weight.copy_(_t([1.5, 0.5, -1.0]))
            amf.norm.bias.copy_(_t([0.1, -0.2, 0.3]))
        m, v2 = rng.normal(size=(4, 2, 2)), rng.normal(size=(3, 4, 4))
        got = _np(amf.suppress_background(_t(m)[None], _t(v2)[None]))[0]
        w = {n: _np(p) for n, p in amf.named_parameters()}
        c_lr = oracles.conv2d(np.maximum(oracles.conv2d(m, w["refine1.weight"], w["refine1.bias"], 1), 0),
                              w["refine2.weight"], w["refine2.bias"], 1)
        pre = oracles.conv2d(np.concatenate([oracles.shuffle(c_lr), v2]), w["suppress.weight"], np.zeros(3), 1)
        ref = np.maximum(oracles.instance_norm(pre, w["norm.weight"], w["norm.bias"]), 0)
        np.testing.assert_allclose(got, ref, atol=1e-10)

    def test_resolution_check(self, amf):
        with pytest.raises(ValueError, match="twice"):
            amf.suppress_background(torch.rand(1, 4, 2, 2, dtype=D), torch.rand(1, 3, 2, 2, dtype=D))


class TestIntensity:
    def test_zero_weights_half_gate(self, amf, rng):
        torch.nn.init.zeros_(amf.intensity.weight)
        torch.nn.init.zeros_(amf.intensity.bias)
        _, a2 = amf.intensity_fuse(_t(rng.normal(size=(1, 4, 2, 2))), _t(rng.random((1, 3, 4, 4))))
        assert a2.shape == (1, 1, 4, 4)
        torch.testing.assert_close(a2, torch.full_like(a2, 0.5))

    def test_zero_gate_ignores_v2(self, amf, rng):
        m = _t(rng.normal(size=(1, 4, 2, 2)))
        zero = torch.zeros(1, 1, 4, 4, dtype=D)
        a, _ = amf.intensity_fuse(m, _t(rng.random((1, 3, 4, 4))), a2=zero)
        b, _ = amf.intensity_fuse(m, _t(rng.random((1, 3, 4, 4))), a2=zero)
        torch.testing.assert_close(a, b)
        ref = amf.fuse(torch.cat([upsample2x(m), torch.zeros(1, 3, 4, 4, dtype=D)], 1))
        torch.testing.assert_close(a, ref)

    def test_2x2_oracle_and_gate_range(self, amf, rng):
        m, v2p = rng.normal(size=(4, 2, 2)), rng.random((3, 4, 4))
        out, a2 = amf.intensity_fuse(_t(m)[None], _t(v2p)[None])
        w = {n: _np(p) for n, p in amf.named_parameters()}
        up = oracles.upsample2x(m)
        ref_a2 = oracles.sigmoid(oracles.conv2d(np.concatenate([v2p, up]), w["intensity.weight"],
                                                w["intensity.bias"], 1))
        ref = oracles.conv2d(np.concatenate([up, ref_a2 * v2p]), w["fuse.weight"], w["fuse.bias"], 1)
        np.testing.assert_allclose(_np(a2)[0], ref_a2, atol=1e-12)
        np.testing.assert_allclose(_np(out)[0], ref, atol=1e-10)
        assert ((a2 > 0) & (a2 < 1)).all()


def test_forward_shapes_default_widths():
    torch.manual_seed(0)
    mod = AdaptiveMultiResFusion(64, 32)
    out, maps = mod(torch.rand(1, 64, 8, 8), torch.rand(1, 32, 16, 16), return_maps=True)
    assert out.shape == (1, 64, 16, 16)
    assert maps["intensity"].shape == (1, 1, 16, 16)
    assert mod.refine2.out_channels == 4 * 32


def test_gradients():
    fn, tensors = amf_toy()
    errors = check_gradients(fn, tensors)
    assert max(errors.values()) < 1e-4, errors


def test_bilinear_matches_functional():
    x = torch.rand(1, 2, 3, 3, dtype=D)
    torch.testing.assert_close(upsample2x(x), F.interpolate(x, size=(6, 6), mode="bilinear", align_corners=False))
