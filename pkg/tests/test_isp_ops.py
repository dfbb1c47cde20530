"""ISP function tests: squashing bounds, worked examples, fusion order."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rawprep import autodiff as ad
from rawprep import isp_ops as isp

from gradcheck import check_case


def tensor(x, grad=False):
    return ad.Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def test_zero_raw_outputs_give_identity_params():
    z = tensor(np.zeros((2, 14)))
    p = isp.squash_params(z)
    assert np.allclose(p.gamma.data, 1.0)
    assert np.allclose(p.brightness_offset.data, 0.0)
    assert np.allclose(p.ccm.data, np.eye(3))
    assert np.allclose(p.wb_gains.data, 1.0)


def test_squash_saturation_bounds():
    z = tensor(np.full((1, 1), 50.0))
    assert isp.squash_gamma(z).data[0, 0] == pytest.approx(4.0, rel=1e-6)
    z = tensor(np.full((1, 1), -50.0))
    assert isp.squash_gamma(z).data[0, 0] == pytest.approx(0.25, rel=1e-6)


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=40, deadline=None)
def test_squashed_params_always_in_range(seed):
    rng = np.random.default_rng(seed)
    z = tensor(rng.standard_normal((3, 14)) * 10)
    p = isp.squash_params(z)
    assert np.all((p.gamma.data >= 0.25) & (p.gamma.data <= 4.0))
    assert np.all(np.abs(p.brightness_offset.data) <= 0.5)
    assert np.all(np.abs(p.ccm.data - np.eye(3)) <= 0.5)
    assert np.all((p.wb_gains.data >= 0.25) & (p.wb_gains.data <= 4.0))


def test_gamma_sqrt_example():
    # [TRIVIAL] 0.25^0.5 = 0.5
    x = tensor(np.full((1, 3, 2, 2), 0.25))
    g = tensor(np.full((1, 1), 0.5))
    assert np.allclose(isp.apply_gamma(x, g).data, 0.5)


def test_gamma_one_is_identity():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, (2, 3, 4, 4))
    out = isp.apply_gamma(tensor(x), tensor(np.ones((2, 1))))
    assert np.allclose(out.data, x, atol=1e-12)


def test_gamma_exponent_gradient_value():
    # [DERIVED] d(x^g)/dg at x=0.25, g=0.5 is 0.5*ln(0.25)
    x = tensor(np.full((1, 3, 1, 1), 0.25))
    g = tensor(np.full((1, 1), 0.5), grad=True)
    out = isp.apply_gamma(x, g)
    ad.tsum(out).backward()
    assert g.grad[0, 0] == pytest.approx(3 * 0.5 * np.log(0.25), rel=1e-9)


def test_gamma_rejects_negative_input():
    with pytest.raises(ValueError):
        isp.apply_gamma(tensor(np.full((1, 3, 1, 1), -0.1)), tensor(np.ones((1, 1))))


@given(st.floats(0.25, 4.0))
@settings(max_examples=30, deadline=None)
def test_gamma_monotone_in_x(g):
    xs = np.linspace(0, 1, 16).reshape(1, 1, 4, 4)
    out = isp.apply_gamma(tensor(xs), tensor(np.full((1, 1), g))).data.reshape(-1)
    assert np.all(np.diff(out) >= -1e-9)


def test_brightness_example_and_offset_grad():
    x = tensor(np.full((1, 3, 2, 2), 0.2))
    off = tensor(np.full((1, 1), 0.1), grad=True)
    out = isp.apply_brightness(x, off)
    assert np.allclose(out.data, 0.3)
    ad.tsum(out).backward()
    assert off.grad[0, 0] == pytest.approx(12.0)  # 3 channels * 2 * 2 ones


def test_ccm_permutation_swaps_channels():
    rng = np.random.default_rng(1)
    x = rng.uniform(0, 1, (1, 3, 2, 2))
    perm = np.array([[[0, 0, 1], [0, 1, 0], [1, 0, 0]]], dtype=np.float64)
    out = isp.apply_ccm(tensor(x), tensor(perm)).data
    assert np.allclose(out[0, 0], x[0, 2])
    assert np.allclose(out[0, 1], x[0, 1])
    assert np.allclose(out[0, 2], x[0, 0])


def test_ccm_matches_direct_multiply():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 3, 3))
    m = rng.standard_normal((2, 3, 3))
    out = isp.apply_ccm(tensor(x), tensor(m))
    # oracle: per-pixel 3x3 multiply
    want = np.zeros_like(x)
    for n in range(2):
        for i in range(3):
            for j in range(3):
                want[n, :, i, j] = m[n] @ x[n, :, i, j]
    assert np.allclose(out.data, want, atol=1e-12)


def test_wb_gains_example():
    x = np.zeros((1, 3, 1, 1))
    x[0, :, 0, 0] = [0.1, 0.2, 0.4]
    out = isp.apply_wb(tensor(x), tensor(np.array([[2.0, 1.0, 0.5]])))
    assert np.allclose(out.data[0, :, 0, 0], [0.2, 0.2, 0.2])


def test_wb_gain_gradient_is_channel_sum():
    rng = np.random.default_rng(3)
    x = rng.uniform(0, 1, (1, 3, 4, 4))
    gains = tensor(np.ones((1, 3)), grad=True)
    ad.tsum(isp.apply_wb(tensor(x), gains)).backward()
    assert np.allclose(gains.grad[0], x[0].sum(axis=(1, 2)))


@given(st.floats(0.0, 3.0))
@settings(max_examples=25, deadline=None)
def test_wb_ccm_positively_homogeneous(c):
    rng = np.random.default_rng(4)
    x = rng.uniform(0, 1, (1, 3, 2, 2))
    m = np.eye(3)[None] + 0.3 * rng.standard_normal((1, 3, 3))
    gains = rng.uniform(0.25, 4.0, (1, 3))
    assert np.allclose(isp.apply_wb(tensor(c * x), tensor(gains)).data,
                       c * isp.apply_wb(tensor(x), tensor(gains)).data, atol=1e-9)
    assert np.allclose(isp.apply_ccm(tensor(c * x), tensor(m)).data,
                       c * isp.apply_ccm(tensor(x), tensor(m)).data, atol=1e-9)


def test_fuse_concat_channel_blocks():
    rng = np.random.default_rng(5)
    blocks = [rng.standard_normal((1, 3, 2, 2)) for _ in range(4)]
    fused = isp.fuse_concat([tensor(b) for b in blocks])
    assert fused.data.shape == (1, 12, 2, 2)
    for k, block in enumerate(blocks):
        assert np.array_equal(fused.data[:, 3 * k:3 * k + 3], block)


def test_fuse_concat_gradient_routes_to_own_block():
    rng = np.random.default_rng(6)
    blocks = [tensor(rng.standard_normal((1, 3, 2, 2)), grad=True) for _ in range(4)]
    fused = isp.fuse_concat(blocks)
    # sum only the ccm block (channels 6-8)
    ad.tsum(ad.narrow(fused, 1, 6, 3)).backward()
    assert np.all(blocks[2].grad == 1.0)
    for k in (0, 1, 3):
        assert blocks[k].grad is None or np.all(blocks[k].grad == 0)


def test_fuse_concat_rejects_spatial_mismatch():
    with pytest.raises(ad.ShapeError):
        isp.fuse_concat([tensor(np.zeros((1, 3, 2, 2))), tensor(np.zeros((1, 3, 4, 4)))])


def test_fuse_concat_rejects_non_rgb_blocks():
    with pytest.raises(ad.ShapeError):
        isp.fuse_concat([tensor(np.zeros((1, 4, 2, 2)))])


def test_identity_composite_at_zero_decoder_outputs():
    rng = np.random.default_rng(7)
    x = rng.uniform(0, 1, (2, 3, 4, 4))
    x[0, 0, 0, 0] = 0.0  # include an exact zero for the gamma epsilon rule
    p = isp.squash_params(tensor(np.zeros((2, 14))))
    outs = isp.apply_all(tensor(x), p)
    for name, out in zip(isp.FUNCTION_ORDER, outs):
        if name == "gamma":
            assert np.all(np.abs(out.data - x) <= 1e-6)
            assert out.data[0, 0, 0, 0] == 0.0
        else:
            assert np.allclose(out.data, x, atol=1e-6), name


def test_param_order_is_frozen_contract():
    assert isp.FUNCTION_ORDER == ("gamma", "brightness", "ccm", "wb")
    assert [isp.FUNCTION_PARAM_COUNTS[f] for f in isp.FUNCTION_ORDER] == [1, 1, 9, 3]


def test_squash_gradcheck():
    rng = np.random.default_rng(8)
    z = rng.standard_normal((2, 14))
    err = check_case(lambda ts: isp.squash_params(ts[0]).ccm, [z], np.random.default_rng(9))
    assert err < 1e-4
    err = check_case(lambda ts: isp.squash_params(ts[0]).wb_gains, [z], np.random.default_rng(10))
    assert err < 1e-4


def test_apply_functions_gradcheck():
    rng = np.random.default_rng(11)
    x = rng.uniform(0.05, 1.0, (2, 3, 3, 3))
    z = rng.standard_normal((2, 14)) * 0.5

    def full(ts):
        p = isp.squash_params(ts[1])
        return isp.fuse_concat(isp.apply_all(ts[0], p))

    err = check_case(full, [x, z], np.random.default_rng(12))
    assert err < 1e-4
