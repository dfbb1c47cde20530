"""Raw frontend tests: packing, normalization, classic ISP, disk format."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rawprep import bayer as by


def make_frame(data, pattern="RGGB", bit_depth=12, black=64, white=1023, frame_id="t0"):
    data = np.asarray(data, dtype=np.uint16)
    return by.BayerFrame(width=data.shape[1], height=data.shape[0], data=data,
                         bit_depth=bit_depth, black_level=black, white_level=white,
                         pattern=pattern, frame_id=frame_id)


def test_normalize_endpoints_and_midpoint():
    frame = make_frame([[64, 1023], [543, 64]])
    plane = by.normalize_raw(frame)
    assert plane[0, 0] == 0.0
    assert plane[0, 1] == 1.0
    # [DERIVED] (543-64)/(1023-64)
    assert plane[1, 0] == pytest.approx(0.49948, abs=1e-5)


def test_normalize_clamps_below_black():
    frame = make_frame([[10, 64], [64, 64]])
    assert by.normalize_raw(frame)[0, 0] == 0.0


@given(st.integers(0, 4095), st.integers(0, 4095))
@settings(max_examples=50, deadline=None)
def test_normalize_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    frame = make_frame([[lo, hi], [0, 0]])
    plane = by.normalize_raw(frame)
    assert plane[0, 0] <= plane[0, 1]


def test_pack_rggb_channel_order():
    # [TRIVIAL] RGGB tile [[1,2],[3,4]] -> (R,G1,G2,B) = (1,2,3,4)
    packed = by.pack_bayer_to_rggb(np.array([[1.0, 2.0], [3.0, 4.0]]), "RGGB")
    assert packed.shape == (4, 1, 1)
    assert packed[:, 0, 0].tolist() == [1.0, 2.0, 3.0, 4.0]


def test_pack_bggr_channel_order():
    # [TRIVIAL] same tile as BGGR -> (4,2,3,1)
    packed = by.pack_bayer_to_rggb(np.array([[1.0, 2.0], [3.0, 4.0]]), "BGGR")
    assert packed[:, 0, 0].tolist() == [4.0, 2.0, 3.0, 1.0]


@pytest.mark.parametrize("pattern", by.PATTERNS)
def test_pack_unpack_roundtrip(pattern):
    rng = np.random.default_rng(hash(pattern) % 2 ** 31)
    plane = rng.integers(0, 4096, (8, 10)).astype(np.float32)
    packed = by.pack_bayer_to_rggb(plane, pattern)
    assert np.array_equal(by.unpack_rggb(packed, pattern), plane)


def test_pack_rejects_odd_dims():
    with pytest.raises(ValueError):
        by.pack_bayer_to_rggb(np.zeros((3, 4)), "RGGB")


def test_pack_rejects_unknown_pattern():
    with pytest.raises(ValueError):
        by.pack_bayer_to_rggb(np.zeros((2, 2)), "XYZW")


def test_green_average():
    # [TRIVIAL] (1,2,3,4) -> (1, 2.5, 4)
    rgb = by.rggb_to_rgb(np.array([1.0, 2.0, 3.0, 4.0]).reshape(4, 1, 1))
    assert rgb[:, 0, 0].tolist() == [1.0, 2.5, 4.0]


def test_green_average_stays_in_range():
    rng = np.random.default_rng(0)
    rggb = rng.uniform(0, 1, (4, 6, 6)).astype(np.float32)
    rgb = by.rggb_to_rgb(rggb)
    assert rgb.min() >= 0.0 and rgb.max() <= 1.0


def test_classic_isp_gray_fixed_point():
    # neutral gray frame: all Bayer sites equal -> equal 8-bit channels
    frame = make_frame(np.full((4, 4), 543), black=64, white=1023)
    srgb = by.classic_isp_srgb(frame)
    assert srgb.shape == (3, 2, 2)
    assert (srgb[0] == srgb[1]).all() and (srgb[1] == srgb[2]).all()


def test_classic_isp_endpoints():
    frame = make_frame(np.full((2, 2), 64))
    assert by.classic_isp_srgb(frame).max() == 0
    frame = make_frame(np.full((2, 2), 1023))
    assert by.classic_isp_srgb(frame).min() == 255


def test_gray_world_gain_halves_double_red():
    # [DERIVED] R mean twice G mean -> R gain 0.5
    rgb = np.stack([np.full((2, 2), 0.8), np.full((2, 2), 0.4), np.full((2, 2), 0.4)])
    gains = by.gray_world_gains(rgb)
    assert gains[0] == pytest.approx(0.5)
    assert gains[1] == 1.0
    assert gains[2] == pytest.approx(1.0)


def test_gray_world_all_black_defined():
    frame = make_frame(np.full((2, 2), 64))
    assert np.allclose(by.gray_world_gains(by.frame_to_linear_rgb(frame)), 1.0)


@given(st.floats(0.05, 1.0))
@settings(max_examples=30, deadline=None)
def test_wb_scale_covariant_chromaticity(c):
    rng = np.random.default_rng(12)
    rgb = rng.uniform(0.1, 0.9, (3, 4, 4)).astype(np.float64)
    g1 = by.gray_world_gains(rgb)
    g2 = by.gray_world_gains(rgb * c)
    post1 = (rgb * g1[:, None, None])
    post2 = (rgb * c * g2[:, None, None])
    ratio1 = post1[0].mean() / post1[1].mean(), post1[2].mean() / post1[1].mean()
    ratio2 = post2[0].mean() / post2[1].mean(), post2[2].mean() / post2[1].mean()
    assert ratio1 == pytest.approx(ratio2, rel=1e-6)


def test_downsample_constant_preserved():
    img = np.full((3, 4, 4), 0.3, dtype=np.float32)
    out = by.downsample_area(img, (2, 2))
    assert out.shape == (3, 2, 2)
    assert np.allclose(out, 0.3, atol=1e-7)


def test_downsample_two_by_two_average():
    img = np.array([[0.0, 1.0], [0.0, 1.0]])
    assert by.downsample_area(img, (1, 1))[0, 0] == pytest.approx(0.5)


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=20, deadline=None)
def test_downsample_preserves_mean(seed):
    rng = np.random.default_rng(seed)
    img = rng.uniform(0, 1, (3, 8, 12)).astype(np.float32)
    out = by.downsample_area(img, (4, 6))
    assert out.mean() == pytest.approx(img.mean(), abs=1e-6)


def test_frame_validation_errors():
    good = np.zeros((2, 2), dtype=np.uint16)
    with pytest.raises(ValueError):
        make_frame(np.zeros((3, 2), dtype=np.uint16))  # odd height
    with pytest.raises(ValueError):
        by.BayerFrame(2, 2, good, bit_depth=13, black_level=0, white_level=100, pattern="RGGB")
    with pytest.raises(ValueError):
        by.BayerFrame(2, 2, good, bit_depth=12, black_level=100, white_level=100, pattern="RGGB")
    with pytest.raises(ValueError):
        by.BayerFrame(2, 2, good, bit_depth=12, black_level=0, white_level=5000, pattern="RGGB")
    with pytest.raises(ValueError):
        make_frame(np.full((2, 2), 5000), bit_depth=12)  # sample exceeds depth


def test_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    data = rng.integers(64, 1024, (6, 8)).astype(np.uint16)
    frame = make_frame(data, pattern="GRBG", frame_id="frame_000042")
    by.save_frame(tmp_path, frame)
    back = by.load_frame(str(tmp_path / "frame_000042.meta"))
    assert np.array_equal(back.data, data)
    assert back.pattern == "GRBG" and back.bit_depth == 12
    assert back.black_level == 64 and back.white_level == 1023


def test_load_rejects_wrong_byte_count(tmp_path):
    frame = make_frame(np.zeros((2, 2), dtype=np.uint16), frame_id="bad")
    raw_path, meta_path = by.save_frame(tmp_path, frame)
    with open(raw_path, "ab") as f:
        f.write(b"\x00\x00")
    with pytest.raises(ValueError):
        by.load_frame(meta_path)


def test_wide_container_for_deep_frames(tmp_path):
    data = np.full((2, 2), 2 ** 24 - 2, dtype=np.uint32)
    frame = by.BayerFrame(2, 2, data, bit_depth=24, black_level=0,
                          white_level=2 ** 24 - 1, pattern="RGGB", frame_id="deep")
    raw_path, meta_path = by.save_frame(tmp_path, frame)
    back = by.load_frame(meta_path)
    assert back.data.dtype.itemsize == 4
    assert np.array_equal(back.data, data)


@pytest.mark.parametrize("pattern", by.PATTERNS)
def test_mosaic_from_rgb_samples_pattern_sites(pattern):
    # constant-per-channel field: every site must carry its own color value
    rgb = np.stack([np.full((4, 6), v) for v in (0.1, 0.5, 0.9)])
    plane = by.mosaic_from_rgb(rgb, pattern)
    offsets = by._OFFSETS[pattern]
    expect = {"R": 0.1, "G1": 0.5, "G2": 0.5, "B": 0.9}
    for name, (dy, dx) in offsets.items():
        assert np.all(plane[dy::2, dx::2] == expect[name]), name


@pytest.mark.parametrize("pattern", by.PATTERNS)
def test_mosaic_then_pack_recovers_site_values(pattern):
    rng = np.random.default_rng(9)
    rgb = rng.uniform(0, 1, (3, 8, 10))
    channels = by.pack_bayer_to_rggb(by.mosaic_from_rgb(rgb, pattern), pattern)
    offsets = by._OFFSETS[pattern]
    source = {"R": 0, "G1": 1, "G2": 1, "B": 2}
    for i, name in enumerate(("R", "G1", "G2", "B")):
        dy, dx = offsets[name]
        assert np.array_equal(channels[i], rgb[source[name], dy::2, dx::2]), name


def test_mosaic_from_rgb_rejects_bad_input():
    with pytest.raises(ValueError):
        by.mosaic_from_rgb(np.zeros((3, 5, 6)), "RGGB")
    with pytest.raises(ValueError):
        by.mosaic_from_rgb(np.zeros((4, 4, 4)), "RGGB")
    with pytest.raises(ValueError):
        by.mosaic_from_rgb(np.zeros((3, 4, 4)), "RGXB")
