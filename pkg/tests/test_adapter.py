"""Adapter tests: identity at init, sizes, ablation, determinism."""

import numpy as np
import pytest

from rawprep import autodiff as ad
from rawprep import isp_ops as isp
from rawprep.adapter import (AdapterConfig, ParallelAdapter, SequentialAdapter,
                             ablate, build_adapter)
from rawprep.checkpoints import module_arrays


def small_config(**kw):
    kw.setdefault("rpe_input_size", (16, 16))
    return AdapterConfig(**kw)


def uniform_image(rng, n=2, hw=(16, 16)):
    return ad.Tensor(rng.uniform(0, 1, (n, 3) + hw).astype(np.float32))


def test_processor_outputs_identity_at_init():
    rng = np.random.default_rng(0)
    model = ParallelAdapter(small_config(), rng)
    x = rng.uniform(0, 1, (2, 3, 16, 16)).astype(np.float32)
    x[0, :, 0, 0] = 0.0
    outs = model.processor_outputs(ad.Tensor(x))
    for name, out in zip(model.config.enabled_functions, outs):
        assert np.all(np.abs(out.data - x) <= 1e-6), name
    # exact zero stays exact zero through the gamma path
    assert outs[0].data[0, 0, 0, 0] == 0.0


def test_feature_dims_per_variant():
    rng = np.random.default_rng(1)
    x = uniform_image(rng)
    ram = ParallelAdapter(small_config(variant="ram"), np.random.default_rng(2))
    tiny = ParallelAdapter(small_config(variant="ram_t"), np.random.default_rng(2))
    feat = ram.encoder(ad.area_resize(x, (16, 16)))
    assert feat.data.shape == (2, 128)
    feat_t = tiny.encoder(ad.area_resize(x, (16, 16)))
    assert feat_t.data.shape == (2, 64)


@pytest.mark.parametrize("hw", [(16, 16), (32, 24), (64, 64)])
def test_forward_preserves_spatial_dims(hw):
    rng = np.random.default_rng(3)
    model = ParallelAdapter(small_config(), np.random.default_rng(4))
    x = uniform_image(rng, n=2, hw=hw)
    assert model(x).data.shape == (2, 3) + hw


def test_train_mode_output_is_batch_normalized():
    rng = np.random.default_rng(5)
    model = ParallelAdapter(small_config(), np.random.default_rng(6))
    out = model(uniform_image(rng)).data
    assert np.allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
    assert np.allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-2)


def test_decoder_widths_match_function_params():
    model = ParallelAdapter(small_config(), np.random.default_rng(7))
    for name, dec in model.decoders.items():
        assert dec.head.weight.data.shape[0] == isp.FUNCTION_PARAM_COUNTS[name]
        assert np.all(dec.head.weight.data == 0) and np.all(dec.head.bias.data == 0)


def test_tiny_variant_under_half_params():
    ram = ParallelAdapter(small_config(variant="ram"), np.random.default_rng(8))
    tiny = ParallelAdapter(small_config(variant="ram_t"), np.random.default_rng(8))
    assert tiny.count_params() < 0.5 * ram.count_params()


def test_sequential_exceeds_parallel_params():
    ram = ParallelAdapter(small_config(), np.random.default_rng(9))
    seq = SequentialAdapter(small_config(), np.random.default_rng(9))
    assert seq.count_params() > ram.count_params()


def test_sequential_identity_at_init():
    rng = np.random.default_rng(10)
    model = SequentialAdapter(small_config(output_norm="fixed"), np.random.default_rng(11))
    x = rng.uniform(0.05, 1.0, (2, 3, 16, 16)).astype(np.float32)
    out = model(ad.Tensor(x))
    # identity params and identity fixed-norm leave the image unchanged
    assert np.all(np.abs(out.data - x) <= 1e-5)


def test_conv_block_hand_count():
    rng = np.random.default_rng(12)
    model = ParallelAdapter(small_config(), rng)
    counts = {}
    for name, p in model.named_parameters():
        counts[name] = p.data.size
    # encoder block1: 3->16 with 7x7 kernel
    assert counts["encoder.block1.conv.weight"] == 16 * 3 * 49
    assert counts["encoder.block1.conv.bias"] == 16
    assert counts["encoder.block1.bn.gamma"] == 16


def test_init_deterministic_given_seed():
    a = ParallelAdapter(small_config(), np.random.default_rng(77))
    b = ParallelAdapter(small_config(), np.random.default_rng(77))
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        assert pa.data.tobytes() == pb.data.tobytes()


def test_concat_order_permutation_changes_output():
    rng = np.random.default_rng(13)
    model = ParallelAdapter(small_config(), np.random.default_rng(14))
    model.eval()
    x = uniform_image(rng)
    outs = model.processor_outputs(x)
    # force visible differences between blocks before fusing
    outs = [out * (1.0 + 0.2 * k) for k, out in enumerate(outs)]
    y1 = model.fusion(isp.fuse_concat(outs)).data
    y2 = model.fusion(isp.fuse_concat(outs[::-1])).data
    assert not np.allclose(y1, y2, atol=1e-4)


def test_ablate_function_shrinks_fusion_input():
    cfg = small_config()
    no_gamma = ablate(cfg, "gamma")
    assert no_gamma.enabled_functions == ("brightness", "ccm", "wb")
    assert no_gamma.fusion_in_channels == 9
    only_wb = ablate(ablate(no_gamma, "brightness"), "ccm")
    assert only_wb.enabled_functions == ("wb",)
    assert only_wb.fusion_in_channels == 3
    with pytest.raises(ValueError):
        ablate(only_wb, "wb")


def test_ablate_fusion_single_conv():
    cfg = ablate(small_config(), "fusion")
    model = ParallelAdapter(cfg, np.random.default_rng(15))
    names = [n for n, _ in model.named_parameters() if n.startswith("fusion.")]
    assert names == ["fusion.out.weight", "fusion.out.bias"]
    assert model.fusion.out.weight.data.shape == (3, 12, 1, 1)
    rng = np.random.default_rng(16)
    assert model(uniform_image(rng)).data.shape == (2, 3, 16, 16)


def test_ablate_normalization_uses_fixed_stats():
    cfg = ablate(small_config(), "normalization")
    model = ParallelAdapter(cfg, np.random.default_rng(17))
    model.out_norm.set_fixed_stats(np.array([0.5, 0.5, 0.5]), np.array([2.0, 2.0, 2.0]))
    rng = np.random.default_rng(18)
    x = uniform_image(rng)
    fused = model.fusion(isp.fuse_concat(model.processor_outputs(x))).data
    out = model(x).data
    assert np.allclose(out, (fused - 0.5) / 2.0, atol=1e-6)


def test_ablation_preserves_remaining_component_counts():
    full = ParallelAdapter(small_config(), np.random.default_rng(19))
    reduced = ParallelAdapter(ablate(small_config(), "gamma"), np.random.default_rng(19))
    full_counts = {n: p.data.size for n, p in full.named_parameters()}
    for name, p in reduced.named_parameters():
        if name.startswith("fusion."):
            continue  # fusion input width legitimately changes
        assert full_counts[name] == p.data.size, name


def test_config_validation():
    with pytest.raises(ValueError):
        AdapterConfig(variant="huge")
    with pytest.raises(ValueError):
        AdapterConfig(enabled_functions=())
    with pytest.raises(ValueError):
        AdapterConfig(enabled_functions=("gamma", "gamma"))
    with pytest.raises(ValueError):
        AdapterConfig(enabled_functions=("sharpen",))
    with pytest.raises(ValueError):
        AdapterConfig(fusion_mode="pyramid")
    with pytest.raises(ValueError):
        build_adapter("diagonal", AdapterConfig(), np.random.default_rng(0))


def test_sequential_requires_all_functions():
    with pytest.raises(ValueError):
        SequentialAdapter(small_config(enabled_functions=("wb",)), np.random.default_rng(20))


def test_checkpoint_layout_includes_running_stats():
    model = ParallelAdapter(small_config(), np.random.default_rng(21))
    named = module_arrays(model)
    assert "state.out_norm.bn.running_mean" in named
    assert "param.decoder_gamma.head.weight" in named
