"""Learned raw-preprocessing modules that replace a hand-tuned ISP.

The parallel adapter runs one shared image encoder on a downsampled copy of
the input, one tiny decoder per enabled ISP function, applies every function
to the original full-resolution image, and fuses the stacked outputs through
a reverse-hourglass conv stack plus output batch norm. Decoder heads start
at zero, so every processor is exactly the identity at initialization.

The sequential baseline chains the same four functions in the fixed order
white balance, color correction, gamma, brightness, with a separate encoder
and decoder per stage; each stage re-encodes the current intermediate, so
early-stage updates shift the inputs later stages see. That coupling is the
behavior the parallel design removes.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import isp_ops as isp
from . import layers as ly

VARIANTS = ("ram", "ram_t")

# encoder conv stages as (out_channels, kernel) and fusion middle widths
_ENCODER_STAGES = {
    "ram": ((16, 7), (32, 5), (128, 3)),
    "ram_t": ((16, 3), (32, 3), (64, 3)),
}
_FUSION_MIDS = {"ram": (16, 64, 16), "ram_t": (16, 32, 16)}
_FEATURE_DIM = {"ram": 128, "ram_t": 64}

SEQUENTIAL_ORDER = ("wb", "ccm", "gamma", "brightness")


@dataclass
class AdapterConfig:
    variant: str = "ram"
    rpe_input_size: tuple = (64, 64)
    enabled_functions: tuple = isp.FUNCTION_ORDER
    fusion_mode: str = "hourglass"   # or "single": one 1x1 conv, the fusion ablation
    output_norm: str = "batch"       # or "fixed": frozen mean-std, the norm ablation

    def __post_init__(self):
        self.rpe_input_size = tuple(self.rpe_input_size)
        self.enabled_functions = tuple(self.enabled_functions)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if not self.enabled_functions:
            raise ValueError("enabled_functions must be non-empty")
        bad = [f for f in self.enabled_functions if f not in isp.FUNCTION_ORDER]
        if bad:
            raise ValueError(f"unknown ISP functions {bad}")
        if len(set(self.enabled_functions)) != len(self.enabled_functions):
            raise ValueError("enabled_functions contains duplicates")
        if self.fusion_mode not in ("hourglass", "single"):
            raise ValueError(f"unknown fusion_mode {self.fusion_mode!r}")
        if self.output_norm not in ("batch", "fixed"):
            raise ValueError(f"unknown output_norm {self.output_norm!r}")

    @property
    def feature_dim(self):
        return _FEATURE_DIM[self.variant]

    @property
    def fusion_in_channels(self):
        return 3 * len(self.enabled_functions)


def ablate(config, component):
    """New config with one component removed, for retrain-from-scratch studies."""
    if component in isp.FUNCTION_ORDER:
        remaining = tuple(f for f in config.enabled_functions if f != component)
        if not remaining:
            raise ValueError("cannot ablate the last remaining ISP function")
        return AdapterConfig(config.variant, config.rpe_input_size, remaining,
                             config.fusion_mode, config.output_norm)
    if component == "fusion":
        return AdapterConfig(config.variant, config.rpe_input_size, config.enabled_functions,
                             "single", config.output_norm)
    if component == "normalization":
        return AdapterConfig(config.variant, config.rpe_input_size, config.enabled_functions,
                             config.fusion_mode, "fixed")
    raise ValueError(f"unknown component {component!r}")


class ImageEncoder(ly.Module):
    """Three conv blocks with pooling, ending in a global-average feature vector."""

    def __init__(self, variant, rng):
        super().__init__()
        cin = 3
        self.blocks = []
        for i, (cout, kernel) in enumerate(_ENCODER_STAGES[variant], start=1):
            self.blocks.append(self.add_child(f"block{i}", ly.ConvBlock(cin, cout, kernel, rng)))
            cin = cout

    def forward(self, x):
        for block in self.blocks:
            x = ly.max_pool2(block(x))
        return ly.global_avg_pool(x)


class ParamDecoder(ly.Module):
    """Two hidden linear layers plus a zero-initialized per-function head."""

    def __init__(self, feature_dim, n_out, rng):
        super().__init__()
        self.fc1 = self.add_child("fc1", ly.Linear(feature_dim, feature_dim, rng))
        self.fc2 = self.add_child("fc2", ly.Linear(feature_dim, feature_dim, rng))
        self.head = self.add_child("head", ly.Linear(feature_dim, n_out, rng, zero_init=True))

    def forward(self, feat):
        h = ad.leaky_relu(self.fc1(feat), ly.LEAKY_SLOPE)
        return self.head(self.fc2(h))


class FusionNet(ly.Module):
    """Reverse-hourglass conv stack ending in an unactivated 1x1 projection."""

    def __init__(self, in_channels, variant, rng, mode="hourglass"):
        super().__init__()
        self.mode = mode
        if mode == "single":
            self.out = self.add_child("out", ly.Conv2d(in_channels, 3, 1, rng))
            self.blocks = []
            return
        mids = _FUSION_MIDS[variant]
        chain = (in_channels,) + mids
        self.blocks = [self.add_child(f"block{i}", ly.ConvBlock(cin, cout, 3, rng))
                       for i, (cin, cout) in enumerate(zip(chain[:-1], chain[1:]), start=1)]
        self.out = self.add_child("out", ly.Conv2d(mids[-1], 3, 1, rng))

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return self.out(x)


class _OutputNorm(ly.Module):
    """Batch norm over the 3 output channels, or frozen dataset statistics."""

    def __init__(self, mode):
        super().__init__()
        self.mode = mode
        if mode == "batch":
            self.bn = self.add_child("bn", ly.BatchNorm2d(3))
        else:
            self.fixed_mean = self.add_state("fixed_mean", np.zeros(3))
            self.fixed_std = self.add_state("fixed_std", np.ones(3))

    def forward(self, x):
        if self.mode == "batch":
            return self.bn(x)
        scale = (1.0 / self.fixed_std).reshape(1, 3, 1, 1)
        shift = (-self.fixed_mean / self.fixed_std).reshape(1, 3, 1, 1)
        return x * ad.Tensor(scale) + ad.Tensor(shift)

    def set_fixed_stats(self, mean, std):
        if self.mode != "fixed":
            raise ValueError("fixed statistics only apply to output_norm='fixed'")
        if np.any(np.asarray(std) <= 0):
            raise ValueError("fixed std must be positive")
        self.set_state("fixed_mean", np.asarray(mean, dtype=np.float32))
        self.set_state("fixed_std", np.asarray(std, dtype=np.float32))


class ParallelAdapter(ly.Module):
    """Shared encoder, per-function decoders, fused full-resolution outputs."""

    def __init__(self, config, rng):
        super().__init__()
        self.config = config
        self.encoder = self.add_child("encoder", ImageEncoder(config.variant, rng))
        self.decoders = {
            name: self.add_child(f"decoder_{name}",
                                 ParamDecoder(config.feature_dim, isp.FUNCTION_PARAM_COUNTS[name], rng))
            for name in config.enabled_functions
        }
        self.fusion = self.add_child("fusion", FusionNet(config.fusion_in_channels, config.variant,
                                                         rng, config.fusion_mode))
        self.out_norm = self.add_child("out_norm", _OutputNorm(config.output_norm))

    def predict_params(self, x):
        """Squashed per-function parameters from the downsampled input."""
        small = ad.area_resize(x, self.config.rpe_input_size)
        feat = self.encoder(small)
        return {name: isp.squash_function(name, self.decoders[name](feat))
                for name in self.config.enabled_functions}

    def processor_outputs(self, x):
        params = self.predict_params(x)
        return [isp.apply_function(name, x, params[name]) for name in self.config.enabled_functions]

    def pre_norm(self, x):
        """Fused output before the final normalization stage."""
        fused = isp.fuse_concat(self.processor_outputs(x))
        return self.fusion(fused)

    def forward(self, x):
        return self.out_norm(self.pre_norm(x))


class SequentialAdapter(ly.Module):
    """Stage-chained baseline: wb, ccm, gamma, brightness, each with its own encoder."""

    def __init__(self, config, rng):
        super().__init__()
        if config.enabled_functions != isp.FUNCTION_ORDER:
            raise ValueError("the sequential baseline always runs all four functions")
        self.config = config
        self.encoders = {}
        self.decoders = {}
        for name in SEQUENTIAL_ORDER:
            self.encoders[name] = self.add_child(f"encoder_{name}", ImageEncoder(config.variant, rng))
            self.decoders[name] = self.add_child(
                f"decoder_{name}", ParamDecoder(config.feature_dim, isp.FUNCTION_PARAM_COUNTS[name], rng))
        self.out_norm = self.add_child("out_norm", _OutputNorm(config.output_norm))

    def pre_norm(self, x):
        """Chained stage output before the final normalization stage."""
        cur = x
        for name in SEQUENTIAL_ORDER:
            small = ad.area_resize(cur, self.config.rpe_input_size)
            param = isp.squash_function(name, self.decoders[name](self.encoders[name](small)))
            stage_in = ad.clamp_min0(cur) if name == "gamma" else cur
            cur = isp.apply_function(name, stage_in, param)
        return cur

    def forward(self, x):
        return self.out_norm(self.pre_norm(x))


def build_adapter(kind, config, rng):
    if kind == "parallel":
        return ParallelAdapter(config, rng)
    if kind == "sequential":
        return SequentialAdapter(config, rng)
    raise ValueError(f"unknown adapter kind {kind!r}")
