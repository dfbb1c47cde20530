"""The four differentiable image-processing functions and their fusion.

Each function consumes the full-resolution 3-channel linear image and a
per-image parameter predicted by a decoder. Raw decoder outputs are squashed
through tanh so that zero maps exactly to the identity transform: gamma and
white-balance gains in [1/4, 4], brightness offset in [-0.5, 0.5], and the
color matrix within 0.5 of identity entrywise. The fusion input stacks the
four outputs in the frozen channel order gamma, brightness, ccm, wb.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

LN4 = float(np.log(4.0))

FUNCTION_ORDER = ("gamma", "brightness", "ccm", "wb")
FUNCTION_PARAM_COUNTS = {"gamma": 1, "brightness": 1, "ccm": 9, "wb": 3}


@dataclass
class IspParams:
    """Squashed per-image parameters; every field is a batched tensor."""

    gamma: Tensor            # (N, 1)
    brightness_offset: Tensor  # (N, 1)
    ccm: Tensor              # (N, 3, 3)
    wb_gains: Tensor         # (N, 3)


def squash_gamma(z):
    return ad.exp(ad.tanh(z) * LN4)


def squash_brightness(z):
    return ad.tanh(z) * 0.5


def squash_ccm(z):
    n = z.data.shape[0]
    if z.data.shape != (n, 9):
        raise ShapeError(f"squash_ccm: need (N,9), got {z.data.shape}")
    return ad.reshape(ad.tanh(z) * 0.5, (n, 3, 3)) + Tensor(np.eye(3, dtype=z.dtype))


def squash_wb(z):
    return ad.exp(ad.tanh(z) * LN4)


_SQUASH = {"gamma": squash_gamma, "brightness": squash_brightness, "ccm": squash_ccm, "wb": squash_wb}


def squash_function(name, z):
    return _SQUASH[name](z)


def squash_params(z):
    """Split 14 raw decoder values per image into squashed IspParams."""
    if z.data.ndim != 2 or z.data.shape[1] != 14:
        raise ShapeError(f"squash_params: need (N,14), got {z.data.shape}")
    return IspParams(
        gamma=squash_gamma(ad.narrow(z, 1, 0, 1)),
        brightness_offset=squash_brightness(ad.narrow(z, 1, 1, 1)),
        ccm=squash_ccm(ad.narrow(z, 1, 2, 9)),
        wb_gains=squash_wb(ad.narrow(z, 1, 11, 3)),
    )


def apply_gamma(x, gamma):
    """out = max(x, eps)^gamma, with exact zeros staying zero."""
    n = x.data.shape[0]
    if gamma.data.shape != (n, 1):
        raise ShapeError(f"apply_gamma: gamma shape {gamma.data.shape} != ({n}, 1)")
    return ad.pow_tensor(x, ad.reshape(gamma, (n, 1, 1, 1)))


def apply_brightness(x, offset):
    n = x.data.shape[0]
    if offset.data.shape != (n, 1):
        raise ShapeError(f"apply_brightness: offset shape {offset.data.shape} != ({n}, 1)")
    return x + ad.reshape(offset, (n, 1, 1, 1))


def apply_ccm(x, ccm):
    return ad.channel_matmul(ccm, x)


def apply_wb(x, wb_gains):
    n, c = x.data.shape[:2]
    if wb_gains.data.shape != (n, c):
        raise ShapeError(f"apply_wb: gains shape {wb_gains.data.shape} != ({n}, {c})")
    return x * ad.reshape(wb_gains, (n, c, 1, 1))


_APPLY = {"gamma": apply_gamma, "brightness": apply_brightness, "ccm": apply_ccm, "wb": apply_wb}


def apply_function(name, x, param):
    return _APPLY[name](x, param)


def apply_all(x, params):
    """All four functions on the same input, returned in FUNCTION_ORDER."""
    return [
        apply_gamma(x, params.gamma),
        apply_brightness(x, params.brightness_offset),
        apply_ccm(x, params.ccm),
        apply_wb(x, params.wb_gains),
    ]


def fuse_concat(outputs):
    """Stack per-function outputs along channels in the frozen order."""
    for out in outputs:
        if out.data.shape[1] != 3:
            raise ShapeError(f"fuse_concat: every block must have 3 channels, got {out.data.shape}")
    return ad.concat(outputs, axis=1)
