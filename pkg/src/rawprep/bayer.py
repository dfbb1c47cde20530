"""Bayer-domain raw handling: frame container, packing, and a classic ISP.

A ``BayerFrame`` stores the sensor mosaic as unsigned integers with its
pattern and level metadata. All downstream processing runs on [0,1] floats:
normalize by black/white level, pack the mosaic into four half-resolution
planes in fixed (R, G1, G2, B) order, then average the greens to get the
3-channel linear image every ISP op consumes. G1 is the green whose tile
position comes first in raster order, G2 the other, for every pattern.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .autodiff import area_resize_weights

PATTERNS = ("RGGB", "BGGR", "GRBG", "GBRG")
BIT_DEPTHS = (12, 14, 16, 24)

# tile offsets (dy, dx) of each output channel, per sensor pattern
_OFFSETS = {
    "RGGB": {"R": (0, 0), "G1": (0, 1), "G2": (1, 0), "B": (1, 1)},
    "BGGR": {"R": (1, 1), "G1": (0, 1), "G2": (1, 0), "B": (0, 0)},
    "GRBG": {"R": (0, 1), "G1": (0, 0), "G2": (1, 1), "B": (1, 0)},
    "GBRG": {"R": (1, 0), "G1": (0, 0), "G2": (1, 1), "B": (0, 1)},
}
_CHANNEL_ORDER = ("R", "G1", "G2", "B")


@dataclass
class BayerFrame:
    width: int
    height: int
    data: np.ndarray
    bit_depth: int
    black_level: int
    white_level: int
    pattern: str
    frame_id: str = ""

    def __post_init__(self):
        self.validate()

    def container_dtype(self):
        return np.dtype("<u2") if self.bit_depth <= 16 else np.dtype("<u4")

    def validate(self):
        if self.width <= 0 or self.height <= 0 or self.width % 2 or self.height % 2:
            raise ValueError(f"frame dims must be even positive, got {self.width}x{self.height}")
        if self.bit_depth not in BIT_DEPTHS:
            raise ValueError(f"unsupported bit depth {self.bit_depth}")
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown Bayer pattern {self.pattern!r}")
        if not 0 <= self.black_level < self.white_level <= 2 ** self.bit_depth - 1:
            raise ValueError(f"need 0 <= black ({self.black_level}) < white ({self.white_level}) <= {2 ** self.bit_depth - 1}")
        if self.data.shape != (self.height, self.width):
            raise ValueError(f"data shape {self.data.shape} != ({self.height}, {self.width})")
        if self.data.dtype.kind != "u":
            raise ValueError(f"mosaic data must be unsigned integers, got {self.data.dtype}")
        if self.data.size and int(self.data.max()) > 2 ** self.bit_depth - 1:
            raise ValueError(f"sample {int(self.data.max())} exceeds bit depth {self.bit_depth}")


def normalize_raw(frame):
    """Map raw integers to [0,1] floats via black/white levels."""
    span = frame.white_level - frame.black_level
    if span <= 0:
        raise ValueError(f"white level {frame.white_level} must exceed black level {frame.black_level}")
    plane = (frame.data.astype(np.float32) - frame.black_level) / span
    return np.clip(plane, 0.0, 1.0)


def pack_bayer_to_rggb(plane, pattern):
    """Split a mosaic plane into [4, H/2, W/2] channels ordered (R, G1, G2, B)."""
    h, w = plane.shape
    if h % 2 or w % 2:
        raise ValueError(f"mosaic dims must be even, got {h}x{w}")
    if pattern not in PATTERNS:
        raise ValueError(f"unknown Bayer pattern {pattern!r}")
    offsets = _OFFSETS[pattern]
    return np.stack([plane[dy::2, dx::2] for dy, dx in (offsets[c] for c in _CHANNEL_ORDER)])


def unpack_rggb(channels, pattern, out_dtype=None):
    """Inverse of ``pack_bayer_to_rggb``: reassemble the mosaic plane."""
    if pattern not in PATTERNS:
        raise ValueError(f"unknown Bayer pattern {pattern!r}")
    _, hh, hw = channels.shape
    plane = np.empty((hh * 2, hw * 2), dtype=out_dtype or channels.dtype)
    offsets = _OFFSETS[pattern]
    for name, chan in zip(_CHANNEL_ORDER, channels):
        dy, dx = offsets[name]
        plane[dy::2, dx::2] = chan
    return plane


def rggb_to_rgb(channels):
    """Average the two greens: [4,h,w] -> [3,h,w] linear RGB."""
    return np.stack([channels[0], 0.5 * (channels[1] + channels[2]), channels[3]])


def mosaic_from_rgb(rgb, pattern):
    """Sample a full-resolution [3,H,W] RGB field onto one mosaic plane.

    Each sensor site keeps only its pattern color; both green sites sample
    the single green channel. Inverse of the pack + green-average frontend
    up to the information lost at non-sampled sites.
    """
    if pattern not in PATTERNS:
        raise ValueError(f"unknown Bayer pattern {pattern!r}")
    c, h, w = rgb.shape
    if c != 3 or h % 2 or w % 2:
        raise ValueError(f"need [3,even,even] rgb, got {rgb.shape}")
    plane = np.empty((h, w), dtype=rgb.dtype)
    source = {"R": 0, "G1": 1, "G2": 1, "B": 2}
    for name, (dy, dx) in _OFFSETS[pattern].items():
        plane[dy::2, dx::2] = rgb[source[name], dy::2, dx::2]
    return plane


def frame_to_linear_rgb(frame):
    """Full frontend: normalize, pack, green-average."""
    return rggb_to_rgb(pack_bayer_to_rggb(normalize_raw(frame), frame.pattern))


def gray_world_gains(rgb):
    """Per-channel gains scaling R and B means onto the G mean; degenerate means give 1."""
    means = rgb.reshape(3, -1).mean(axis=1)
    gains = np.ones(3, dtype=np.float32)
    if means[1] > 0:
        for c in (0, 2):
            if means[c] > 0:
                gains[c] = means[1] / means[c]
    return gains


def classic_isp_srgb(frame):
    """Fixed reference ISP: gray-world WB, gamma 1/2.2, 8-bit quantization."""
    rgb = frame_to_linear_rgb(frame)
    rgb = rgb * gray_world_gains(rgb)[:, None, None]
    rgb = np.clip(rgb, 0.0, None) ** (1.0 / 2.2)
    return np.round(255.0 * np.clip(rgb, 0.0, 1.0)).astype(np.uint8)


def downsample_area(image, target):
    """Area-average a (C,H,W) or (H,W) array to target (h,w); mean preserving."""
    th, tw = target
    h, w = image.shape[-2:]
    if (h, w) == (th, tw):
        return image.astype(np.float32, copy=True)
    wa = area_resize_weights(h, th).astype(np.float32)
    wb = area_resize_weights(w, tw).astype(np.float32)
    return np.einsum("ih,...hw,jw->...ij", wa, image.astype(np.float32), wb, optimize=True)


# -- disk format -----------------------------------------------------------


def save_frame(directory, frame):
    """Write ``<frame_id>.raw`` (packed samples) + ``<frame_id>.meta`` sidecar."""
    os.makedirs(directory, exist_ok=True)
    base = os.path.join(directory, frame.frame_id)
    frame.data.astype(frame.container_dtype()).tofile(base + ".raw")
    meta = {
        "frame_id": frame.frame_id,
        "width": frame.width,
        "height": frame.height,
        "bit_depth": frame.bit_depth,
        "black_level": frame.black_level,
        "white_level": frame.white_level,
        "pattern": frame.pattern,
    }
    with open(base + ".meta", "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
        f.write("\n")
    return base + ".raw", base + ".meta"


def load_frame(meta_path):
    """Read a frame from its ``.meta`` sidecar plus the matching ``.raw``."""
    with open(meta_path) as f:
        meta = json.load(f)
    raw_path = os.path.splitext(meta_path)[0] + ".raw"
    dtype = np.dtype("<u2") if meta["bit_depth"] <= 16 else np.dtype("<u4")
    expected = meta["width"] * meta["height"] * dtype.itemsize
    actual = os.path.getsize(raw_path)
    if actual != expected:
        raise ValueError(f"{raw_path}: {actual} bytes, expected {expected} for {meta['width']}x{meta['height']}")
    data = np.fromfile(raw_path, dtype=dtype).reshape(meta["height"], meta["width"])
    return BayerFrame(
        width=meta["width"], height=meta["height"], data=data,
        bit_depth=meta["bit_depth"], black_level=meta["black_level"],
        white_level=meta["white_level"], pattern=meta["pattern"], frame_id=meta["frame_id"],
    )
