"""Synthetic RAW scene generator with noise and weather corruptions.

A scene is a dark textured background with a few bright anti-aliased shapes
(disk, square, triangle; class = shape) rendered in linear RGB radiance at
sensor resolution. Corruptions run on the radiance field before mosaicing:
heteroscedastic sensor noise at three severities, or fog, rain, or snow.
The corrupted field is then lit by the scene illuminant and exposure,
sampled onto a Bayer mosaic, and quantized between black and white levels.

Everything is a pure function of the spec: the spec seed drives rendering
and placement, a derived child seed drives the corruption, so one spec
always regenerates bit-identical bytes. Ground-truth boxes live in sensor
pixel coordinates; the packed training images are half resolution, so
loaders halve the coordinates.

The noise model mirrors an underexpose-then-amplify protocol: the signal is
divided by a ratio r, Gaussian noise with variance a*signal + b is added,
and the result is scaled back by r and clamped at zero. Per-pixel variance
on a constant field s is therefore a*s*r + b*r*r, strictly increasing in r.
"""

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import bayer
from .detector import Box

SHAPE_CLASSES = ("disk", "square", "triangle")

NOISE_RATIOS = {"mild": 100.0, "medium": 200.0, "strong": 300.0}
NOISE_SHOT = 1e-4  # a: variance per unit of scaled-down signal
NOISE_READ = 1e-7  # b: signal-independent variance floor

WEATHER_KINDS = ("fog", "rain", "snow")
CORRUPTIONS = ("none", "noise_mild", "noise_medium", "noise_strong") + WEATHER_KINDS

FOG_AIRLIGHT = 0.55
FOG_T_MIN = 0.25
RAIN_DENSITY = 0.002
RAIN_LENGTH = 13
RAIN_GAIN = 0.35
SNOW_DENSITY = 0.0008
SNOW_VALUE = 0.85
SNOW_DESAT = 0.2

_SUPERSAMPLE = 4


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    height: int = 128
    width: int = 128
    min_objects: int = 1
    max_objects: int = 3
    background_range: tuple = (0.02, 0.10)
    object_range: tuple = (0.25, 0.95)
    illuminant: tuple = (1.0, 1.0, 1.0)
    exposure: float = 1.0
    bit_depth: int = 12
    black_level: int = 64
    white_level: int = 4031
    pattern: str = "RGGB"
    corruption: str = "none"

    def __post_init__(self):
        if self.height % 2 or self.width % 2 or self.height < 32 or self.width < 32:
            raise ValueError(f"sensor dims must be even and >= 32, got {self.height}x{self.width}")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError(f"bad object count range ({self.min_objects}, {self.max_objects})")
        for name in ("background_range", "object_range"):
            lo, hi = getattr(self, name)
            if not 0.0 <= lo <= hi:
                raise ValueError(f"{name} must satisfy 0 <= lo <= hi, got ({lo}, {hi})")
        if len(self.illuminant) != 3 or any(g <= 0 for g in self.illuminant):
            raise ValueError(f"illuminant gains must be 3 positive values, got {self.illuminant}")
        if not 0.0 < self.exposure <= 1.0:
            raise ValueError(f"exposure must lie in (0, 1], got {self.exposure}")
        if self.corruption not in CORRUPTIONS:
            raise ValueError(f"unknown corruption {self.corruption!r}")
        if not 0 <= self.black_level < self.white_level <= 2 ** self.bit_depth - 1:
            raise ValueError(f"need 0 <= black ({self.black_level}) < white ({self.white_level})")

    def as_dict(self):
        d = asdict(self)
        for key in ("background_range", "object_range", "illuminant"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("background_range", "object_range", "illuminant"):
            d[key] = tuple(d[key])
        return cls(**d)


# ------------------------------------------------------------- rendering


def _smooth_field(rng, h, w, cells, lo, hi):
    """Low-frequency field: a coarse uniform grid bilinearly upsampled.

    Bilinear blending of uniform[lo, hi] corners keeps every output value
    inside [lo, hi] (convex combination) while staying spatially smooth.
    """
    grid = rng.uniform(lo, hi, (cells, cells))
    gy = np.linspace(0.0, cells - 1.0, h)
    gx = np.linspace(0.0, cells - 1.0, w)
    iy = np.clip(np.floor(gy).astype(int), 0, cells - 2)
    ix = np.clip(np.floor(gx).astype(int), 0, cells - 2)
    fy = (gy - iy)[:, None]
    fx = (gx - ix)[None, :]
    g00 = grid[np.ix_(iy, ix)]
    g01 = grid[np.ix_(iy, ix + 1)]
    g10 = grid[np.ix_(iy + 1, ix)]
    g11 = grid[np.ix_(iy + 1, ix + 1)]
    return (g00 * (1 - fy) * (1 - fx) + g01 * (1 - fy) * fx
            + g10 * fy * (1 - fx) + g11 * fy * fx)


def _coverage(h, w, bounds, inside_fn):
    """Anti-aliased alpha over a bounding box via supersampled membership."""
    y0, y1, x0, x1 = bounds
    y0, x0 = max(int(np.floor(y0)), 0), max(int(np.floor(x0)), 0)
    y1, x1 = min(int(np.ceil(y1)), h), min(int(np.ceil(x1)), w)
    if y0 >= y1 or x0 >= x1:
        return (slice(0, 0), slice(0, 0)), np.zeros((0, 0))
    ss = _SUPERSAMPLE
    ys = y0 + (np.arange((y1 - y0) * ss) + 0.5) / ss
    xs = x0 + (np.arange((x1 - x0) * ss) + 0.5) / ss
    mask = inside_fn(ys[:, None], xs[None, :]).astype(np.float64)
    alpha = mask.reshape(y1 - y0, ss, x1 - x0, ss).mean(axis=(1, 3))
    return (slice(y0, y1), slice(x0, x1)), alpha


def _polygon_inside(vertices):
    """Membership test for a convex CCW polygon via half-plane products."""
    def inside(yy, xx):
        keep = np.ones(np.broadcast_shapes(yy.shape, xx.shape), dtype=bool)
        n = len(vertices)
        for i in range(n):
            (y1, x1), (y2, x2) = vertices[i], vertices[(i + 1) % n]
            cross = (x2 - x1) * (yy - y1) - (y2 - y1) * (xx - x1)
            keep &= cross >= 0.0
        return keep
    return inside


def _shape_geometry(kind, cy, cx, radius, angle):
    """Return (inside_fn, tight AABB) for a shape of given circumradius."""
    if kind == "disk":
        def inside(yy, xx):
            return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
        return inside, (cx - radius, cy - radius, 2 * radius, 2 * radius)
    if kind == "square":
        angles = angle + np.arange(4) * (np.pi / 2)
    elif kind == "triangle":
        angles = angle + np.arange(3) * (2 * np.pi / 3)
    else:
        raise ValueError(f"unknown shape {kind!r}")
    # CCW in (y up is down here, but consistent winding is all that matters)
    verts = [(float(cy + radius * np.sin(a)), float(cx + radius * np.cos(a)))
             for a in angles]
    ys = [v[0] for v in verts]
    xs = [v[1] for v in verts]
    box = (min(xs), min(ys), max(xs) - min(xs), max(ys) - min(ys))
    return _polygon_inside(verts), box


def render_scene(spec):
    """Render one scene; returns (float32 [3,H,W] radiance, list of Box)."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    lo, hi = spec.background_range

    base = _smooth_field(rng, h, w, 8, lo, hi)
    tint = rng.uniform(0.85, 1.15, (3, 1, 1))
    grain = 1.0 + 0.05 * rng.standard_normal((3, h, w))
    radiance = np.clip(base[None] * tint * grain, 0.0, None)

    r_lo = max(3.0, min(h, w) / 16.0)
    r_hi = max(r_lo + 1.0, min(h, w) / 6.0)
    min_sep = max(12.0, min(h, w) / 6.0)
    margin = 2.0

    truth = []
    centers = []
    n_objects = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    for _ in range(n_objects):
        kind_idx = int(rng.integers(0, len(SHAPE_CLASSES)))
        radius = float(rng.uniform(r_lo, r_hi))
        angle = float(rng.uniform(0.0, 2 * np.pi))
        color = rng.uniform(*spec.object_range, 3)
        placed = False
        for _ in range(200):
            cy = float(rng.uniform(radius + margin, h - radius - margin))
            cx = float(rng.uniform(radius + margin, w - radius - margin))
            if all((cy - oy) ** 2 + (cx - ox) ** 2 >= min_sep ** 2 for oy, ox in centers):
                placed = True
                break
        if not placed:
            continue
        centers.append((cy, cx))
        inside, (bx, by, bw, bh) = _shape_geometry(SHAPE_CLASSES[kind_idx], cy, cx, radius, angle)
        (sy, sx), alpha = _coverage(h, w, (cy - radius, cy + radius, cx - radius, cx + radius), inside)
        region = radiance[:, sy, sx]
        radiance[:, sy, sx] = region * (1.0 - alpha) + color[:, None, None] * alpha
        truth.append(Box(bx, by, bw, bh, kind_idx))
    return radiance.astype(np.float32), truth


# ------------------------------------------------------------ corruptions


def add_noise(radiance, severity, seed):
    """Heteroscedastic sensor noise at a named severity; clamps at zero."""
    if severity not in NOISE_RATIOS:
        raise ValueError(f"unknown noise severity {severity!r}")
    ratio = NOISE_RATIOS[severity]
    rng = np.random.default_rng(seed)
    scaled = radiance / ratio
    sigma = np.sqrt(NOISE_SHOT * np.clip(scaled, 0.0, None) + NOISE_READ)
    noisy = scaled + rng.standard_normal(radiance.shape) * sigma
    return np.clip(noisy * ratio, 0.0, None).astype(np.float32)


def noise_variance(signal, severity):
    """Predicted per-pixel variance of add_noise on a constant signal."""
    ratio = NOISE_RATIOS[severity]
    return NOISE_SHOT * signal * ratio + NOISE_READ * ratio * ratio


def fog_transmission(shape, seed, t_min=FOG_T_MIN):
    """Smooth low-frequency transmission field in [t_min, 1]."""
    h, w = shape
    return _smooth_field(np.random.default_rng(seed), h, w, 4, t_min, 1.0)


def apply_fog(radiance, transmission, airlight=FOG_AIRLIGHT):
    """Convex blend toward the airlight: t*x + (1-t)*A."""
    t = np.asarray(transmission)
    return (t[None] * radiance + (1.0 - t[None]) * airlight).astype(np.float32)


def rain_streaks(shape, seed, density=RAIN_DENSITY, length=RAIN_LENGTH):
    """Bright streak field in [0, 1]: anti-aliased near-vertical segments.

    One shared fall angle per frame; streaks max-compose where they cross so
    the field stays bounded by the brightest single streak.
    """
    h, w = shape
    rng = np.random.default_rng(seed)
    angle = rng.uniform(-0.35, 0.35)
    dy, dx = np.cos(angle), np.sin(angle)
    field = np.zeros((h, w))
    half = length / 2.0 + 1.0
    for _ in range(max(1, round(density * h * w))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        gain = rng.uniform(0.5, 1.0)

        def inside(yy, xx, cy=cy, cx=cx):
            y, x = yy - cy, xx - cx
            along = y * dy + x * dx
            across = np.abs(x * dy - y * dx)
            return (np.abs(along) <= length / 2.0) & (across <= 0.6)

        (sy, sx), alpha = _coverage(h, w, (cy - half, cy + half, cx - half, cx + half), inside)
        if alpha.size:
            field[sy, sx] = np.maximum(field[sy, sx], gain * alpha)
    return field


def apply_rain(radiance, seed):
    streaks = rain_streaks(radiance.shape[1:], seed)
    return (radiance + RAIN_GAIN * streaks[None]).astype(np.float32)


def apply_snow(radiance, seed):
    """Bright quasi-circular particles plus mild global desaturation."""
    h, w = radiance.shape[1:]
    rng = np.random.default_rng(seed)
    luma = radiance.mean(axis=0, keepdims=True)
    out = (1.0 - SNOW_DESAT) * radiance + SNOW_DESAT * luma
    n_flakes = max(1, int(SNOW_DENSITY * h * w))
    for _ in range(n_flakes):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        radius = rng.uniform(1.0, 3.0)
        stretch = rng.uniform(1.0, 1.6)  # quasi-circular, not perfect disks

        def inside(yy, xx):
            return ((yy - cy) / stretch) ** 2 + (xx - cx) ** 2 <= radius ** 2

        bounds = (cy - radius * stretch, cy + radius * stretch, cx - radius, cx + radius)
        (sy, sx), alpha = _coverage(h, w, bounds, inside)
        if alpha.size == 0:
            continue
        region = out[:, sy, sx]
        out[:, sy, sx] = region * (1.0 - alpha) + SNOW_VALUE * alpha
    return out.astype(np.float32)


def apply_weather(radiance, kind, seed):
    """Dispatch fog, rain, or snow on the linear radiance field."""
    if kind == "fog":
        return apply_fog(radiance, fog_transmission(radiance.shape[1:], seed))
    if kind == "rain":
        return apply_rain(radiance, seed)
    if kind == "snow":
        return apply_snow(radiance, seed)
    raise ValueError(f"unknown weather kind {kind!r}")


def corrupt_radiance(radiance, corruption, seed):
    """Apply a named corruption; 'none' returns the input unchanged."""
    if corruption == "none":
        return radiance
    if corruption.startswith("noise_"):
        return add_noise(radiance, corruption.split("_", 1)[1], seed)
    return apply_weather(radiance, corruption, seed)


# --------------------------------------------------------------- mosaicing


def mosaic_and_quantize(radiance, spec, frame_id=""):
    """Light the radiance, sample the Bayer pattern, quantize to raw levels."""
    gains = np.asarray(spec.illuminant, dtype=np.float64)[:, None, None]
    lit = radiance.astype(np.float64) * gains * spec.exposure
    plane = bayer.mosaic_from_rgb(lit, spec.pattern)
    span = spec.white_level - spec.black_level
    q = np.round(spec.black_level + plane * span)
    q = np.clip(q, spec.black_level, spec.white_level)
    dtype = np.dtype("<u2") if spec.bit_depth <= 16 else np.dtype("<u4")
    return bayer.BayerFrame(
        width=spec.width, height=spec.height, data=q.astype(dtype),
        bit_depth=spec.bit_depth, black_level=spec.black_level,
        white_level=spec.white_level, pattern=spec.pattern, frame_id=frame_id,
    )


def generate_frame(spec, frame_id=""):
    """Full path from spec to (BayerFrame, truth boxes)."""
    radiance, truth = render_scene(spec)
    corruption_seed = np.random.SeedSequence([spec.seed, 0xC0FFEE])
    radiance = corrupt_radiance(radiance, spec.corruption, corruption_seed)
    return mosaic_and_quantize(radiance, spec, frame_id), truth


# ----------------------------------------------------------------- dataset


def frame_seed(global_seed, index):
    """Per-frame seed from a splittable scheme, stable across runs."""
    return int(np.random.SeedSequence([int(global_seed), int(index)]).generate_state(1)[0])


def make_dataset_specs(global_seed, counts, corruption="none", size=128,
                       vary_lighting=True, exposure_range=(0.4, 1.0),
                       illuminant_range=(0.7, 1.3), **spec_kwargs):
    """Per-split SceneSpec lists with per-frame seeds, illuminant, exposure.

    ``counts`` maps split name to frame count; frame indices run globally
    across splits so train and val never share a seed. Narrow or dim
    ``exposure_range`` values make low-light sets; lighting draws depend only
    on (global_seed, index) so the same seed always yields the same scenes.
    """
    specs = {}
    index = 0
    for split, n in counts.items():
        rows = []
        for _ in range(n):
            seed = frame_seed(global_seed, index)
            if vary_lighting:
                draw = np.random.default_rng(np.random.SeedSequence([int(global_seed), int(index), 1]))
                illuminant = tuple(np.round(draw.uniform(*illuminant_range, 3), 6))
                exposure = float(np.round(draw.uniform(*exposure_range), 6))
            else:
                illuminant, exposure = (1.0, 1.0, 1.0), 1.0
            rows.append(SceneSpec(seed=seed, height=size, width=size,
                                  illuminant=illuminant, exposure=exposure,
                                  corruption=corruption, **spec_kwargs))
            index += 1
        specs[split] = rows
    return specs


MANIFEST_FORMAT = "rawprep-dataset-v1"


def write_dataset(specs_by_split, out_dir):
    """Materialize frames, annotations, and a regeneration manifest.

    Layout: ``frames/<id>.raw`` + ``frames/<id>.meta``, ``annotations.json``
    (sensor-coordinate boxes), ``manifest.json`` (complete specs per frame).
    Returns the manifest dict.
    """
    frames_dir = os.path.join(out_dir, "frames")
    os.makedirs(frames_dir, exist_ok=True)
    manifest = {"format": MANIFEST_FORMAT, "splits": {}, "specs": {}}
    annotations = {"coordinates": "sensor", "classes": list(SHAPE_CLASSES), "frames": {}}
    for split, specs in specs_by_split.items():
        ids = []
        for i, spec in enumerate(specs):
            fid = f"{split}_{i:05d}"
            frame, truth = generate_frame(spec, fid)
            bayer.save_frame(frames_dir, frame)
            annotations["frames"][fid] = {
                "split": split,
                "boxes": [{"x": b.x, "y": b.y, "w": b.w, "h": b.h, "label": b.label}
                          for b in truth],
            }
            manifest["specs"][fid] = spec.as_dict()
            ids.append(fid)
        manifest["splits"][split] = ids
    with open(os.path.join(out_dir, "annotations.json"), "w") as fh:
        json.dump(annotations, fh, indent=1, sort_keys=True)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def read_manifest(dataset_dir):
    with open(os.path.join(dataset_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"unrecognized manifest format {manifest.get('format')!r}")
    return manifest


def read_annotations(dataset_dir):
    """Ground truth as {frame_id: [Box, ...]} in sensor coordinates."""
    with open(os.path.join(dataset_dir, "annotations.json")) as fh:
        payload = json.load(fh)
    return {fid: [Box(b["x"], b["y"], b["w"], b["h"], b["label"])
                  for b in entry["boxes"]]
            for fid, entry in payload["frames"].items()}


def regenerate_dataset(manifest, out_dir):
    """Rebuild every frame from a manifest; bytes match the original run."""
    specs_by_split = {
        split: [SceneSpec.from_dict(manifest["specs"][fid]) for fid in ids]
        for split, ids in manifest["splits"].items()
    }
    return write_dataset(specs_by_split, out_dir)
