"""End-to-end experiment harness: pipelines, training loop, comparison.

Five pipeline flavors share one detector. ``raw`` feeds the packed linear
RGB image through frozen dataset mean-std normalization; ``srgb`` feeds the
classic reference ISP output divided by 255 through its own dataset stats;
``ram``, ``ram_t``, and ``sequential`` feed a learned preprocessing module
whose internal batch norm replaces dataset normalization (its output
distribution moves during training, so fixed statistics cannot exist).

Training is fully determined by the config seed: one seed sequence child
initializes parameters, another drives epoch shuffling and augmentation.
The step log is line-delimited JSON, one record per optimizer step with
every loss term and the effective learning rate, plus one summary record
per epoch.
"""

import csv
import json
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from . import bayer
from . import checkpoints as ckpt
from . import detector as det
from . import evalmetrics as em
from . import layers as ly
from . import scenes
from . import isp_ops as isp
from .adapter import AdapterConfig, build_adapter
from .optim import SGD

PIPELINES = ("raw", "srgb", "sequential", "ram", "ram_t")

_ADAPTER_PIPELINES = {"ram": ("parallel", "ram"), "ram_t": ("parallel", "ram_t"),
                      "sequential": ("sequential", "ram")}


class TrainingDivergence(RuntimeError):
    """Raised when the loss stops being finite; message carries the step."""


@dataclass
class OptimizerConfig:
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: tuple = (18, 24)
    decay_factor: float = 0.1

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if list(self.milestones) != sorted(self.milestones):
            raise ValueError("milestones must be sorted ascending")


@dataclass
class ExperimentConfig:
    pipeline: str = "ram"
    dataset_dir: str = ""
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    image_size: tuple = (64, 64)
    classes: int = len(scenes.SHAPE_CLASSES)
    rpe_input_size: tuple = (64, 64)
    enabled_functions: tuple = isp.FUNCTION_ORDER
    fusion_mode: str = "hourglass"
    output_norm: str = "batch"
    augment: bool = True
    resize_jitter: float = 0.10
    iou_thresholds: tuple = em.DEFAULT_IOU_THRESHOLDS
    score_threshold: float = 0.3
    eval_score_threshold: float = 0.05
    nms_iou: float = 0.5
    eval_every: int = 0  # epochs between val evaluations; 0 = final only

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ValueError(f"unknown pipeline {self.pipeline!r}; choose from {PIPELINES}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        self.image_size = tuple(self.image_size)
        self.rpe_input_size = tuple(self.rpe_input_size)
        self.enabled_functions = tuple(self.enabled_functions)
        # reuse the adapter config validation for the learned-module fields
        AdapterConfig("ram", self.rpe_input_size, self.enabled_functions,
                      self.fusion_mode, self.output_norm)
        if self.pipeline == "sequential" and self.enabled_functions != isp.FUNCTION_ORDER:
            raise ValueError("the sequential baseline always runs all four functions")
        self.iou_thresholds = tuple(float(t) for t in self.iou_thresholds)
        if list(self.iou_thresholds) != sorted(self.iou_thresholds):
            raise ValueError("iou_thresholds must be sorted ascending")
        if not 0.0 <= self.score_threshold < 1.0 or not 0.0 <= self.eval_score_threshold < 1.0:
            raise ValueError("score thresholds must lie in [0, 1)")
        if not 0.0 <= self.resize_jitter < 0.5:
            raise ValueError("resize_jitter must lie in [0, 0.5)")
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)

    def as_dict(self):
        d = asdict(self)
        for key in ("image_size", "rpe_input_size", "enabled_functions", "iou_thresholds"):
            d[key] = list(d[key])
        d["optimizer"]["milestones"] = list(d["optimizer"]["milestones"])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        if "optimizer" in d and isinstance(d["optimizer"], dict):
            opt_known = {f.name for f in fields(OptimizerConfig)}
            opt_unknown = set(d["optimizer"]) - opt_known
            if opt_unknown:
                raise ValueError(f"unknown optimizer keys {sorted(opt_unknown)}")
        return cls(**d)


def parse_override(text):
    """``key=value`` or ``outer.inner=value``; value parsed as JSON else string."""
    if "=" not in text:
        raise ValueError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_overrides(config_dict, overrides):
    """Apply dotted-key overrides to a nested config dict; returns a copy."""
    out = json.loads(json.dumps(config_dict))
    for text in overrides:
        key, value = parse_override(text)
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ValueError(f"override {key!r}: no nested section {part!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ValueError(f"override {key!r}: unknown config key {parts[-1]!r}")
        node[parts[-1]] = value
    return out


# ------------------------------------------------------------------ dataset


@dataclass
class DetectionDataset:
    frame_ids: list
    images: np.ndarray  # (N, 3, H, W) packed linear RGB, float32
    srgb: np.ndarray    # (N, 3, H, W) classic ISP output / 255, float32
    truths: list        # per image: list of Box in packed coordinates

    def __len__(self):
        return len(self.frame_ids)


def load_split(dataset_dir, split):
    """Frames plus half-resolution ground truth for one manifest split."""
    manifest = scenes.read_manifest(dataset_dir)
    if split not in manifest["splits"]:
        raise KeyError(f"split {split!r} not in dataset (has {sorted(manifest['splits'])})")
    annotations = scenes.read_annotations(dataset_dir)
    ids = manifest["splits"][split]
    images, srgbs, truths = [], [], []
    for fid in ids:
        frame = bayer.load_frame(os.path.join(dataset_dir, "frames", fid + ".meta"))
        images.append(bayer.frame_to_linear_rgb(frame))
        srgbs.append(bayer.classic_isp_srgb(frame).astype(np.float32) / 255.0)
        truths.append([det.Box(b.x / 2, b.y / 2, b.w / 2, b.h / 2, b.label)
                       for b in annotations[fid]])
    return DetectionDataset(ids, np.stack(images), np.stack(srgbs), truths)


def representation(dataset, pipeline):
    """The image array a pipeline consumes (before any normalization)."""
    return dataset.srgb if pipeline == "srgb" else dataset.images


def channel_stats(images):
    """Per-channel mean and std over a (N,3,H,W) stack; std floored at 1e-6."""
    mean = images.mean(axis=(0, 2, 3))
    std = np.maximum(images.std(axis=(0, 2, 3)), 1e-6)
    return mean.astype(np.float32), std.astype(np.float32)


# ------------------------------------------------------------ augmentation


def _resize_canvas(images, truths, scale):
    """Area-resample about the center onto the original canvas size.

    Shrinking letterboxes with zero borders; growing center-crops. Boxes are
    scaled and shifted identically and clipped to the canvas; boxes whose
    clipped extent collapses below one pixel are dropped.
    """
    n, c, h, w = images.shape
    hs, ws = max(2, round(h * scale)), max(2, round(w * scale))
    if (hs, ws) == (h, w):
        return images, truths
    scaled = bayer.downsample_area(images.reshape(n * c, h, w), (hs, ws)).reshape(n, c, hs, ws)
    out = np.zeros_like(images)
    oy, ox = (h - hs) // 2, (w - ws) // 2
    span_y, span_x = min(h, hs), min(w, ws)
    out[:, :, max(0, oy):max(0, oy) + span_y, max(0, ox):max(0, ox) + span_x] = \
        scaled[:, :, max(0, -oy):max(0, -oy) + span_y, max(0, -ox):max(0, -ox) + span_x]
    sy, sx = hs / h, ws / w
    new_truths = []
    for boxes in truths:
        kept = []
        for b in boxes:
            x1 = np.clip(b.x * sx + ox, 0.0, w)
            y1 = np.clip(b.y * sy + oy, 0.0, h)
            x2 = np.clip((b.x + b.w) * sx + ox, 0.0, w)
            y2 = np.clip((b.y + b.h) * sy + oy, 0.0, h)
            if x2 - x1 >= 1.0 and y2 - y1 >= 1.0:
                kept.append(det.Box(float(x1), float(y1), float(x2 - x1), float(y2 - y1), b.label))
        new_truths.append(kept)
    return out, new_truths


def augment_batch(images, truths, rng, jitter=0.10):
    """Horizontal flip with p=0.5 per image, then one shared resize draw."""
    images = images.copy()
    truths = [list(t) for t in truths]
    w = images.shape[-1]
    for i in range(len(images)):
        if rng.random() < 0.5:
            images[i] = images[i, :, :, ::-1]
            truths[i] = [det.Box(w - b.x - b.w, b.y, b.w, b.h, b.label) for b in truths[i]]
    scale = 1.0 + rng.uniform(-jitter, jitter)
    return _resize_canvas(images, truths, scale)


# ------------------------------------------------------------------- model


class DetectionModel(ly.Module):
    """Preprocessing stage plus grid detector, checkpointed as one module.

    For ``raw``/``srgb`` the stage is frozen dataset normalization kept as
    persistent state (so checkpoints carry it); for learned pipelines it is
    the adapter module and the state arrays stay at their identity values.
    """

    def __init__(self, config, rng):
        super().__init__()
        self.pipeline = config.pipeline
        self.input_mean = self.add_state("input_mean", np.zeros(3, dtype=np.float32))
        self.input_std = self.add_state("input_std", np.ones(3, dtype=np.float32))
        if config.pipeline in _ADAPTER_PIPELINES:
            kind, variant = _ADAPTER_PIPELINES[config.pipeline]
            acfg = AdapterConfig(variant, config.rpe_input_size, config.enabled_functions,
                                 config.fusion_mode, config.output_norm)
            self.adapter = self.add_child("adapter", build_adapter(kind, acfg, rng))
        else:
            self.adapter = None
        self.detector = self.add_child(
            "detector", det.GridDetector(det.DetectorConfig(config.image_size, config.classes), rng))

    def set_input_stats(self, mean, std):
        self.set_state("input_mean", np.asarray(mean, dtype=np.float32))
        self.set_state("input_std", np.asarray(std, dtype=np.float32))

    def preprocess(self, batch):
        """Numpy image batch -> detector-ready Tensor."""
        if self.adapter is not None:
            return self.adapter(ad.Tensor(batch.astype(np.float32)))
        normed = (batch - self.input_mean[:, None, None]) / self.input_std[:, None, None]
        return ad.Tensor(normed.astype(np.float32))

    def forward(self, batch):
        return self.detector(self.preprocess(batch))

    def module_param_count(self):
        """Parameters in the preprocessing stage alone (0 for fixed stages)."""
        return self.adapter.count_params() if self.adapter is not None else 0


def build_model(config, rng=None):
    if rng is None:
        init_seed = np.random.SeedSequence([int(config.seed), 0])
        rng = np.random.default_rng(init_seed)
    return DetectionModel(config, rng)


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    checkpoint_dir: str
    log_path: str
    final_loss: float
    epochs_run: int
    wall_clock: float
    history: list


def train(config, out_dir):
    """Train one pipeline; writes checkpoint/, train_log.jsonl, config.json."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(config.as_dict(), fh, indent=1, sort_keys=True)

    data = load_split(config.dataset_dir, "train")
    images = representation(data, config.pipeline)
    dcfg = det.DetectorConfig(config.image_size, config.classes)
    if images.shape[-2:] != config.image_size:
        raise ValueError(f"dataset images are {images.shape[-2:]}, config expects {config.image_size}")

    model = build_model(config)
    if model.adapter is None:
        model.set_input_stats(*channel_stats(images))
    elif config.output_norm == "fixed":
        model.adapter.out_norm.set_fixed_stats(*_init_output_stats(model, images, config.batch_size))

    opt_cfg = config.optimizer
    optimizer = _make_sgd(model, opt_cfg)
    order_rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 1]))

    log_path = os.path.join(out_dir, "train_log.jsonl")
    history = []
    start = time.perf_counter()
    final_loss = float("nan")
    global_step = 0
    with open(log_path, "w") as log:
        for epoch in range(config.epochs):
            optimizer.set_epoch(epoch)
            model.train()
            order = order_rng.permutation(len(data))
            losses = []
            for step, lo in enumerate(range(0, len(order), config.batch_size)):
                idx = order[lo:lo + config.batch_size]
                batch = images[idx]
                truths = [data.truths[i] for i in idx]
                if config.augment:
                    batch, truths = augment_batch(batch, truths, order_rng, config.resize_jitter)
                targets = det.assign_targets(truths, dcfg)
                parts = det.detection_loss_parts(model(batch), targets)
                loss = parts["objectness"] + parts["classification"] + parts["box"]
                value = float(loss.data)
                if not np.isfinite(value):
                    raise TrainingDivergence(
                        f"non-finite loss {value} at epoch {epoch} step {step} "
                        f"(global step {global_step})")
                model.zero_grad()
                loss.backward()
                optimizer.step()
                losses.append(value)
                record = {"kind": "step", "epoch": epoch, "step": step,
                          "global_step": global_step, "loss": value,
                          "lr": optimizer.effective_lr()}
                record.update({k: float(v.data) for k, v in parts.items()})
                log.write(json.dumps(record) + "\n")
                global_step += 1
                final_loss = value
            summary = {"kind": "epoch", "epoch": epoch,
                       "mean_loss": float(np.mean(losses)),
                       "lr": optimizer.effective_lr()}
            if config.eval_every and (epoch + 1) % config.eval_every == 0:
                result = evaluate_model(model, config, split="val")
                summary["map"] = result.map
                summary["map50"] = result.map50
            history.append(summary)
            log.write(json.dumps(summary) + "\n")

    ckpt_dir = os.path.join(out_dir, "checkpoint")
    ckpt.save_module(ckpt_dir, model, extra={"epochs_completed": np.float32(config.epochs)})
    return TrainResult(ckpt_dir, log_path, final_loss, config.epochs,
                       time.perf_counter() - start, history)


def _init_output_stats(model, images, batch_size):
    """Per-channel statistics of the initial adapter's pre-norm outputs.

    The fixed-normalization ablation freezes these for the whole run, unlike
    batch norm whose statistics track the shifting output distribution.
    """
    model.eval()
    total = np.zeros(3, dtype=np.float64)
    total_sq = np.zeros(3, dtype=np.float64)
    count = 0
    for lo in range(0, len(images), batch_size):
        batch = images[lo:lo + batch_size].astype(np.float32)
        out = model.adapter.pre_norm(ad.Tensor(batch)).data.astype(np.float64)
        total += out.sum(axis=(0, 2, 3))
        total_sq += (out ** 2).sum(axis=(0, 2, 3))
        count += out.shape[0] * out.shape[2] * out.shape[3]
    mean = total / count
    std = np.sqrt(np.maximum(total_sq / count - mean ** 2, 0.0))
    return mean, np.maximum(std, 1e-6)


def _make_sgd(model, opt_cfg):
    return SGD(model.parameters(), lr=opt_cfg.lr, momentum=opt_cfg.momentum,
               weight_decay=opt_cfg.weight_decay, milestones=opt_cfg.milestones,
               decay_factor=opt_cfg.decay_factor)


# -------------------------------------------------------------- evaluation


def predict_split(model, config, data):
    """Eval-mode decoded predictions for every image of a loaded split."""
    model.eval()
    images = representation(data, config.pipeline)
    dcfg = det.DetectorConfig(config.image_size, config.classes)
    preds = []
    for lo in range(0, len(data), config.batch_size):
        out = model(images[lo:lo + config.batch_size])
        preds.extend(det.decode(out, dcfg, score_threshold=config.eval_score_threshold,
                                nms_iou=config.nms_iou))
    return preds


def evaluate_model(model, config, split="val", data=None):
    if data is None:
        data = load_split(config.dataset_dir, split)
    preds = predict_split(model, config, data)
    return em.evaluate_detections(data.truths, preds, config.iou_thresholds)


def evaluate_checkpoint(config, checkpoint_dir, split="val"):
    """Rebuild the model skeleton, restore weights, evaluate one split."""
    model = build_model(config)
    ckpt.load_into_module(checkpoint_dir, model)
    return evaluate_model(model, config, split=split)


# -------------------------------------------------------------- comparison


def compare_pipelines(configs, seeds, out_dir, split="val"):
    """Train each labeled config across seeds; report per-seed rows + medians.

    ``configs`` maps a report label to an ExperimentConfig; each is retrained
    with every seed. Writes comparison.json and comparison.csv under out_dir
    and returns the report dict.
    """
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for label, base_config in configs.items():
        for seed in seeds:
            config = replace(base_config, seed=int(seed),
                             optimizer=replace(base_config.optimizer))
            run_dir = os.path.join(out_dir, label, f"seed_{seed}")
            result = train(config, run_dir)
            model = build_model(config)
            ckpt.load_into_module(result.checkpoint_dir, model)
            eval_result = evaluate_model(model, config, split=split)
            rows.append({
                "pipeline": label, "seed": int(seed),
                "map": eval_result.map, "map50": eval_result.map50,
                "module_params": model.module_param_count(),
                "total_params": model.count_params(),
                "wall_clock": round(result.wall_clock, 3),
                "final_loss": result.final_loss,
            })
    medians = []
    for label in configs:
        mine = [r for r in rows if r["pipeline"] == label]
        medians.append({
            "pipeline": label, "seed": "median",
            "map": float(np.median([r["map"] for r in mine])),
            "map50": float(np.median([r["map50"] for r in mine])),
            "module_params": mine[0]["module_params"],
            "total_params": mine[0]["total_params"],
            "wall_clock": float(np.median([r["wall_clock"] for r in mine])),
            "final_loss": float(np.median([r["final_loss"] for r in mine])),
        })
    report = {"rows": rows, "medians": medians, "seeds": [int(s) for s in seeds],
              "split": split}
    with open(os.path.join(out_dir, "comparison.json"), "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
    columns = ["pipeline", "seed", "map", "map50", "module_params",
               "total_params", "wall_clock", "final_loss"]
    with open(os.path.join(out_dir, "comparison.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows + medians:
            writer.writerow(row)
    return report
