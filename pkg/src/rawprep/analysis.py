"""Attribution, ablation, and output-distribution studies.

Attribution distributes the full-vs-base score gain over components in
proportion to their leave-one-out drops, so the shares always sum exactly to
the measured gain. Ablations retrain from scratch with one component removed
rather than zeroing weights in a trained model; a removed component changes
what the remaining ones learn, and only retraining exposes that. The
histogram study compares per-channel value distributions of the raw and
classic-ISP representations against a trained adapter's output.
"""

import csv
import json
import os
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import checkpoints as ckpt
from . import isp_ops as isp
from . import training as tr

DEFAULT_COMPONENTS = isp.FUNCTION_ORDER + ("fusion", "normalization")


class UndefinedAttributionError(ValueError):
    """Raised when every leave-one-out drop cancels and shares are undefined."""


def leave_one_out_attribution(drops, full_score, base_score):
    """Split ``full_score - base_score`` over components by relative drop.

    ``drops`` maps component name to the score lost when only that component
    is removed. Shares are ``drop / sum(drops) * (full - base)``, so they sum
    to the full-vs-base gain by construction. A zero drop total leaves the
    split undefined and raises instead of fabricating shares.
    """
    if not drops:
        raise UndefinedAttributionError("no components to attribute over")
    total = float(sum(drops.values()))
    if total == 0.0:
        raise UndefinedAttributionError("leave-one-out drops sum to zero")
    gain = float(full_score) - float(base_score)
    return {name: float(drop) / total * gain for name, drop in drops.items()}


# ---------------------------------------------------------- ablation study


@dataclass
class AblationRow:
    component: str      # "full" for the unablated reference model
    map50: float
    map: float
    drop: float         # full map50 minus this row's map50 (0 for "full")


def _ablated_config(config, component):
    """Experiment config with one adapter component removed."""
    if component in isp.FUNCTION_ORDER:
        remaining = tuple(f for f in config.enabled_functions if f != component)
        if not remaining:
            raise ValueError("cannot ablate the last remaining ISP function")
        return replace(config, enabled_functions=remaining)
    if component == "fusion":
        return replace(config, fusion_mode="single")
    if component == "normalization":
        return replace(config, output_norm="fixed")
    raise ValueError(f"unknown component {component!r}")


def run_ablation_study(config, base_config, out_dir, components=DEFAULT_COMPONENTS,
                       split="val", plots=False):
    """Retrain with each component removed; write rows and attribution shares.

    ``config`` is the full learned-pipeline experiment; ``base_config`` is the
    reference without any learned module (usually the raw pipeline). Returns
    a report dict, also written to ``attribution.json``, with per-component
    scores, leave-one-out drops, and shares of the full-vs-base gain.
    """
    os.makedirs(out_dir, exist_ok=True)

    def train_and_score(cfg, label):
        result = tr.train(cfg, os.path.join(out_dir, label))
        return tr.evaluate_checkpoint(cfg, result.checkpoint_dir, split=split)

    full_eval = train_and_score(config, "full")
    base_eval = train_and_score(base_config, "base")
    rows = [AblationRow("full", full_eval.map50, full_eval.map, 0.0)]
    drops = {}
    for component in components:
        evald = train_and_score(_ablated_config(config, component), f"ablate_{component}")
        drop = full_eval.map50 - evald.map50
        drops[component] = drop
        rows.append(AblationRow(component, evald.map50, evald.map, drop))

    report = {
        "metric": "map50",
        "split": split,
        "full": {"map50": full_eval.map50, "map": full_eval.map},
        "base": {"map50": base_eval.map50, "map": base_eval.map},
        "rows": [vars(r) for r in rows],
        "drops": drops,
    }
    try:
        report["shares"] = leave_one_out_attribution(drops, full_eval.map50, base_eval.map50)
    except UndefinedAttributionError as exc:
        report["shares"] = None
        report["shares_error"] = str(exc)
    with open(os.path.join(out_dir, "attribution.json"), "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
    if plots:
        _plot_attribution(report, out_dir)
    return report


def _plot_attribution(report, out_dir):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    drops = report["drops"]
    shares = report["shares"] or {name: 0.0 for name in drops}
    names = list(drops)
    pos = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2, 3.2))
    ax.bar(pos - 0.2, [drops[n] for n in names], width=0.4, label="leave-one-out drop")
    ax.bar(pos + 0.2, [shares[n] for n in names], width=0.4, label="share of gain")
    ax.set_xticks(pos, names, rotation=20)
    ax.set_ylabel(report["metric"])
    ax.axhline(0.0, color="black", linewidth=0.6)
    ax.legend()
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "attribution.png"), dpi=120)
    plt.close(fig)


# --------------------------------------------------------- histogram study


@dataclass
class ChannelSummary:
    representation: str
    channel: str
    mean: float
    std: float
    skewness: float
    top_bin_fraction: float


def channel_histograms(images, bins=256, value_range=None):
    """Per-channel histograms of an (N, 3, H, W) array.

    Returns (counts, edges) with counts shaped (3, bins). The default range
    spans the array's own min and max so the top bin captures saturation.
    """
    x = np.asarray(images, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"expected (N, 3, H, W), got {x.shape}")
    if value_range is None:
        value_range = (float(x.min()), float(x.max()))
    counts = np.stack([np.histogram(x[:, c].ravel(), bins=bins, range=value_range)[0]
                       for c in range(3)])
    edges = np.histogram_bin_edges(x[:, 0].ravel(), bins=bins, range=value_range)
    return counts, edges


def summarize_channels(representation, images, bins=256):
    """Mean, std, skewness, and top-bin mass per channel."""
    counts, _ = channel_histograms(images, bins=bins)
    rows = []
    for c, name in enumerate(("R", "G", "B")):
        v = np.asarray(images, dtype=np.float64)[:, c].ravel()
        mu = v.mean()
        sd = v.std()
        skew = float(((v - mu) ** 3).mean() / sd ** 3) if sd > 0 else 0.0
        top = float(counts[c, -1] / max(counts[c].sum(), 1))
        rows.append(ChannelSummary(representation, name, float(mu), float(sd), skew, top))
    return rows


def adapter_outputs(model, images, batch_size=16):
    """Eval-mode adapter outputs over an image array, as one numpy array."""
    if model.adapter is None:
        raise ValueError("model has no learned preprocessing module")
    model.eval()
    outs = []
    for lo in range(0, len(images), batch_size):
        batch = images[lo:lo + batch_size].astype(np.float32)
        outs.append(model.adapter(ad.Tensor(batch)).data)
    return np.concatenate(outs, axis=0)


def histogram_study(config, checkpoint_dir, out_dir, split="val", bins=256, plots=False):
    """Compare raw, classic-ISP, and trained-adapter value distributions.

    Raw and classic-ISP images are scaled by their own maximum so shapes are
    comparable; the adapter output is left as the detector sees it. Writes
    ``histogram_summary.csv``, per-representation histogram CSVs, and
    optionally PNG plots. Returns the list of ChannelSummary rows.
    """
    os.makedirs(out_dir, exist_ok=True)
    data = tr.load_split(config.dataset_dir, split)
    model = tr.build_model(config)
    ckpt.load_into_module(checkpoint_dir, model)

    reps = {
        "raw": data.images / max(float(data.images.max()), 1e-12),
        "srgb": data.srgb / max(float(data.srgb.max()), 1e-12),
        "adapter": adapter_outputs(model, tr.representation(data, config.pipeline)),
    }
    summary = []
    for name, images in reps.items():
        summary.extend(summarize_channels(name, images, bins=bins))
        counts, edges = channel_histograms(images, bins=bins)
        with open(os.path.join(out_dir, f"hist_{name}.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_lo", "bin_hi", "count_r", "count_g", "count_b"])
            for i in range(bins):
                writer.writerow([edges[i], edges[i + 1], *counts[:, i].tolist()])

    with open(os.path.join(out_dir, "histogram_summary.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["representation", "channel", "mean", "std", "skewness",
                         "top_bin_fraction"])
        for row in summary:
            writer.writerow([row.representation, row.channel, row.mean, row.std,
                             row.skewness, row.top_bin_fraction])

    if plots:
        _plot_histograms(reps, out_dir, bins)
    return summary


def _plot_histograms(reps, out_dir, bins):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(reps), figsize=(5 * len(reps), 3.2))
    for ax, (name, images) in zip(np.atleast_1d(axes), reps.items()):
        counts, edges = channel_histograms(images, bins=bins)
        centers = 0.5 * (edges[:-1] + edges[1:])
        for c, (label, color) in enumerate((("R", "tab:red"), ("G", "tab:green"),
                                            ("B", "tab:blue"))):
            ax.plot(centers, counts[c], color=color, label=label, linewidth=1.0)
        ax.set_title(name)
        ax.set_yscale("log")
        ax.legend()
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "histograms.png"), dpi=120)
    plt.close(fig)
