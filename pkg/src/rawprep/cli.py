"""Command-line surface: dataset generation, training, evaluation, studies.

One executable, seven subcommands. Every command reads a JSON config file,
applies repeatable dotted-key ``--override`` edits, confines all writes to
``--out``, and finishes by recording a ``run.meta`` file there with the fully
resolved config, the effective seed, and a sha256 of every artifact it
produced. A run is reproducible from its run.meta alone: feed the embedded
config back in and the same bytes come out.

Exit codes: 0 success, 2 for usage and config mistakes (missing config file,
unknown keys, invalid values), 1 for failures during execution. Failures
print exactly one line on stderr of the form ``error: <category>: <message>``
with category ``usage`` or ``runtime``.
"""

import argparse
import hashlib
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import analysis
from . import scenes
from . import training as tr

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(ValueError):
    """Bad invocation or config; exits EXIT_USAGE instead of EXIT_RUNTIME."""


def _require(condition, message):
    if not condition:
        raise UsageError(message)


# ------------------------------------------------------- config plumbing


_GEN_DEFAULTS = {
    "seed": 0,
    "counts": {"train": 4},
    "size": 128,
    "corruption": "none",
    "vary_lighting": True,
    "exposure_range": [0.4, 1.0],
    "illuminant_range": [0.7, 1.3],
}
_EVAL_DEFAULTS = {"run_dir": "", "split": "val", "dataset_dir": ""}
_COMPARE_DEFAULTS = {"pipelines": {}, "seeds": [0, 1, 2], "split": "val"}
_SHAPLEY_DEFAULTS = {"full": {}, "base": {},
                     "components": list(analysis.DEFAULT_COMPONENTS), "split": "val"}
_HIST_DEFAULTS = {"run_dir": "", "split": "val", "bins": 256}
_CORRUPT_DEFAULTS = {"dataset_dir": "", "corruption": "", "splits": None}


def _load_json(path):
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path!r}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path!r} is not valid JSON: {exc}") from exc
    _require(isinstance(payload, dict), f"config {path!r} must hold a JSON object")
    return payload


def _merge(defaults, loaded, label):
    unknown = sorted(set(loaded) - set(defaults))
    _require(not unknown, f"unknown {label} config keys {unknown}")
    merged = json.loads(json.dumps(defaults))
    merged.update(loaded)
    return merged


def _overridden(merged, overrides):
    try:
        return tr.apply_overrides(merged, overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _experiment_dict(payload, label):
    """Normalize a partial experiment config to its complete dict form."""
    try:
        return tr.ExperimentConfig.from_dict(payload).as_dict()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{label}: {exc}") from exc


def _experiment_config(payload, label):
    try:
        return tr.ExperimentConfig.from_dict(payload)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{label}: {exc}") from exc


def _run_experiment_config(run_dir, label):
    """The experiment config a train run recorded next to its checkpoint."""
    _require(bool(run_dir), f"{label} config needs run_dir (a train output directory)")
    config = _experiment_config(_load_json(os.path.join(run_dir, "config.json")), label)
    checkpoint_dir = os.path.join(run_dir, "checkpoint")
    _require(os.path.isdir(checkpoint_dir), f"no checkpoint directory under {run_dir!r}")
    return config, checkpoint_dir


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------- run records


_RUN_META_FORMAT = "rawprep-run-v1"


def _artifact_hashes(out_dir):
    """sha256 of every produced file, keyed by path relative to out_dir."""
    hashes = {}
    for root, _, files in os.walk(out_dir):
        for name in files:
            rel = os.path.relpath(os.path.join(root, name), out_dir)
            parts = rel.split(os.sep)
            if rel == "run.meta" or any(p.startswith(".") for p in parts):
                continue
            with open(os.path.join(root, name), "rb") as fh:
                hashes[rel] = "sha256:" + hashlib.sha256(fh.read()).hexdigest()
    return dict(sorted(hashes.items()))


def _write_run_meta(out_dir, command, resolved, seed_summary, overrides):
    meta = {
        "format": _RUN_META_FORMAT,
        "command": command,
        "config": resolved,
        "seed": seed_summary,
        "overrides": list(overrides),
        "artifacts": _artifact_hashes(out_dir),
    }
    _write_json(os.path.join(out_dir, "run.meta"), meta)


# ------------------------------------------------------------- commands


def _probe_scene(resolved):
    """Run SceneSpec's domain validation on the corners of the gen ranges."""
    for name in ("exposure_range", "illuminant_range"):
        rng = resolved[name]
        _require(isinstance(rng, list) and len(rng) == 2,
                 f"{name} must be a two-element [lo, hi] list")
    try:
        for exposure in resolved["exposure_range"]:
            for gain in resolved["illuminant_range"]:
                scenes.SceneSpec(seed=0, height=resolved["size"], width=resolved["size"],
                                 corruption=resolved["corruption"],
                                 exposure=float(exposure), illuminant=(float(gain),) * 3)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _build_gen(loaded, args):
    merged = _merge(_GEN_DEFAULTS, loaded, "gen")
    if args.seed is not None:
        merged["seed"] = args.seed
    resolved = _overridden(merged, args.override)
    _require(isinstance(resolved["seed"], int), "seed must be an integer")
    counts = resolved["counts"]
    _require(isinstance(counts, dict) and counts,
             'gen config needs a non-empty counts mapping, e.g. {"train": 4}')
    for split, n in counts.items():
        _require(isinstance(n, int) and n > 0,
                 f"counts[{split!r}] must be a positive integer, got {n!r}")
    _probe_scene(resolved)

    def runner(out_dir):
        specs = scenes.make_dataset_specs(
            resolved["seed"], counts, corruption=resolved["corruption"],
            size=resolved["size"], vary_lighting=resolved["vary_lighting"],
            exposure_range=tuple(resolved["exposure_range"]),
            illuminant_range=tuple(resolved["illuminant_range"]))
        scenes.write_dataset(specs, out_dir)
        if args.plots:
            _plot_dataset_preview(out_dir)

    return resolved, runner, resolved["seed"]


def _build_train(loaded, args):
    base = _experiment_dict(loaded, "train")
    if args.seed is not None:
        base["seed"] = args.seed
    resolved = _overridden(base, args.override)
    config = _experiment_config(resolved, "train")
    _require(isinstance(config.seed, int), "seed must be an integer")
    _require(bool(config.dataset_dir), "train config needs dataset_dir")

    def runner(out_dir):
        result = tr.train(config, out_dir)
        eval_result = tr.evaluate_checkpoint(config, result.checkpoint_dir, split="val")
        # append the final score to the step log so a later eval run on this
        # checkpoint can be checked against it
        with open(result.log_path, "a") as fh:
            fh.write(json.dumps({"kind": "final_eval", "split": "val",
                                 "map": eval_result.map, "map50": eval_result.map50}) + "\n")
        _write_json(os.path.join(out_dir, "metrics.json"),
                    {"epochs": result.epochs_run, "final_loss": result.final_loss,
                     "map": eval_result.map, "map50": eval_result.map50, "split": "val"})

    return resolved, runner, resolved["seed"]


def _build_eval(loaded, args):
    _require(args.seed is None, "--seed is not used by the eval command")
    merged = _merge(_EVAL_DEFAULTS, loaded, "eval")
    resolved = _overridden(merged, args.override)
    config, checkpoint_dir = _run_experiment_config(resolved["run_dir"], "eval")
    if resolved["dataset_dir"]:
        # score the trained checkpoint on another dataset, e.g. a corrupted
        # regeneration of the validation split
        config = replace(config, dataset_dir=resolved["dataset_dir"],
                         optimizer=replace(config.optimizer))
    split = resolved["split"]

    def runner(out_dir):
        result = tr.evaluate_checkpoint(config, checkpoint_dir, split=split)
        _write_json(os.path.join(out_dir, "metrics.json"),
                    {"map": result.map, "map50": result.map50, "split": split,
                     "run_dir": resolved["run_dir"],
                     "dataset_dir": config.dataset_dir})

    return resolved, runner, None


def _build_compare(loaded, args):
    merged = _merge(_COMPARE_DEFAULTS, loaded, "compare")
    pipelines = merged["pipelines"]
    _require(isinstance(pipelines, dict) and pipelines,
             "compare config needs a non-empty pipelines mapping of label to experiment config")
    merged["pipelines"] = {label: _experiment_dict(cfg, f"pipelines.{label}")
                           for label, cfg in pipelines.items()}
    if args.seed is not None:
        merged["seeds"] = [args.seed]
    resolved = _overridden(merged, args.override)
    seeds = resolved["seeds"]
    _require(isinstance(seeds, list) and seeds and all(isinstance(s, int) for s in seeds),
             "seeds must be a non-empty list of integers")
    configs = {label: _experiment_config(cfg, f"pipelines.{label}")
               for label, cfg in resolved["pipelines"].items()}
    for label, cfg in configs.items():
        _require(bool(cfg.dataset_dir), f"pipelines.{label} needs dataset_dir")

    def runner(out_dir):
        tr.compare_pipelines(configs, seeds, out_dir, split=resolved["split"])

    return resolved, runner, seeds


def _build_shapley(loaded, args):
    merged = _merge(_SHAPLEY_DEFAULTS, loaded, "shapley")
    for key in ("full", "base"):
        _require(isinstance(merged[key], dict) and merged[key],
                 f"shapley config needs a {key} experiment config")
        merged[key] = _experiment_dict(merged[key], key)
    if args.seed is not None:
        merged["full"]["seed"] = args.seed
        merged["base"]["seed"] = args.seed
    resolved = _overridden(merged, args.override)
    full = _experiment_config(resolved["full"], "full")
    base = _experiment_config(resolved["base"], "base")
    for label, cfg in (("full", full), ("base", base)):
        _require(bool(cfg.dataset_dir), f"{label} config needs dataset_dir")
    components = resolved["components"]
    _require(isinstance(components, list) and components,
             "components must be a non-empty list")
    for component in components:
        _require(component in ("fusion", "normalization")
                 or component in full.enabled_functions,
                 f"component {component!r} is not removable from the full config")

    def runner(out_dir):
        analysis.run_ablation_study(full, base, out_dir, components=tuple(components),
                                    split=resolved["split"], plots=args.plots)

    return resolved, runner, {"base": base.seed, "full": full.seed}


def _build_hist(loaded, args):
    _require(args.seed is None, "--seed is not used by the hist command")
    merged = _merge(_HIST_DEFAULTS, loaded, "hist")
    resolved = _overridden(merged, args.override)
    config, checkpoint_dir = _run_experiment_config(resolved["run_dir"], "hist")
    bins = resolved["bins"]
    _require(isinstance(bins, int) and bins >= 2, "bins must be an integer >= 2")

    def runner(out_dir):
        analysis.histogram_study(config, checkpoint_dir, out_dir,
                                 split=resolved["split"], bins=bins, plots=args.plots)

    return resolved, runner, None


def _build_corrupt(loaded, args):
    _require(args.seed is None,
             "--seed is not used by the corrupt command; frame seeds come from the manifest")
    merged = _merge(_CORRUPT_DEFAULTS, loaded, "corrupt")
    resolved = _overridden(merged, args.override)
    _require(bool(resolved["dataset_dir"]), "corrupt config needs dataset_dir")
    _require(resolved["corruption"] in scenes.CORRUPTIONS,
             f"unknown corruption {resolved['corruption']!r}; choose from {scenes.CORRUPTIONS}")
    try:
        manifest = scenes.read_manifest(resolved["dataset_dir"])
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read dataset manifest: {exc}") from exc
    splits = resolved["splits"]
    if splits is not None:
        _require(isinstance(splits, list) and splits, "splits must be null or a non-empty list")
        missing = sorted(set(splits) - set(manifest["splits"]))
        _require(not missing, f"dataset has no splits {missing}")

    def runner(out_dir):
        # same per-frame seeds, so geometry and ground truth carry over; only
        # the corruption stage of each regenerated frame changes
        specs = {
            split: [scenes.SceneSpec.from_dict({**manifest["specs"][fid],
                                                "corruption": resolved["corruption"]})
                    for fid in ids]
            for split, ids in manifest["splits"].items()
            if splits is None or split in splits
        }
        scenes.write_dataset(specs, out_dir)

    return resolved, runner, None


def _plot_dataset_preview(dataset_dir):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib import patches

    manifest = scenes.read_manifest(dataset_dir)
    split = "train" if "train" in manifest["splits"] else sorted(manifest["splits"])[0]
    data = tr.load_split(dataset_dir, split)
    n = min(8, len(data))
    fig, axes = plt.subplots(1, n, figsize=(2.2 * n, 2.6))
    for i, ax in enumerate(np.atleast_1d(axes)):
        ax.imshow(np.clip(data.srgb[i].transpose(1, 2, 0), 0.0, 1.0))
        for box in data.truths[i]:
            ax.add_patch(patches.Rectangle((box.x, box.y), box.w, box.h,
                                           fill=False, edgecolor="yellow", linewidth=1.0))
        ax.set_title(data.frame_ids[i], fontsize=7)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(os.path.join(dataset_dir, "dataset_preview.png"), dpi=110)
    plt.close(fig)


_BUILDERS = {
    "gen": _build_gen,
    "train": _build_train,
    "eval": _build_eval,
    "compare": _build_compare,
    "shapley": _build_shapley,
    "hist": _build_hist,
    "corrupt": _build_corrupt,
}

_COMMAND_HELP = {
    "gen": "render a synthetic raw detection dataset from a seed",
    "train": "train one pipeline and record checkpoint, log, and final score",
    "eval": "score a finished train run's checkpoint on one split",
    "compare": "train several pipelines across seeds and tabulate medians",
    "shapley": "retrain with components removed and attribute the score gain",
    "hist": "compare value distributions of raw, classic ISP, and adapter",
    "corrupt": "regenerate a dataset with a different corruption, same scenes",
}


# ------------------------------------------------------------ entry point


class _Parser(argparse.ArgumentParser):
    """Raises instead of printing multi-line usage, to keep errors one line."""

    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="rawprep", description=__doc__.splitlines()[0])
    subparsers = parser.add_subparsers(dest="command", required=True,
                                       metavar="{" + ",".join(_BUILDERS) + "}")
    for name, builder in _BUILDERS.items():
        sub = subparsers.add_parser(name, help=_COMMAND_HELP[name],
                                    description=_COMMAND_HELP[name])
        sub.add_argument("--config", help="path to a JSON config file")
        sub.add_argument("--seed", type=int, default=None,
                         help="seed override; rejected by commands that use none")
        sub.add_argument("--out", help="directory receiving every output and run.meta")
        sub.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                         help="dotted-key config edit, repeatable (e.g. optimizer.lr=0.01)")
        sub.add_argument("--plots", action="store_true",
                         help="also write PNG figures where the command has any")
    return parser


def _fail(category, exc):
    message = " ".join(str(exc).split()) or exc.__class__.__name__
    print(f"error: {category}: {message}", file=sys.stderr)
    return EXIT_USAGE if category == "usage" else EXIT_RUNTIME


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help; argparse exits itself
        return int(exc.code or 0)
    except UsageError as exc:
        return _fail("usage", exc)

    try:
        _require(bool(args.config), "missing --config (path to a JSON config file)")
        _require(bool(args.out), "missing --out (directory for all outputs)")
        loaded = _load_json(args.config)
        resolved, runner, seed_summary = _BUILDERS[args.command](loaded, args)
    except UsageError as exc:
        return _fail("usage", exc)
    except Exception as exc:  # unexpected resolution failure
        return _fail("runtime", exc)

    try:
        out_dir = os.path.abspath(args.out)
        os.makedirs(out_dir, exist_ok=True)
        if args.plots:
            # keep matplotlib's cache inside --out; dotted paths are not hashed
            os.environ.setdefault("MPLCONFIGDIR", os.path.join(out_dir, ".mpl"))
        runner(out_dir)
        _write_run_meta(out_dir, args.command, resolved, seed_summary, args.override)
    except Exception as exc:
        return _fail("runtime", exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
