#!/usr/bin/env python3
"""Corruption robustness: score trained pipelines on degraded validation sets.

Expects a finished run of run_comparison.py. Regenerates the validation split
under each corruption (three noise severities plus fog, rain, snow) with the
same scene seeds, then scores every trained checkpoint on every corrupted
set, reporting median mAP and the drop from clean per pipeline.
"""

import argparse
import glob
import json
import os
import statistics
import sys

from rawprep import cli

CORRUPTIONS = ("noise_mild", "noise_medium", "noise_strong", "fog", "rain", "snow")
PIPELINES = ("ram", "raw", "srgb")


def run(args):
    code = cli.main([str(a) for a in args])
    if code != 0:
        sys.exit(code)


def write_json(path, payload):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
    return path


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--comparison", default="experiments/comparison",
                        help="root of a finished run_comparison.py invocation")
    parser.add_argument("--root", default="experiments/robustness")
    args = parser.parse_args()

    dataset_dir = os.path.join(args.comparison, "dataset")
    compare_dir = os.path.join(args.comparison, "compare")
    if not os.path.isdir(compare_dir):
        sys.exit(f"no comparison runs under {compare_dir!r}; run run_comparison.py first")

    for corruption in CORRUPTIONS:
        cfg = write_json(os.path.join(args.root, "configs", f"corrupt_{corruption}.json"),
                         {"dataset_dir": dataset_dir, "corruption": corruption,
                          "splits": ["val"]})
        run(["corrupt", "--config", cfg, "--out",
             os.path.join(args.root, f"val_{corruption}")])

    # per (pipeline, seed): clean score from the comparison report, then one
    # eval per corrupted regeneration of the same validation frames
    with open(os.path.join(compare_dir, "comparison.json")) as fh:
        comparison = json.load(fh)
    scores = {}
    for row in comparison["rows"]:
        if row["pipeline"] in PIPELINES:
            scores[(row["pipeline"], f"seed_{row['seed']}", "clean")] = row["map"]
    for pipeline in PIPELINES:
        run_dirs = sorted(glob.glob(os.path.join(compare_dir, pipeline, "seed_*")))
        if not run_dirs:
            sys.exit(f"no trained runs under {compare_dir}/{pipeline}")
        for run_dir in run_dirs:
            seed = os.path.basename(run_dir)
            for corruption in CORRUPTIONS:
                cfg = write_json(
                    os.path.join(args.root, "configs", f"eval_{pipeline}_{seed}_{corruption}.json"),
                    {"run_dir": run_dir,
                     "dataset_dir": os.path.join(args.root, f"val_{corruption}")})
                out = os.path.join(args.root, "evals", pipeline, seed, corruption)
                run(["eval", "--config", cfg, "--out", out])
                with open(os.path.join(out, "metrics.json")) as fh:
                    scores[(pipeline, seed, corruption)] = json.load(fh)["map"]
        print(f"evaluated {pipeline} across {len(run_dirs)} seeds", flush=True)

    conditions = ("clean",) + CORRUPTIONS
    medians = {}
    for pipeline in PIPELINES:
        medians[pipeline] = {}
        for cond in conditions:
            vals = [v for (p, _, c), v in scores.items() if p == pipeline and c == cond]
            medians[pipeline][cond] = statistics.median(vals)

    print(f"\nmedian mAP by condition:")
    header = f"{'pipeline':10s}" + "".join(f"{c:>14s}" for c in conditions)
    print(header)
    for pipeline in PIPELINES:
        row = f"{pipeline:10s}" + "".join(f"{medians[pipeline][c]:14.4f}" for c in conditions)
        print(row)
    print("\ndrop from clean (median mAP):")
    for pipeline in PIPELINES:
        clean = medians[pipeline]["clean"]
        drops = "".join(f"{clean - medians[pipeline][c]:14.4f}" for c in CORRUPTIONS)
        print(f"{pipeline:10s}{'':14s}{drops}")

    write_json(os.path.join(args.root, "robustness.json"),
               {"medians": medians,
                "scores": {"|".join(k): v for k, v in scores.items()}})
    print(f"\nreport: {os.path.join(args.root, 'robustness.json')}")


if __name__ == "__main__":
    main()
