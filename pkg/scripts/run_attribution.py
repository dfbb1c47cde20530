#!/usr/bin/env python3
"""Component attribution and output-distribution study for the learned module.

Retrains the full parallel module, the raw baseline, and one ablation per
component (each ISP function, the fusion hourglass, the output norm), then
splits the full-vs-base mAP50 gain across components in proportion to their
leave-one-out drops. Follows up with the histogram study on the full run.

Default scale retrains eight models at 30 epochs each (about 50 minutes on
one CPU core); --quick shrinks everything to a minute-scale smoke run.
"""

import argparse
import json
import os
import sys

from rawprep import cli

COMPONENTS = ["gamma", "brightness", "ccm", "wb", "fusion", "normalization"]


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
    parser.add_argument("--root", default="experiments/attribution")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--dataset-seed", type=int, default=11)
    parser.add_argument("--quick", action="store_true",
                        help="48/16 frames and 4 epochs instead of 512/128 and 30")
    args = parser.parse_args()

    counts = {"train": 48, "val": 16} if args.quick else {"train": 512, "val": 128}
    epochs = 4 if args.quick else 30
    dataset_dir = os.path.join(args.root, "dataset")

    gen_cfg = write_json(os.path.join(args.root, "configs", "gen.json"), {
        "seed": args.dataset_seed,
        "counts": counts,
        "size": 128,
        "exposure_range": [0.05, 0.30],
        "illuminant_range": [0.6, 1.4],
    })
    run(["gen", "--config", gen_cfg, "--out", dataset_dir])

    common = {"dataset_dir": dataset_dir, "epochs": epochs, "batch_size": 16,
              "image_size": [64, 64], "seed": args.seed}
    shapley_cfg = write_json(os.path.join(args.root, "configs", "shapley.json"), {
        "full": {"pipeline": "ram", "rpe_input_size": [32, 32], **common},
        "base": {"pipeline": "raw", **common},
        "components": COMPONENTS,
    })
    shapley_dir = os.path.join(args.root, "shapley")
    run(["shapley", "--config", shapley_cfg, "--out", shapley_dir, "--plots"])

    with open(os.path.join(shapley_dir, "attribution.json")) as fh:
        report = json.load(fh)
    print(f"\nfull mAP50 {report['full']['map50']:.4f}  "
          f"base mAP50 {report['base']['map50']:.4f}")
    print(f"{'component':14s} {'mAP50':>8s} {'drop':>8s} {'share':>8s}")
    shares = report["shares"] or {}
    for row in report["rows"]:
        if row["component"] == "full":
            continue
        share = shares.get(row["component"])
        share_txt = f"{share:8.4f}" if share is not None else "     n/a"
        print(f"{row['component']:14s} {row['map50']:8.4f} {row['drop']:8.4f} {share_txt}")
    if report["shares"] is None:
        print("shares undefined:", report.get("shares_error", ""))

    hist_cfg = write_json(os.path.join(args.root, "configs", "hist.json"),
                          {"run_dir": os.path.join(shapley_dir, "full")})
    hist_dir = os.path.join(args.root, "hist")
    run(["hist", "--config", hist_cfg, "--out", hist_dir, "--plots"])
    print(f"\nhistogram study: {os.path.join(hist_dir, 'histogram_summary.csv')}")


if __name__ == "__main__":
    main()
