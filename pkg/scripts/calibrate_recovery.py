"""Record the synthetic-recovery calibration run used to freeze the acceptance thresholds.

Usage: python3 scripts/calibrate_recovery.py [--n 100] [--seed 0] [--out calibration/recovery.json]
"""

import argparse
import json
import platform
import time

import numpy as np

from posetemplate.evaluate import sample_errors, score
from posetemplate.fit import fit_pose, synthetic_fit_config
from posetemplate.synth import PoseRanges, generate_dataset
from posetemplate.template import canonical_human_template


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--resolution", type=int, default=128)
    ap.add_argument("--out", default="calibration/recovery.json")
    args = ap.parse_args()

    template = canonical_human_template()
    config = synthetic_fit_config(resolution=args.resolution)
    start = time.perf_counter()
    dataset = generate_dataset(template, args.n, PoseRanges(), args.resolution, seed=args.seed)
    preds, truth, finals = [], [], []
    for sample, maps in dataset:
        result = fit_pose(template, maps, config)
        preds.append(result.keypoints)
        truth.append(sample.keypoints_gt)
        finals.append(result.final_loss.total)
    elapsed = time.perf_counter() - start

    report = score(preds, truth)
    errors = sample_errors(preds, truth)
    record = {
        "n": args.n,
        "seed": args.seed,
        "resolution": args.resolution,
        "fit_config": config.to_dict(),
        "ranges": PoseRanges().to_dict(),
        "overall_percent": report.overall,
        "per_group_percent": report.per_group,
        "fraction_samples_within_3_percent": float(np.mean(errors <= 3.0)),
        "fraction_samples_within_2_percent": float(np.mean(errors <= 2.0)),
        "per_sample_percent": [round(float(e), 4) for e in errors],
        "mean_final_total_loss": float(np.mean(finals)),
        "seconds": round(elapsed, 1),
        "machine": f"{platform.machine()} / {platform.python_implementation()} {platform.python_version()}",
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2)
        fh.write("\n")
    print(report.to_text(), end="")
    print(f"within 3%: {record['fraction_samples_within_3_percent']:.2f}  time: {elapsed:.0f} s")


if __name__ == "__main__":
    main()
