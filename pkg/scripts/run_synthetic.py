"""Synthetic corpus → features → k-fold training of one variant, through the CLI.

    python3 scripts/run_synthetic.py --out runs/synthetic --variant dual --epochs 6

Also prints the nearest-centroid accuracy on the same folds, the easiness
bound for the synthetic task.
"""

import argparse
import sys
import time
from pathlib import Path

from dslstm.cli import main
from dslstm.dataset_io import read_features
from dslstm.experiments import nearest_centroid_accuracy
from dslstm.train import make_folds

p = argparse.ArgumentParser()
p.add_argument("--out", default="runs/synthetic")
p.add_argument("--variant", default="dual")
p.add_argument("--per-class", type=int, default=50)
p.add_argument("--folds", type=int, default=5)
p.add_argument("--epochs", type=int, default=6)
p.add_argument("--seed", type=int, default=0)
p.add_argument("--jobs", type=int, default=1)
args = p.parse_args()

out = Path(args.out)
t0 = time.time()
steps = [
    ["synth", "--out", str(out / "corpus"), "--per-class", str(args.per_class), "--seed", "7"],
    ["preprocess", "--manifest", str(out / "corpus" / "manifest.csv"), "--out", str(out / "features.dsl"), "--jobs", str(args.jobs)],
    ["train", "--archive", str(out / "features.dsl"), "--variant", args.variant, "--folds", str(args.folds),
     "--epochs", str(args.epochs), "--seed", str(args.seed), "--jobs", str(args.jobs), "--out", str(out / args.variant)],
]
for argv in steps:
    rc = main(argv)
    if rc:
        sys.exit(rc)

recs = read_features(out / "features.dsl")
plan = make_folds([r.utterance_id for r in recs], [r.label for r in recs], args.folds, seed=args.seed)
print(f"nearest-centroid accuracy: {nearest_centroid_accuracy(recs, plan):.3f}")
print(f"elapsed {time.time() - t0:.0f}s")
