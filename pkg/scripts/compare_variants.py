"""Mean UA of Base2, Base3, DS_only and DualLevel on small synthetic corpora.

    python3 scripts/compare_variants.py --seeds 0 1 2 --epochs 8
"""

import argparse
import logging
import time

import numpy as np

from dslstm.experiments import ComparisonProtocol, compare_variants
from dslstm.synth import SyntheticSpec
from dslstm.train import TrainConfig

p = argparse.ArgumentParser()
p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
p.add_argument("--epochs", type=int, default=8)
p.add_argument("--per-class", type=int, default=20)
p.add_argument("--variants", nargs="+", default=["base2", "base3", "ds_only", "dual"])
args = p.parse_args()
logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

proto = ComparisonProtocol(
    variants=tuple(args.variants),
    seeds=tuple(args.seeds),
    corpus=SyntheticSpec(per_class=args.per_class, duration=(1.0, 2.0)),
    train=TrainConfig(epochs=args.epochs, patience=args.epochs),
)
t0 = time.time()
res = compare_variants(proto)
print(f"{'variant':<10} {'mean UA':>8}  per seed")
for v, uas in res.items():
    print(f"{v:<10} {100 * np.mean(uas):8.2f}  " + " ".join(f"{100 * u:.1f}" for u in uas))
print(f"elapsed {time.time() - t0:.0f}s")
