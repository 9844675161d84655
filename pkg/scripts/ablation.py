"""Train the full model and both ablations on the crop holdout task.

The holdout image is tiled into 48 x 48 crops: 8 for training, 2 for testing.
Prints test Y-PSNR per variant and seed, then the means.

    python scripts/ablation.py --iters 600 --seeds 0 1 2
"""

import argparse
import time
from pathlib import Path

import numpy as np

from mma import metrics, toy

ROOT = Path(__file__).resolve().parents[1]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--image", type=Path, default=ROOT / "tests" / "data" / "holdout_hr.png")
    ap.add_argument("--iters", type=int, default=600)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()

    train_pairs, test_pairs = toy.holdout_split(metrics.read_png(args.image))
    bic = np.mean([toy.psnr(toy.bicubic_baseline(p), p.hr, 2) for p in test_pairs])
    print(f"bicubic test PSNR {bic:.3f} dB")
    scores = {name: [] for name in toy.ABLATIONS}
    for seed in args.seeds:
        for name in toy.ABLATIONS:
            t0 = time.perf_counter()
            m = toy.train_variant(name, train_pairs, toy.holdout_config(args.iters, seed))
            scores[name].append(toy.mean_psnr(m, test_pairs))
            print(f"seed {seed}  {name:6s} test {scores[name][-1]:.3f} dB  ({time.perf_counter() - t0:.0f} s)", flush=True)
    for name, vals in scores.items():
        print(f"mean   {name:6s} {np.mean(vals):.3f} dB")


if __name__ == "__main__":
    main()
