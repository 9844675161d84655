"""Bicubic x2 baseline on a directory of HR PNGs (Set5 for the reference numbers).

Set5 is not bundled. Download the five HR images (baby, bird, butterfly, head,
woman) from any SR benchmark mirror, e.g. the archives distributed with the
EDSR or BasicSR repositories, and point this script or the acceptance suite at
them:

    python scripts/bicubic_anchor.py path/to/Set5
    MMA_SET5=path/to/Set5 pytest tests/test_acceptance.py -k bicubic

The published bicubic x2 average is 33.66 dB / 0.9299.
"""

import argparse
from pathlib import Path

import numpy as np

from mma import metrics


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("hr_dir", type=Path)
    ap.add_argument("--scale", type=int, default=2)
    args = ap.parse_args()

    rows = []
    for f in metrics.list_pngs(args.hr_dir):
        hr = metrics.modcrop(metrics.read_png(f), args.scale)
        lr = metrics.degrade(hr, args.scale)
        sr = metrics.bicubic_resize(lr, hr.height, hr.width, round8=True)
        p, s = metrics.evaluate_pair(sr, hr, args.scale)
        rows.append((f.stem, p, s))
    print(metrics.metrics_csv(rows), end="")
    print(f"mean,{np.mean([r[1] for r in rows]):.4f},{np.mean([r[2] for r in rows]):.4f}")


if __name__ == "__main__":
    main()
