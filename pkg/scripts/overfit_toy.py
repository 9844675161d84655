"""Overfit the toy network on one image and compare with bicubic.

    python scripts/overfit_toy.py --image tests/data/overfit_hr.png --iters 2000

Optionally writes the config (usable with ``mma train --config``), the loss
trace and the trained checkpoint.
"""

import argparse
from pathlib import Path

import numpy as np

from mma import metrics, model as M, toy, train as T

ROOT = Path(__file__).resolve().parents[1]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--image", type=Path, default=ROOT / "tests" / "data" / "overfit_hr.png")
    ap.add_argument("--iters", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--write-config", type=Path, help="write the protocol as a train config JSON")
    ap.add_argument("--out", type=Path, help="checkpoint path; the loss CSV goes next to it")
    args = ap.parse_args()

    if args.write_config:
        toy.write_config(args.write_config, *toy.overfit_config(args.iters))
    r = toy.overfit(metrics.read_png(args.image), args.iters, args.seed)
    losses = [row[2] for row in r.result.trace]
    ma = T.moving_average(losses, min(200, len(losses)))
    print(f"final batch L1   {r.final_loss:.5f}")
    print(f"full-image L1    {r.l1:.5f}  (bicubic {r.bicubic_l1:.5f})")
    print(f"Y-PSNR           {r.psnr:.2f} dB  (bicubic {r.bicubic_psnr:.2f} dB, gain {r.gain:+.2f})")
    print(f"CPU time         {r.seconds:.0f} s")
    print("moving average   " + " ".join(f"{v:.4f}" for v in ma[:: max(1, len(ma) // 10)]))
    if args.out:
        M.save(r.result.model, args.out)
        args.out.with_suffix(".loss.csv").write_text(T.trace_csv(r.result.trace))
        print(f"wrote {args.out}")


if __name__ == "__main__":
    np.set_printoptions(precision=4)
    main()
