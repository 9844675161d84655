"""LAM heatmaps and diffusion indices for the full model and the CNN ablation.

Trains both on the holdout task (or loads checkpoints) and attributes the same
centre patch of a test crop.

    python scripts/lam_demo.py --out-dir lam_out
"""

import argparse
from pathlib import Path

from mma import lam, metrics, model as M, toy

ROOT = Path(__file__).resolve().parents[1]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--image", type=Path, default=ROOT / "tests" / "data" / "holdout_hr.png")
    ap.add_argument("--iters", type=int, default=600)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=128)
    ap.add_argument("--out-dir", type=Path, default=Path("lam_out"))
    ap.add_argument("--checkpoints", type=Path, nargs=2, metavar=("FULL", "CNN"), help="skip training")
    args = ap.parse_args()

    train_pairs, test_pairs = toy.holdout_split(metrics.read_png(args.image))
    pair = test_pairs[0]
    h = pair.hr.shape[1]
    patch = ((h - h // 2) // 2, (h - h // 2) // 2, h // 2)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for i, name in enumerate(("full", "w_cnn")):
        if args.checkpoints:
            m = M.load(args.checkpoints[i])
        else:
            m = toy.train_variant(name, train_pairs, toy.holdout_config(args.iters, args.seed))
        a = lam.lam(m, pair.lr.astype("float32"), patch, steps=args.steps)
        lam.render_heatmap(a, args.out_dir / f"{name}.png")
        lam.write_record(a, args.out_dir / f"{name}.json")
        print(f"{name:6s} DI {a.di:.2f}  completeness error {a.completeness_error():.3%}")


if __name__ == "__main__":
    main()
