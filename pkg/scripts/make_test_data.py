"""Regenerate the fixtures under tests/data.

regression_hr.png   32 x 32 synthetic RGB image (seeded), the bicubic regression input
regression.json     SHA-256 of its x2 LR and bicubic-SR bytes plus Y-PSNR/SSIM (shave 2)
overfit_hr.png      96 x 96 crop of a scikit-image sample used by the overfit checks
holdout_hr.png      96 x 240 crop of the same sample, tiled into 8 train and 2 test crops

Run from the repository root:  python scripts/make_test_data.py
"""

import argparse
import hashlib
import json
from pathlib import Path

import numpy as np

from mma import metrics

DATA = Path(__file__).resolve().parents[1] / "tests" / "data"
# skimage.data image name, top row, left column, height, width
OVERFIT_SOURCE = ("text", 0, 144, 96, 96)
HOLDOUT_SOURCE = ("text", 0, 0, 96, 240)


def regression_image(seed: int = 20240501) -> np.ndarray:
    """Smooth ramps, a hard-edged disc and mild noise, so every kernel tap matters."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:32, 0:32] / 31.0
    disc = ((yy - 0.55) ** 2 + (xx - 0.4) ** 2 < 0.08).astype(np.float64)
    r = 0.2 + 0.6 * xx + 0.15 * disc
    g = 0.3 + 0.4 * np.sin(3.0 * yy) * np.cos(2.0 * xx) + 0.2 * disc
    b = 0.7 - 0.5 * yy * xx
    img = np.stack([r, g, b], axis=-1) + 0.04 * rng.standard_normal((32, 32, 3))
    return metrics.quantize(img)


def bicubic_record(hr_u8: np.ndarray, scale: int = 2) -> dict:
    hr = metrics.PlanarImage(hr_u8 / 255.0)
    lr = metrics.degrade(hr, scale)
    sr = metrics.bicubic_resize(lr, hr.height, hr.width, round8=True)
    return {
        "scale": scale,
        "shave": scale,
        "lr_sha256": hashlib.sha256(lr.to_uint8().tobytes()).hexdigest(),
        "sr_sha256": hashlib.sha256(sr.to_uint8().tobytes()).hexdigest(),
        "psnr_y": metrics.psnr_y(sr, hr, scale),
        "ssim_y": metrics.ssim_y(sr, hr, scale),
    }


def sample_crop(source) -> np.ndarray:
    import skimage.data

    name, top, left, h, w = source
    src = getattr(skimage.data, name)()
    if src.ndim == 2:
        src = np.stack([src] * 3, axis=-1)
    return np.ascontiguousarray(src[top : top + h, left : left + w, :3])


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, default=DATA)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    hr = regression_image()
    metrics.write_png(hr, args.out / "regression_hr.png")
    rec = bicubic_record(hr)
    (args.out / "regression.json").write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")
    metrics.write_png(sample_crop(OVERFIT_SOURCE), args.out / "overfit_hr.png")
    metrics.write_png(sample_crop(HOLDOUT_SOURCE), args.out / "holdout_hr.png")
    print(json.dumps(rec, indent=2))


if __name__ == "__main__":
    main()
