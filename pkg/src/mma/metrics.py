"""Bicubic degradation, YCbCr conversion and luminance PSNR/SSIM.

The resampler follows the MATLAB ``imresize`` conventions that SR benchmarks
are built on: Keys cubic with a = -0.5, the kernel stretched by 1/scale when
shrinking, mirrored borders, and the dimension with the stronger reduction
processed first. All metric arithmetic is float64.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.signal import correlate

from mma.fileio import atomic_write, atomic_write_text

RGB = "RGB"
YCBCR = "YCbCr"
INFINITE_PSNR = float("inf")


class MetricError(ValueError):
    pass


@dataclass
class PlanarImage:
    """H x W x 3 float64 image in [0, 1] with a color-space tag."""

    data: np.ndarray
    colorspace: str = RGB

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] != 3 or data.shape[0] < 1 or data.shape[1] < 1:
            raise MetricError(f"expected an H x W x 3 image, got shape {data.shape}")
        if self.colorspace not in (RGB, YCBCR):
            raise MetricError(f"unknown colorspace {self.colorspace!r}")
        self.data = np.clip(data, 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def to_uint8(self) -> np.ndarray:
        return quantize(self.data)


def quantize(x: np.ndarray) -> np.ndarray:
    """[0, 1] reals -> uint8 with round-half-away-from-zero, as MATLAB does."""
    return np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _as_rgb(img) -> np.ndarray:
    if isinstance(img, PlanarImage):
        if img.colorspace != RGB:
            raise MetricError("expected an RGB image")
        return img.data
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        arr = arr / 255.0
    return PlanarImage(arr).data


# -- colour ---------------------------------------------------------------

_YCBCR_MATRIX = np.array(
    [
        [65.481, 128.553, 24.966],
        [-37.797, -74.203, 112.0],
        [112.0, -93.786, -18.214],
    ]
)
_YCBCR_OFFSET = np.array([16.0, 128.0, 128.0])


def rgb_to_ycbcr(img: PlanarImage) -> PlanarImage:
    """Studio-swing BT.601; Y lands in [16/255, 235/255]."""
    if img.colorspace != RGB:
        raise MetricError(f"rgb_to_ycbcr needs an RGB image, got {img.colorspace}")
    out = (img.data @ _YCBCR_MATRIX.T + _YCBCR_OFFSET) / 255.0
    return PlanarImage(out, YCBCR)


def luminance(rgb: np.ndarray) -> np.ndarray:
    """Y channel of an H x W x 3 RGB array in [0, 1], without clamping."""
    return (rgb @ _YCBCR_MATRIX[0] + 16.0) / 255.0


# -- bicubic resampling -----------------------------------------------------


def cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic-convolution kernel with support [-2, 2]."""
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2.0) * ax3 - (a + 3.0) * ax2 + 1.0
    far = a * ax3 - 5.0 * a * ax2 + 8.0 * a * ax - 4.0 * a
    return np.where(ax <= 1.0, near, np.where(ax <= 2.0, far, 0.0))


def contributions(in_len: int, out_len: int, scale: float, antialias: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Per-output-sample source indices (0-based, mirrored) and normalized weights.

    Returns ``(indices, weights)``, both out_len x P.
    """
    width = 4.0
    if scale < 1.0 and antialias:
        width = width / scale

        def kernel(x):
            return scale * cubic(scale * x)

    else:
        kernel = cubic
    x = np.arange(1, out_len + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1.0 - 1.0 / scale)
    left = np.floor(u - width / 2.0)
    taps = int(np.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    weights = kernel(u[:, None] - idx)
    weights = weights / weights.sum(axis=1, keepdims=True)
    mirror = np.concatenate([np.arange(in_len), np.arange(in_len - 1, -1, -1)])
    idx = mirror[np.mod(idx.astype(np.int64) - 1, 2 * in_len)]
    keep = np.any(weights != 0.0, axis=0)
    return idx[:, keep], weights[:, keep]


def _resize_axis(x: np.ndarray, axis: int, out_len: int, scale: float, antialias: bool) -> np.ndarray:
    idx, w = contributions(x.shape[axis], out_len, scale, antialias)
    moved = np.moveaxis(x, axis, 0)
    out = np.einsum("op,op...->o...", w, moved[idx])
    return np.moveaxis(out, 0, axis)


def imresize(arr: np.ndarray, out_h: int, out_w: int, antialias: bool = True) -> np.ndarray:
    """Bicubic resize of an H x W (x C) array.

    uint8 input gives uint8 output (rounded, as MATLAB does); floats stay
    unrounded float64.
    """
    if out_h < 1 or out_w < 1:
        raise MetricError(f"target size must be positive, got {out_h} x {out_w}")
    is_uint8 = arr.dtype == np.uint8
    x = np.asarray(arr, dtype=np.float64)
    scales = (out_h / x.shape[0], out_w / x.shape[1])
    sizes = (out_h, out_w)
    for axis in np.argsort(scales, kind="stable"):
        x = _resize_axis(x, int(axis), sizes[axis], scales[axis], antialias)
    if is_uint8:
        return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)
    return x


def bicubic_resize(img: PlanarImage, out_h: int, out_w: int, antialias: bool = True, round8: bool = False) -> PlanarImage:
    """Resample a PlanarImage; ``round8`` applies the uint8 pipeline (quantize in and out)."""
    if round8:
        out = imresize(img.to_uint8(), out_h, out_w, antialias) / 255.0
    else:
        out = imresize(img.data, out_h, out_w, antialias)
    return PlanarImage(out, img.colorspace)


def degrade(img: PlanarImage, scale: int, round8: bool = True) -> PlanarImage:
    """Benchmark LR image: bicubic downscale by an integer factor (edges cropped to a multiple)."""
    h, w = (img.height // scale) * scale, (img.width // scale) * scale
    cropped = PlanarImage(img.data[:h, :w], img.colorspace)
    return bicubic_resize(cropped, h // scale, w // scale, round8=round8)


def modcrop(img: PlanarImage, scale: int) -> PlanarImage:
    h, w = (img.height // scale) * scale, (img.width // scale) * scale
    return PlanarImage(img.data[:h, :w], img.colorspace)


# -- metrics ----------------------------------------------------------------


def _prepare(sr, hr, shave: int, round8: bool) -> tuple[np.ndarray, np.ndarray]:
    a, b = _as_rgb(sr), _as_rgb(hr)
    if a.shape != b.shape:
        raise MetricError(f"image sizes differ: {a.shape[:2]} vs {b.shape[:2]}")
    if shave < 0:
        raise MetricError("shave must be non-negative")
    if round8:
        a = quantize(a) / 255.0
    ya, yb = luminance(a), luminance(b)
    if shave:
        ya, yb = ya[shave:-shave, shave:-shave], yb[shave:-shave, shave:-shave]
    if ya.size == 0:
        raise MetricError(f"shave {shave} leaves no pixels")
    return ya, yb


def psnr_y(sr, hr, shave: int = 0, round8: bool = True) -> float:
    """Luminance PSNR in dB at unit peak; identical inputs give ``INFINITE_PSNR``.

    ``round8`` quantizes ``sr`` to 8 bits first, as a file-based pipeline would.
    """
    return psnr(*_prepare(sr, hr, shave, round8))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB of two equal-shape planes with unit peak."""
    if a.shape != b.shape:
        raise MetricError(f"plane shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return INFINITE_PSNR
    return 10.0 * np.log10(1.0 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    """SSIM over every valid 11 x 11 Gaussian window of two 2-D arrays."""
    if min(a.shape) < 11 or a.shape != b.shape:
        raise MetricError(f"SSIM needs equal inputs of at least 11 x 11, got {a.shape} and {b.shape}")
    w = gaussian_window()
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2

    def filt(x):
        return correlate(x, w, mode="valid", method="direct")

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a * mu_a
    sbb = filt(b * b) - mu_b * mu_b
    sab = filt(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return num / den


def ssim_y(sr, hr, shave: int = 0, round8: bool = True) -> float:
    ya, yb = _prepare(sr, hr, shave, round8)
    if (ya == yb).all():
        return 1.0
    return float(np.mean(ssim_map(ya, yb)))


# -- files --------------------------------------------------------------------


def read_png(path) -> PlanarImage:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return PlanarImage(arr / 255.0)


def png_bytes(img) -> bytes:
    arr = img.to_uint8() if isinstance(img, PlanarImage) else np.asarray(img, dtype=np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def write_png(img, path) -> None:
    atomic_write(path, png_bytes(img))


def metrics_csv(rows: list[tuple[str, float, float]]) -> str:
    lines = ["filename,psnr_db,ssim"]
    for name, p, s in rows:
        lines.append(f"{name},{'inf' if np.isinf(p) else f'{p:.6f}'},{s:.6f}")
    return "\n".join(lines) + "\n"


def write_metrics_csv(rows: list[tuple[str, float, float]], path) -> None:
    atomic_write_text(path, metrics_csv(rows))


def evaluate_pair(sr: PlanarImage, hr: PlanarImage, scale: int, shave: int | None = None) -> tuple[float, float]:
    """PSNR/SSIM on Y with the HR image cropped to a multiple of ``scale``; shave defaults to ``scale``."""
    shave = scale if shave is None else shave
    hr = modcrop(hr, scale)
    if (sr.height, sr.width) != (hr.height, hr.width):
        raise MetricError(f"SR is {sr.height} x {sr.width} but HR is {hr.height} x {hr.width}")
    return psnr_y(sr, hr, shave), ssim_y(sr, hr, shave)


def list_pngs(directory) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() == ".png")
