"""Local attribution maps: path-integrated gradients of a patch detector.

The path runs from a heavily blurred copy of the input (alpha = 0) to the
input itself (alpha = 1). Gradients are taken at the midpoint of each of M
sub-intervals and multiplied by the exact path increment over that interval,
so the attributions telescope towards D(F(x)) - D(F(baseline)).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.ndimage import gaussian_filter

from mma.fileio import atomic_write, atomic_write_text
from mma.metrics import _YCBCR_MATRIX, png_bytes
from mma.numerics import Tensor, backward, functional as F

Patch = tuple[int, int, int]


class LamError(ValueError):
    pass


@dataclass
class AttributionMap:
    """Input-resolution attributions (summed over colour channels) for one target patch."""

    values: np.ndarray
    patch: Patch
    steps: int
    sigma_max: float
    detector_value: float
    baseline_value: float
    scale: int = 1
    di: float = field(init=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.isfinite(self.values).all():
            raise LamError("attribution map contains non-finite values")
        self.di = diffusion_index(self) if np.any(self.values) else float("nan")

    @property
    def total(self) -> float:
        return float(self.values.sum())

    def completeness_error(self) -> float:
        """|sum(values) - (D(F(x)) - D(F(baseline)))| relative to the detector gap."""
        gap = self.detector_value - self.baseline_value
        return abs(self.total - gap) / max(abs(gap), 1e-12)

    def record(self) -> dict:
        return {
            "patch": list(self.patch),
            "M": self.steps,
            "sigma_max": self.sigma_max,
            "di": self.di,
            "detector_value": self.detector_value,
        }


def _check_patch(shape: tuple[int, int], patch: Patch) -> None:
    x, y, l = patch
    h, w = shape
    if l < 2 or x < 0 or y < 0 or x + l > w or y + l > h:
        raise LamError(f"patch (x={x}, y={y}, l={l}) does not fit inside a {h} x {w} image")


def detector(sr: Tensor, patch: Patch) -> Tensor:
    """Sum of |horizontal| + |vertical| forward differences of Y inside the patch.

    ``sr`` is 3 x H x W or B x 3 x H x W (summed over the batch); ``patch``
    is (x, y, l) with x the column and y the row of the top-left corner.
    Only pixel pairs that both lie inside the l x l patch contribute.
    """
    if sr.ndim == 3:
        sr = F.reshape(sr, (1,) + sr.shape)
    _check_patch(sr.shape[2:], patch)
    x, y, l = patch
    coeff = Tensor(_YCBCR_MATRIX[0].reshape(1, 3, 1, 1) / 255.0, dtype=sr.dtype)
    luma = F.sum(F.mul(sr[:, :, y : y + l, x : x + l], coeff), axis=1)
    dh = F.sub(luma[:, :, 1:], luma[:, :, :-1])
    dv = F.sub(luma[:, 1:, :], luma[:, :-1, :])
    return F.add(F.sum(F.abs(dh)), F.sum(F.abs(dv)))


def sigma_at(alpha: float, sigma_max: float) -> float:
    return (1.0 - alpha) * sigma_max


def path(img: np.ndarray, alpha: float, sigma_max: float = 4.0, mode: str = "blur") -> np.ndarray:
    """Point gamma(alpha) on the path for a C x H x W image.

    ``mode="blur"``: Gaussian blur with sigma (1 - alpha) sigma_max, reflected
    borders, channels independent. ``mode="linear"``: alpha * img (a black baseline).
    alpha = 1 returns a copy of the input bit for bit.
    """
    if sigma_max <= 0:
        raise LamError("sigma_max must be positive")
    img = np.asarray(img)
    if alpha >= 1.0:
        return img.copy()
    if mode == "linear":
        return (alpha * img).astype(img.dtype)
    if mode != "blur":
        raise LamError(f"unknown path mode {mode!r}")
    s = sigma_at(alpha, sigma_max)
    sig = (0.0,) * (img.ndim - 2) + (s, s)
    return gaussian_filter(img.astype(np.float64), sigma=sig, mode="reflect", truncate=4.0).astype(img.dtype)


def lam(
    model: Callable[[Tensor], Tensor],
    img: np.ndarray,
    patch: Patch,
    steps: int = 128,
    sigma_max: float = 4.0,
    batch: int = 8,
    mode: str = "blur",
    detect: Callable[[Tensor, Patch], Tensor] = detector,
) -> AttributionMap:
    """Attribute the detector response on SR patch ``patch`` to the 3 x H x W input ``img``."""
    if steps < 2:
        raise LamError("need at least 2 path steps")
    img = np.asarray(img)
    if img.ndim != 3:
        raise LamError(f"expected a C x H x W image, got shape {img.shape}")
    params = list(model.parameters()) if hasattr(model, "parameters") else []
    frozen = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        knots = np.stack([path(img, k / steps, sigma_max, mode) for k in range(steps + 1)])
        mids = np.stack([path(img, (k + 0.5) / steps, sigma_max, mode) for k in range(steps)])
        total = np.zeros(img.shape, dtype=np.float64)
        for start in range(0, steps, batch):
            stop = min(start + batch, steps)
            x = Tensor(mids[start:stop], requires_grad=True)
            out = detect(model(x), patch)
            if not out.requires_grad:
                raise LamError("model output does not depend differentiably on its input")
            backward(out)
            for k in range(start, stop):
                total += x.grad[k - start].astype(np.float64) * (knots[k + 1] - knots[k])
        ends = Tensor(knots[[steps, 0]])
        d_img = float(detect(model(ends[0:1]), patch).item())
        d_base = float(detect(model(ends[1:2]), patch).item())
    finally:
        for p, flag in zip(params, frozen):
            p.requires_grad = flag
    scale = getattr(getattr(model, "config", None), "scale", 1)
    return AttributionMap(total.sum(axis=0), tuple(patch), steps, sigma_max, d_img, d_base, scale)


def gini(values: np.ndarray) -> float:
    v = np.sort(np.abs(np.asarray(values, dtype=np.float64)).ravel())
    n = v.size
    total = v.sum()
    if total == 0.0:
        raise LamError("Gini coefficient is undefined for an all-zero map")
    ranks = np.arange(1, n + 1)
    return float(2.0 * np.dot(ranks, v) / (n * total) - (n + 1.0) / n)


def diffusion_index(a) -> float:
    """100 (1 - Gini(|values|)); 100 for a uniform map, 100 / n for a single pixel."""
    values = a.values if isinstance(a, AttributionMap) else a
    return 100.0 * (1.0 - gini(values))


# Colour ramp for heatmaps, linearly interpolated between evenly spaced stops
# from 0 (no attribution) to 1 (the map's maximum |value|).
RAMP = np.array(
    [
        [0, 0, 0],
        [70, 10, 120],
        [190, 40, 90],
        [250, 140, 20],
        [255, 255, 200],
    ],
    dtype=np.float64,
)
OUTLINE = np.array([0, 255, 0], dtype=np.uint8)


def heatmap_rgb(a: AttributionMap) -> np.ndarray:
    mag = np.abs(a.values)
    peak = mag.max()
    t = mag / peak if peak > 0 else np.zeros_like(mag)
    pos = t * (len(RAMP) - 1)
    lo = np.minimum(np.floor(pos).astype(int), len(RAMP) - 2)
    frac = (pos - lo)[..., None]
    rgb = RAMP[lo] * (1.0 - frac) + RAMP[lo + 1] * frac
    out = np.floor(rgb + 0.5).astype(np.uint8)
    x, y, l = (v // a.scale for v in a.patch)
    h, w = out.shape[:2]
    x1, y1 = min(x + max(l, 1), w) - 1, min(y + max(l, 1), h) - 1
    out[y, x : x1 + 1] = out[y1, x : x1 + 1] = OUTLINE
    out[y : y1 + 1, x] = out[y : y1 + 1, x1] = OUTLINE
    return out


def render_heatmap(a: AttributionMap, out_path) -> None:
    """PNG of the normalized |attribution| through ``RAMP``, with the target patch
    (mapped to input resolution) outlined in green."""
    atomic_write(out_path, png_bytes(heatmap_rgb(a)))


def write_record(a: AttributionMap, out_path) -> None:
    atomic_write_text(out_path, json.dumps(a.record(), indent=2, sort_keys=True) + "\n")
