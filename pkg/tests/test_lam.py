import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mma import lam as L, model as M
from mma.lam import AttributionMap, LamError
from mma.numerics import Tensor, functional as F

Y_STEP = 255 / 219  # an RGB step that moves Y by exactly 1


def amap(values, patch=(0, 0, 2)):
    return AttributionMap(np.asarray(values, dtype=np.float64), patch, 8, 4.0, 1.0, 0.0)


def textured(h, w, seed=0):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    base = 0.5 + 0.3 * np.sin(xx / 2.3)[None] * np.cos(yy / 3.1)[None]
    return np.clip(base + 0.1 * rng.standard_normal((3, h, w)), 0, 1)


# -- detector -----------------------------------------------------------------


def test_detector_of_constant_is_zero():
    assert L.detector(Tensor(np.full((3, 12, 12), 0.4)), (2, 3, 6)).item() == 0.0


@pytest.mark.parametrize("l", [2, 5, 8])
def test_detector_of_unit_step_is_patch_width(l):
    img = np.zeros((3, 10, 10))
    img[:, :, 5:] = Y_STEP
    assert np.isclose(L.detector(Tensor(img), (5 - l // 2, 1, l)).item(), l, atol=1e-12)


def test_detector_is_homogeneous(rng):
    img = rng.random((3, 9, 9))
    d1 = L.detector(Tensor(img), (1, 1, 6)).item()
    assert np.isclose(L.detector(Tensor(2 * img), (1, 1, 6)).item(), 2 * d1, rtol=1e-12)


def test_detector_ignores_pixels_outside_patch():
    img = np.zeros((3, 10, 10))
    img[:, 0, 0] = 1.0
    img[:, 9, :] = 1.0
    assert L.detector(Tensor(img), (1, 1, 8)).item() == 0.0


def test_detector_sums_over_batch(rng):
    b = rng.random((2, 3, 8, 8))
    total = L.detector(Tensor(b), (0, 0, 8)).item()
    assert np.isclose(total, sum(L.detector(Tensor(x), (0, 0, 8)).item() for x in b))


@pytest.mark.parametrize("patch", [(-1, 0, 4), (0, 0, 11), (7, 7, 4), (0, 0, 1)])
def test_detector_rejects_bad_patches(patch):
    with pytest.raises(LamError):
        L.detector(Tensor(np.zeros((3, 10, 10))), patch)


# -- path ------------------------------------------------------------------------


def test_path_endpoint_is_exact(rng):
    img = rng.random((3, 8, 8)).astype(np.float32)
    out = L.path(img, 1.0)
    assert out.dtype == img.dtype and np.array_equal(out, img) and out is not img


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_path_of_constant_is_constant(alpha, v):
    assert np.allclose(L.path(np.full((3, 7, 9), v), alpha), v, atol=1e-12)


def test_sigma_falls_monotonically():
    sig = [L.sigma_at(a, 4.0) for a in np.linspace(0, 1, 11)]
    assert sig[0] == 4.0 and sig[-1] == 0.0
    assert all(b < a for a, b in zip(sig, sig[1:]))


def test_path_blurs_more_near_the_baseline(rng):
    img = rng.random((3, 16, 16))
    spread = [np.std(L.path(img, a)) for a in (0.0, 0.5, 0.9, 1.0)]
    assert all(b > a for a, b in zip(spread, spread[1:]))


def test_path_errors():
    with pytest.raises(LamError):
        L.path(np.zeros((3, 4, 4)), 0.5, sigma_max=0.0)
    with pytest.raises(LamError):
        L.path(np.zeros((3, 4, 4)), 0.5, mode="noise")


# -- attribution ------------------------------------------------------------------


def test_linear_surrogate_gives_exact_attribution(rng, f64):
    w = rng.standard_normal((3, 6, 6))
    img = rng.random((3, 6, 6))

    def surrogate(x):
        return x

    def weighted(sr, _patch):
        return F.sum(F.mul(sr, Tensor(w)))

    a = L.lam(surrogate, img, (0, 0, 6), steps=16, mode="linear", detect=weighted)
    assert np.allclose(a.values, (w * img).sum(axis=0), atol=1e-12)
    assert a.completeness_error() < 1e-12


def identity_model(scale=1, features=16):
    """Shallow and reconstruction convs copy RGB through; the deep branch outputs exactly zero."""
    cfg = M.toy(scale).replace(features=features)
    m = M.build(cfg, seed=0, dtype=np.float64)
    for p in m.parameters():
        p.data[...] = 0.0
    for c in range(3):
        m.shallow.weight.data[c, c, 1, 1] = 1.0
        for k in range(scale * scale):
            m.recon.weight.data[c * scale * scale + k, c, 1, 1] = 1.0
    return m


def test_identity_harness_reproduces_input():
    m = identity_model()
    x = textured(10, 12)
    assert np.array_equal(m(x).data, x)


def test_identity_model_attribution_is_detector_path_integral():
    img = textured(12, 12)
    patch = (3, 2, 6)
    a = L.lam(identity_model(), img, patch, steps=64)
    ref = L.lam(lambda x: x, img, patch, steps=64)
    assert np.allclose(a.values, ref.values, atol=1e-12, rtol=0)
    assert a.completeness_error() < 0.01


def test_completeness_on_smooth_identity_harness():
    a = L.lam(identity_model(), textured(16, 16, seed=3), (4, 4, 8), steps=128)
    assert a.completeness_error() < 0.01


def test_cnn_attribution_is_confined_to_receptive_field():
    # no channel attention: the global pooling would otherwise reach every pixel
    cfg = M.ablation(M.toy(2), "w_cnn").replace(use_channel_attention=False)
    m = M.build(cfg, seed=1, dtype=np.float64)
    img = textured(32, 32)
    x, y, l = 30, 28, 6
    a = L.lam(m, img, (x, y, l), steps=8)
    radius = 1 + 2 * cfg.blocks + 1 + 1  # shallow, two convs per block, tail, reconstruction
    mask = np.zeros(a.values.shape, bool)
    mask[max(0, y // 2 - radius) : (y + l - 1) // 2 + radius + 1, max(0, x // 2 - radius) : (x + l - 1) // 2 + radius + 1] = True
    assert np.all(a.values[~mask] == 0.0)
    assert np.count_nonzero(a.values[mask]) > 0.5 * mask.sum()


def test_vim_attribution_reaches_every_row():
    m = M.build(M.toy(2), seed=1, dtype=np.float64)
    a = L.lam(m, textured(20, 20), (4, 4, 6), steps=4)
    assert np.all(np.abs(a.values).sum(axis=1) > 0)


def test_lam_restores_requires_grad():
    m = M.build(M.toy(2), seed=0)
    L.lam(m, textured(8, 8).astype(np.float32), (0, 0, 4), steps=2)
    assert all(p.requires_grad for p in m.parameters())


def test_lam_errors():
    with pytest.raises(LamError):
        L.lam(lambda x: x, np.zeros((3, 8, 8)), (0, 0, 4), steps=1)
    with pytest.raises(LamError):
        L.lam(lambda x: x, np.zeros((8, 8)), (0, 0, 4))
    with pytest.raises(LamError):
        L.lam(lambda x: Tensor(x.data), np.zeros((3, 8, 8)), (0, 0, 4), steps=2)


# -- diffusion index -------------------------------------------------------------------


def test_uniform_map_has_full_diffusion():
    assert np.isclose(L.diffusion_index(np.full((5, 5), -0.3)), 100.0)


@pytest.mark.parametrize("n", [1, 4, 100])
def test_point_mass_diffusion(n):
    v = np.zeros(n)
    v[n // 2] = 2.5
    assert np.isclose(L.diffusion_index(v), 100.0 / n)


@given(arrays(np.float64, 20, elements=st.floats(-10, 10)), st.floats(1e-3, 1e3), st.randoms())
def test_diffusion_index_invariances(v, c, r):
    if not np.any(np.abs(v) > 1e-6):
        return
    di = L.diffusion_index(v)
    perm = list(v)
    r.shuffle(perm)
    assert 0.0 < di <= 100.0 + 1e-9
    assert np.isclose(L.diffusion_index(c * v), di)
    assert np.isclose(L.diffusion_index(np.array(perm)), di)


def test_gini_of_zero_map_is_an_error():
    with pytest.raises(LamError):
        L.gini(np.zeros(4))
    assert np.isnan(amap(np.zeros((3, 3))).di)


def test_non_finite_map_is_rejected():
    with pytest.raises(LamError):
        amap([[np.nan, 0.0]])


# -- outputs ---------------------------------------------------------------------------------


def test_heatmap_dimensions_and_outline(rng):
    a = amap(rng.random((9, 7)), patch=(2, 4, 6))
    a.scale = 2
    img = L.heatmap_rgb(a)
    assert img.shape == (9, 7, 3) and img.dtype == np.uint8
    assert (img[2, 1:4] == L.OUTLINE).all() and (img[2:5, 1] == L.OUTLINE).all()


def test_zero_map_is_lowest_ramp_colour():
    img = L.heatmap_rgb(amap(np.zeros((6, 6)), patch=(0, 0, 6)))
    inner = img[1:-1, 1:-1]
    assert (inner == L.RAMP[0].astype(np.uint8)).all()


def test_heatmap_peak_is_top_of_ramp():
    v = np.zeros((6, 6))
    v[3, 3] = -2.0
    assert (L.heatmap_rgb(amap(v, patch=(0, 0, 2)))[3, 3] == L.RAMP[-1]).all()


def test_rendered_files_are_deterministic(tmp_path, rng):
    a = amap(rng.random((10, 10)), patch=(1, 1, 4))
    L.render_heatmap(a, tmp_path / "a.png")
    L.render_heatmap(a, tmp_path / "b.png")
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    L.write_record(a, tmp_path / "a.json")
    rec = json.loads((tmp_path / "a.json").read_text())
    assert set(rec) == {"patch", "M", "sigma_max", "di", "detector_value"}
    assert rec["patch"] == [1, 1, 4] and rec["M"] == 8
