"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (printed at the end of the pytest run) and
then asserts, so a failing criterion is visible both ways. Training-based
criteria share module-scoped fixtures; the whole file takes roughly 15 minutes
on one CPU core.
"""

import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import DATA
from mma import cli, lam, metrics, model as M, ssm, toy, train as T
from mma.blocks import pixel_shuffle, pixel_unshuffle
from mma.numerics import Tensor, check_gradients, default_dtype, functional as F

pytestmark = pytest.mark.slow

SET5_DIR = Path(os.environ.get("MMA_SET5", DATA / "Set5"))
SEEDS = (0, 1, 2)
TIE = 0.05  # dB


# -- 1. bicubic anchor --------------------------------------------------------------------


def bicubic_roundtrip(hr: metrics.PlanarImage, scale: int = 2):
    hr = metrics.modcrop(hr, scale)
    lr = metrics.degrade(hr, scale)
    sr = metrics.bicubic_resize(lr, hr.height, hr.width, round8=True)
    return lr, sr, hr


def test_1_bicubic_anchor(criterion):
    t0 = time.perf_counter()
    files = metrics.list_pngs(SET5_DIR) if SET5_DIR.is_dir() else []
    if files:
        scores = [metrics.evaluate_pair(*bicubic_roundtrip(metrics.read_png(f))[1:], 2) for f in files]
        p, s = np.mean(scores, axis=0)
        ok = abs(p - 33.66) <= 0.05 and abs(s - 0.9299) <= 0.0015
        detail = f"Set5 x2 mean PSNR {p:.4f} dB (33.66 +- 0.05), SSIM {s:.4f} (0.9299 +- 0.0015)"
    else:
        rec = json.loads((DATA / "regression.json").read_text())
        lr, sr, hr = bicubic_roundtrip(metrics.read_png(DATA / "regression_hr.png"), rec["scale"])
        checks = [
            hashlib.sha256(lr.to_uint8().tobytes()).hexdigest() == rec["lr_sha256"],
            hashlib.sha256(sr.to_uint8().tobytes()).hexdigest() == rec["sr_sha256"],
            metrics.psnr_y(sr, hr, rec["shave"]) == rec["psnr_y"],
            metrics.ssim_y(sr, hr, rec["shave"]) == rec["ssim_y"],
        ]
        ok = all(checks)
        detail = (
            f"Set5 not found at {SET5_DIR}; pinned 32x32 vectors bit-exact: "
            f"LR hash {checks[0]}, SR hash {checks[1]}, PSNR {checks[2]}, SSIM {checks[3]}"
        )
    elapsed = time.perf_counter() - t0
    ok = ok and elapsed < 30
    assert criterion("1 bicubic anchor", ok, f"{detail}; {elapsed:.1f} s (< 30 s)")


# -- 2. SSM duality ----------------------------------------------------------------------------


def test_2_ssm_duality(criterion):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(120):
        n = int(rng.integers(1, 9))
        length = int(rng.integers(1, 129))
        p = ssm.SsmParams(
            A=-rng.uniform(0.05, 3.0, n), B=rng.standard_normal(n), C=rng.standard_normal(n), delta=float(rng.uniform(0.01, 1.0))
        )
        d = ssm.discretize_zoh(p)
        d32 = ssm.DiscreteParams(d.a_bar.astype(np.float32), d.b_bar.astype(np.float32))
        c32 = p.C.astype(np.float32)
        x = rng.standard_normal(length).astype(np.float32)
        y_scan = ssm.scan_sequential(d32, c32, x)
        y_kernel = ssm.causal_conv(x, ssm.kernel_form(d32, c32, length))
        assert y_scan.dtype == np.float32 and y_kernel.dtype == np.float32
        worst = max(worst, float(np.abs(y_scan - y_kernel).max()))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-5 and elapsed < 10
    assert criterion("2 SSM duality", ok, f"120 LTI draws, max |kernel - scan| = {worst:.2e} (float32, < 1e-5); {elapsed:.1f} s")


# -- 3. scan equivalence ------------------------------------------------------------------------


def test_3_scan_equivalence(criterion):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    worst = {np.float32: 0.0, np.float64: 0.0}
    for length in (1, 2, 3, 17, 128, 1000, 4096):
        a = rng.uniform(0.0, 1.0, (length, 4, 3))
        b = rng.standard_normal((length, 4, 3))
        for dtype in worst:
            ref = ssm.scan_pairs_sequential(a.astype(dtype), b.astype(dtype))
            par = ssm.scan_parallel(a.astype(dtype), b.astype(dtype))
            worst[dtype] = max(worst[dtype], float(np.abs(ref - par).max()))
    elapsed = time.perf_counter() - t0
    ok = worst[np.float32] < 1e-5 and worst[np.float64] < 1e-10 and elapsed < 10
    detail = f"L up to 4096: max diff {worst[np.float32]:.2e} (float32, < 1e-5), {worst[np.float64]:.2e} (float64, < 1e-10); {elapsed:.1f} s"
    assert criterion("3 scan equivalence", ok, detail)


# -- 4. gradient suite -----------------------------------------------------------------------------


def primitive_cases(rng):
    def leaf(*shape, low=-1.5, high=1.5):
        return Tensor(rng.uniform(low, high, shape), requires_grad=True)

    x, y = leaf(3, 4), leaf(3, 4)
    pos = leaf(3, 4, low=0.3, high=2.0)
    kinked = leaf(3, 4)
    kinked.data[np.abs(kinked.data) < 0.05] = 0.4
    img, w, bias = leaf(2, 3, 5, 4), leaf(4, 3, 3, 3), leaf(4)
    seq, dw, db = leaf(2, 7, 3), leaf(3, 4), leaf(3)
    gamma, beta = leaf(4), leaf(4)
    a_dec = Tensor(rng.uniform(0.2, 0.9, (2, 6, 3)), requires_grad=True)
    u, dl = leaf(2, 6, 3), Tensor(rng.uniform(0.1, 1.0, (2, 6, 3)), requires_grad=True)
    A, Bm, Cm = Tensor(-rng.uniform(0.5, 2.0, (3, 2)), requires_grad=True), leaf(2, 6, 2), leaf(2, 6, 2)
    mat, lw, lb = leaf(4, 2), leaf(5, 3), leaf(5)
    shuf, probe = leaf(1, 8, 3, 2), Tensor(rng.standard_normal((1, 2, 6, 4)))
    sq = lambda t: F.sum(F.square(t))  # noqa: E731
    cases = {
        "add": (lambda: sq(F.add(x, y)), [x, y]),
        "sub": (lambda: sq(F.sub(x, y)), [x, y]),
        "mul": (lambda: sq(F.mul(x, y)), [x, y]),
        "div": (lambda: sq(F.div(x, pos)), [x, pos]),
        "neg": (lambda: sq(F.neg(x)), [x]),
        "exp": (lambda: F.sum(F.exp(x)), [x]),
        "log": (lambda: F.sum(F.log(pos)), [pos]),
        "sqrt": (lambda: F.sum(F.sqrt(pos)), [pos]),
        "square": (lambda: F.sum(F.mul(F.square(x), x)), [x]),
        "tanh": (lambda: sq(F.tanh(x)), [x]),
        "abs": (lambda: sq(F.abs(kinked)), [kinked]),
        "sigmoid": (lambda: sq(F.sigmoid(x)), [x]),
        "relu": (lambda: sq(F.relu(kinked)), [kinked]),
        "silu": (lambda: sq(F.silu(x)), [x]),
        "softplus": (lambda: sq(F.softplus(x)), [x]),
        "gelu": (lambda: sq(F.gelu(x)), [x]),
        "sum/mean": (lambda: F.add(sq(F.sum(x, axis=1)), sq(F.mean(x, axis=0))), [x]),
        "global_avg_pool": (lambda: sq(F.global_avg_pool(img)), [img]),
        "reshape/transpose": (lambda: F.sum(F.mul(F.transpose(F.reshape(x, (4, 3))), y)), [x, y]),
        "getitem": (lambda: sq(x[1:, ::2]), [x]),
        "concat/stack/split": (lambda: F.add(sq(F.concat([x, y], 1)), F.sum(F.mul(*F.split(F.stack([x, y]), [1, 1], 0)))), [x, y]),
        "flip": (lambda: F.sum(F.mul(F.flip(x, 1), y)), [x, y]),
        "pad (zeros, replicate)": (lambda: F.add(sq(F.pad2d(img, 1)), sq(F.pad2d(img, 1, "replicate"))), [img]),
        "matmul": (lambda: sq(F.matmul(x, mat)), [x, mat]),
        "linear": (lambda: sq(F.linear(seq, lw, lb)), [seq, lw, lb]),
        "conv2d": (lambda: sq(F.conv2d(img, w, bias, padding=1)), [img, w, bias]),
        "conv1d_causal_depthwise": (lambda: sq(F.conv1d_causal_depthwise(seq, dw, db)), [seq, dw, db]),
        "layernorm": (lambda: F.sum(F.mul(F.layernorm(x, gamma, beta), y)), [x, gamma, beta]),
        "linear_scan": (lambda: sq(ssm.linear_scan(a_dec, u)), [a_dec, u]),
        "selective_scan (compiled)": (lambda: sq(ssm.selective_scan(u, dl, A, Bm, Cm)), [u, dl, A, Bm, Cm]),
        "selective_scan (parallel)": (lambda: sq(ssm.selective_scan(u, dl, A, Bm, Cm, method="parallel")), [u, dl, A, Bm, Cm]),
        "pixel_shuffle": (lambda: F.sum(F.mul(pixel_shuffle(shuf, 2), probe)), [shuf]),
    }
    return cases


def test_4_gradient_suite(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    errors = {}
    with default_dtype(np.float64):
        for name, (fn, leaves) in primitive_cases(rng).items():
            errors[name] = check_gradients(fn, leaves, h=1e-6)
        m = M.build(M.toy(2), seed=4, dtype=np.float64)
        for p in m.parameters():
            p.data += rng.standard_normal(p.shape) * 0.2
        x = Tensor(rng.random((1, 3, 8, 8)), requires_grad=True)
        target = Tensor(rng.random((1, 3, 16, 16)))
        leaves = [x] + list(m.parameters())
        errors["toy model (C=16, K=2)"] = check_gradients(
            lambda: F.mean(F.abs(F.sub(m(x), target))), leaves, h=1e-5, max_entries=60, rng=rng
        )
    elapsed = time.perf_counter() - t0
    worst_name = max(errors, key=errors.get)
    ok = max(errors.values()) < 1e-3 and elapsed < 120
    detail = f"{len(errors)} checks, worst rel err {errors[worst_name]:.2e} ({worst_name}), toy model {errors['toy model (C=16, K=2)']:.2e}; {elapsed:.1f} s"
    assert criterion("4 gradient suite", ok, detail), errors


# -- 5. overfit oracle -----------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def overfit_run():
    return toy.overfit(metrics.read_png(DATA / "overfit_hr.png"), iters=2000)


def test_5_overfit(criterion, overfit_run):
    r = overfit_run
    ok = r.final_loss < 0.01 and r.gain >= 3.0 and r.seconds < 300
    detail = (
        f"final L1 {r.final_loss:.5f} (< 0.01; full-image {r.l1:.5f}), PSNR {r.psnr:.2f} dB vs bicubic "
        f"{r.bicubic_psnr:.2f} dB (+{r.gain:.2f}, >= 3); {r.seconds:.0f} s CPU (< 300)"
    )
    assert criterion("5 overfit oracle", ok, detail)


def test_5b_overfit_trace_trend(criterion, overfit_run):
    losses = [row[2] for row in overfit_run.result.trace]
    ma = T.moving_average(losses, 200)
    blocks = ma[::200]
    rises = np.diff(blocks)
    ok = bool(np.all(rises <= 0))
    detail = f"200-iteration moving average at every 200th step: {np.round(blocks, 5).tolist()}"
    assert criterion("5b overfit loss trend (non-increasing)", ok, detail)


# -- 6 and 8. ablations on the holdout task -------------------------------------------------------------


@pytest.fixture(scope="module")
def ablation_runs():
    hr = metrics.read_png(DATA / "holdout_hr.png")
    train_pairs, test_pairs = toy.holdout_split(hr)
    runs = {}
    for seed in SEEDS:
        for name in toy.ABLATIONS:
            m = toy.train_variant(name, train_pairs, toy.holdout_config(seed=seed))
            runs[name, seed] = (m, toy.mean_psnr(m, test_pairs))
    return runs, test_pairs


def test_6_ablation_direction(criterion, ablation_runs):
    runs, _ = ablation_runs
    rows, ok = [], True
    for seed in SEEDS:
        full, wo_ca, w_cnn = (runs[n, seed][1] for n in toy.ABLATIONS)
        seed_ok = full >= wo_ca - TIE and wo_ca >= w_cnn - TIE
        ok &= seed_ok
        rows.append(f"seed {seed}: {full:.2f} / {wo_ca:.2f} / {w_cnn:.2f}{'' if seed_ok else ' (out of order)'}")
    means = [np.mean([runs[n, s][1] for s in SEEDS]) for n in toy.ABLATIONS]
    detail = "test PSNR full / w/o-CA / w/-CNN, " + "; ".join(rows) + f"; means {means[0]:.2f} / {means[1]:.2f} / {means[2]:.2f}"
    assert criterion("6 ablation direction", ok, detail)


def holdout_patch(pair):
    """Centre l x l patch of the SR grid, l = half the HR tile."""
    h = pair.hr.shape[1]
    l = h // 2
    return (h - l) // 2, (h - l) // 2, l


def test_8_activated_area(criterion, ablation_runs):
    runs, test_pairs = ablation_runs
    pair = test_pairs[0]
    patch = holdout_patch(pair)
    rows, ok = [], True
    for seed in SEEDS:
        di = {}
        for name in ("full", "w_cnn"):
            m = runs[name, seed][0]
            di[name] = lam.lam(m, pair.lr.astype(np.float32), patch).di
        ok &= di["full"] > di["w_cnn"]
        rows.append(f"seed {seed}: {di['full']:.2f} vs {di['w_cnn']:.2f}")
    assert criterion("8 activated area DI(full) > DI(w/-CNN)", ok, f"patch {patch} on {pair.name}; " + "; ".join(rows))


# -- 7. LAM completeness --------------------------------------------------------------------------------------


def test_7_lam_completeness(criterion, overfit_run):
    m = overfit_run.result.model
    lr = T.make_pair(metrics.read_png(DATA / "overfit_hr.png"), 2).lr.astype(np.float32)
    patch = (40, 40, 16)
    t0 = time.perf_counter()
    a = lam.lam(m, lr, patch, steps=128)
    elapsed = time.perf_counter() - t0
    err = a.completeness_error()
    ok = err < 0.01 and elapsed < 60
    gap = a.detector_value - a.baseline_value
    detail = f"sum {a.total:.5f} vs D(F(x)) - D(F(baseline)) = {gap:.5f}, rel err {err:.2%} (< 1%) at M = 128; {elapsed:.1f} s"
    assert criterion("7 LAM completeness", ok, detail)


# -- 9. parameter count -----------------------------------------------------------------------------------------


def test_9_parameter_count(criterion):
    n = M.parameter_count(M.build(M.mma_t(2)))
    rel = n / 796_000 - 1
    assert criterion("9 parameter count", abs(rel) <= 0.2, f"MMA-T x2 has {n:,} parameters ({rel:+.1%} vs 796K, band +-20%)")


# -- 10. format bit-exactness -------------------------------------------------------------------------------------


def test_10_bit_exactness(criterion, tmp_path):
    m = M.build(M.toy(2), seed=10)
    a, b = tmp_path / "a.mma", tmp_path / "b.mma"
    M.save(m, a)
    re = M.load(a)
    M.save(re, b)
    ckpt_ok = a.read_bytes() == b.read_bytes() and all(
        np.array_equal(p.data, q.data) and p.data.dtype == q.data.dtype for p, q in zip(m.parameters(), re.parameters())
    )

    rng = np.random.default_rng(10)
    lr_png = tmp_path / "lr.png"
    metrics.write_png(rng.integers(0, 256, (20, 20, 3), dtype=np.uint8), lr_png)
    outs = []
    for k in range(2):
        sr, lo = tmp_path / f"sr{k}.png", tmp_path / f"lo{k}.png"
        assert cli.main(["sr", "--input", str(lr_png), "--checkpoint", str(a), "--output", str(sr)]) == 0
        assert cli.main(["degrade", "--input", str(lr_png), "--scale", "2", "--output", str(lo)]) == 0
        outs.append((sr.read_bytes(), lo.read_bytes()))
    cli_ok = outs[0] == outs[1]

    x = rng.standard_normal((2, 12, 5, 3))
    y = rng.standard_normal((2, 3, 10, 6))
    shuffle_ok = np.array_equal(pixel_unshuffle(pixel_shuffle(Tensor(x), 2), 2).data, x) and np.array_equal(
        pixel_shuffle(pixel_unshuffle(Tensor(y), 2), 2).data, y
    )
    ok = ckpt_ok and cli_ok and shuffle_ok
    detail = f"checkpoint roundtrip {ckpt_ok}, CLI idempotence {cli_ok}, pixel-shuffle bijection {shuffle_ok}"
    assert criterion("10 format bit-exactness", ok, detail)
