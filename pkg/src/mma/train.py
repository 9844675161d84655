"""L1 training with Adam, an EMA shadow, milestone halving and D4 augmentation."""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from mma import metrics
from mma.fileio import atomic_write_text
from mma.model import MMA, save
from mma.numerics import Parameter, Tensor, backward, functional as F, no_grad


class TrainError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr_init: float = 2e-4
    milestones: list[int] = field(default_factory=lambda: [300_000, 500_000, 650_000, 700_000, 750_000])
    decay: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    ema_decay: float = 0.999
    batch: int = 64
    patch_size: int = 64
    total_iters: int = 800_000
    seed: int = 0
    augment: bool = True
    clip_grad: float | None = None
    checkpoint_every: int = 0
    log_every: int = 1

    def validate(self) -> "TrainConfig":
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise TrainError(f"milestones must be strictly increasing: {self.milestones}")
        if self.milestones and self.milestones[-1] >= self.total_iters:
            raise TrainError("every milestone must come before total_iters")
        if not 0.0 < self.ema_decay < 1.0:
            raise TrainError("ema_decay must lie in (0, 1)")
        if self.batch < 1 or self.patch_size < 1 or self.total_iters < 1:
            raise TrainError("batch, patch_size and total_iters must be positive")
        return self

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise TrainError(f"unknown training options: {sorted(unknown)}")
        return cls(**d).validate()

    def scaled(self, total_iters: int) -> "TrainConfig":
        """Same shape of schedule compressed to ``total_iters`` (milestones scale proportionally)."""
        ratio = total_iters / self.total_iters
        ms = sorted({max(1, int(round(m * ratio))) for m in self.milestones})
        ms = [m for m in ms if m < total_iters]
        return dataclasses.replace(self, total_iters=total_iters, milestones=ms).validate()


def pretrain() -> TrainConfig:
    return TrainConfig().validate()


def finetune() -> TrainConfig:
    return TrainConfig(
        lr_init=1e-5, milestones=[125_000, 200_000, 225_000, 240_000], total_iters=250_000
    ).validate()


def lr_at(it: int, cfg: TrainConfig) -> float:
    """lr_init * decay ** (number of milestones <= it)."""
    return cfg.lr_init * cfg.decay ** sum(1 for m in cfg.milestones if m <= it)


def l1_loss(sr: Tensor, hr: Tensor) -> Tensor:
    if sr.shape != hr.shape:
        raise TrainError(f"shape mismatch: {sr.shape} vs {hr.shape}")
    return F.mean(F.abs(F.sub(sr, hr)))


class Adam:
    """Bias-corrected Adam over a fixed, ordered list of named parameters."""

    def __init__(self, params: Sequence[tuple[str, Parameter]], beta1=0.9, beta2=0.99, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]

    def step(self, lr: float, grads: Sequence[np.ndarray] | None = None) -> None:
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for _, p in self.params]
        for (name, _), g in zip(self.params, grads):
            if not np.isfinite(g).all():
                raise TrainError(f"non-finite gradient in {name}")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for (_, p), g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array([self.t], dtype=np.float64)}
        for (name, _), m, v in zip(self.params, self.m, self.v):
            out[f"adam.m.{name}"] = m
            out[f"adam.v.{name}"] = v
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["adam.t"][0])
        for i, (name, p) in enumerate(self.params):
            self.m[i] = state[f"adam.m.{name}"].astype(p.data.dtype, copy=True)
            self.v[i] = state[f"adam.v.{name}"].astype(p.data.dtype, copy=True)


def adam_step(opt: Adam, grads: Sequence[np.ndarray], lr: float) -> None:
    opt.step(lr, grads)


def ema_update(shadow: Sequence[np.ndarray], params: Sequence[np.ndarray], d: float = 0.999) -> None:
    """In place: shadow <- d * shadow + (1 - d) * params."""
    for s, p in zip(shadow, params):
        if s.shape != p.shape:
            raise TrainError(f"EMA shape mismatch: {s.shape} vs {p.shape}")
        s *= d
        s += (1.0 - d) * p


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    if norm > max_norm:
        for g in grads:
            g *= max_norm / (norm + 1e-12)
    return norm


# -- augmentation and sampling ---------------------------------------------------

# Element k of the dihedral group D4: k % 4 quarter turns, then a horizontal
# flip when k >= 4. Arrays are ... x H x W.
D4 = tuple(range(8))


def d4_apply(x: np.ndarray, k: int) -> np.ndarray:
    y = np.rot90(x, k % 4, axes=(-2, -1))
    if k >= 4:
        y = y[..., ::-1]
    return np.ascontiguousarray(y)


def d4_compose(a: int, b: int) -> int:
    """Index of the transform equal to applying ``b`` and then ``a``."""
    probe = np.arange(6).reshape(2, 3)
    target = d4_apply(d4_apply(probe, b), a)
    for k in D4:
        cand = d4_apply(probe, k)
        if cand.shape == target.shape and (cand == target).all():
            return k
    raise AssertionError("D4 is not closed")


def augment(lr_patch: np.ndarray, hr_patch: np.ndarray, seed) -> tuple[np.ndarray, np.ndarray]:
    """Apply one uniformly drawn D4 element to both patches (C x h x w and C x sh x sw)."""
    lh, lw = lr_patch.shape[-2:]
    hh, hw = hr_patch.shape[-2:]
    if hh % lh or hw % lw or hh // lh != hw // lw:
        raise TrainError(f"HR {hh} x {hw} is not an integer multiple of LR {lh} x {lw}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    k = int(rng.integers(8))
    return d4_apply(lr_patch, k), d4_apply(hr_patch, k)


@dataclass
class Pair:
    """An HR image and its bicubic LR counterpart, both C x H x W float arrays."""

    lr: np.ndarray
    hr: np.ndarray
    name: str = ""


def make_pair(hr: metrics.PlanarImage, scale: int, name: str = "") -> Pair:
    hr = metrics.modcrop(hr, scale)
    lr = metrics.degrade(hr, scale)
    return Pair(lr.data.transpose(2, 0, 1).copy(), hr.data.transpose(2, 0, 1).copy(), name)


def sample_crop(rng: np.random.Generator, lr_shape: tuple[int, int], patch: int) -> tuple[int, int]:
    """Top-left (row, col) of an in-bounds LR crop."""
    h, w = lr_shape
    if patch > h or patch > w:
        raise TrainError(f"patch {patch} does not fit in a {h} x {w} LR image")
    return int(rng.integers(h - patch + 1)), int(rng.integers(w - patch + 1))


def crop_pair(p: Pair, top: int, left: int, patch: int, scale: int) -> tuple[np.ndarray, np.ndarray]:
    lr = p.lr[:, top : top + patch, left : left + patch]
    hr = p.hr[:, scale * top : scale * (top + patch), scale * left : scale * (left + patch)]
    return lr, hr


def sample_batch(data: Sequence[Pair], cfg: TrainConfig, scale: int, it: int) -> tuple[np.ndarray, np.ndarray]:
    """Batch for iteration ``it``; a function of (seed, it) alone, which makes resuming exact."""
    rng = np.random.default_rng([cfg.seed, it])
    lrs, hrs = [], []
    for _ in range(cfg.batch):
        p = data[int(rng.integers(len(data)))]
        top, left = sample_crop(rng, p.lr.shape[1:], cfg.patch_size)
        lr, hr = crop_pair(p, top, left, cfg.patch_size, scale)
        if cfg.augment:
            lr, hr = augment(lr, hr, rng)
        lrs.append(lr)
        hrs.append(hr)
    return np.stack(lrs), np.stack(hrs)


# -- loop -------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: MMA
    ema: MMA
    trace: list[tuple[int, float, float]]
    optimizer: Adam


def trace_csv(trace: list[tuple[int, float, float]]) -> str:
    return "iter,lr,loss\n" + "".join(f"{i},{lr:.9g},{loss:.9g}\n" for i, lr, loss in trace)


def train_state(res: TrainResult) -> dict[str, np.ndarray]:
    state = res.optimizer.state()
    for name, p in res.ema.named_parameters():
        state[f"ema.{name}"] = p.data
    state["trace"] = np.array(res.trace, dtype=np.float64).reshape(-1, 3)
    return state


def train_loop(
    model: MMA,
    dataset: Sequence[Pair],
    cfg: TrainConfig,
    resume: dict[str, np.ndarray] | None = None,
    start_iter: int = 0,
    stop_iter: int | None = None,
    checkpoint_path: str | Path | None = None,
    callback: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Train in place for iterations [start_iter, stop_iter); returns model, EMA copy and loss trace.

    ``resume`` is a state dict from :func:`train_state` (Adam moments, EMA, trace)
    whose model weights have already been loaded into ``model``.
    """
    if not dataset:
        raise TrainError("dataset is empty")
    cfg.validate()
    scale = model.config.scale
    params = list(model.named_parameters())
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.eps)
    ema = copy.deepcopy(model)
    trace: list[tuple[int, float, float]] = []
    if resume is not None:
        opt.load_state(resume)
        for name, p in ema.named_parameters():
            p.data = resume[f"ema.{name}"].astype(p.data.dtype, copy=True)
        trace = [(int(r[0]), float(r[1]), float(r[2])) for r in resume["trace"]]
        start_iter = opt.t
    stop_iter = cfg.total_iters if stop_iter is None else stop_iter
    ema_params = [p.data for _, p in ema.named_parameters()]
    result = TrainResult(model, ema, trace, opt)
    for it in range(start_iter, stop_iter):
        lr_batch, hr_batch = sample_batch(dataset, cfg, scale, it)
        dtype = params[0][1].dtype
        model.zero_grad()
        loss = l1_loss(model(Tensor(lr_batch, dtype=dtype)), Tensor(hr_batch, dtype=dtype))
        backward(loss)
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for _, p in params]
        if cfg.clip_grad is not None:
            clip_global_norm(grads, cfg.clip_grad)
        lr = lr_at(it, cfg)
        opt.step(lr, grads)
        ema_update(ema_params, [p.data for _, p in params], cfg.ema_decay)
        value = float(loss.item())
        trace.append((it, lr, value))
        if callback is not None:
            callback(it, value)
        if checkpoint_path is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            save(model, checkpoint_path, extra=train_state(result))
    model.zero_grad()
    return result


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return v[:0]
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window


def super_resolve(model: MMA, lr: np.ndarray, batch_dtype=None) -> np.ndarray:
    """Inference on one C x H x W LR array; returns a clipped C x sH x sW array."""
    with no_grad():
        out = model(Tensor(lr, dtype=batch_dtype or model.shallow.weight.dtype)).data
    return np.clip(out.astype(np.float64), 0.0, 1.0)
