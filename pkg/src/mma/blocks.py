"""Tokenization, channel attention, MLP, the MetaFormer-style MMA block and pixel shuffle.

Feature maps are B x C x H x W; token sequences are B x L x C with L = H * W in
row-major raster order (one token per pixel).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mma.numerics import ContractError, Module, Tensor, functional as F
from mma.numerics.layers import Conv2d, LayerNorm, Linear, _param, trunc_normal
from mma.ssm import VimBlock


def _batched(x: Tensor, rank: int) -> tuple[Tensor, bool]:
    if x.ndim == rank - 1:
        return F.reshape(x, (1,) + x.shape), True
    if x.ndim != rank:
        raise ContractError(f"expected rank {rank - 1} or {rank}, got shape {x.shape}")
    return x, False


@dataclass
class TokenGrid:
    tokens: Tensor
    height: int
    width: int


def tokenize(f: Tensor, pos_embedding: Tensor | None = None) -> TokenGrid:
    """C x H x W (or B x C x H x W) -> raster-order tokens, plus an optional L x C embedding."""
    f, squeeze = _batched(f, 4)
    b, c, h, w = f.shape
    tokens = F.reshape(F.transpose(f, (0, 2, 3, 1)), (b, h * w, c))
    if pos_embedding is not None:
        tokens = F.add(tokens, pos_embedding)
    if squeeze:
        tokens = F.reshape(tokens, tokens.shape[1:])
    return TokenGrid(tokens, h, w)


def detokenize(g: TokenGrid) -> Tensor:
    tokens, squeeze = _batched(g.tokens, 3)
    b, length, c = tokens.shape
    if length != g.height * g.width:
        raise ContractError(f"{length} tokens cannot fill a {g.height} x {g.width} grid")
    f = F.transpose(F.reshape(tokens, (b, g.height, g.width, c)), (0, 3, 1, 2))
    return F.reshape(f, f.shape[1:]) if squeeze else f


def bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Rows interpolate ``n_in`` samples at ``n_out`` half-pixel-aligned positions."""
    m = np.zeros((n_out, n_in))
    if n_out == n_in:
        np.fill_diagonal(m, 1.0)
        return m
    src = np.maximum((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


class PositionEmbedding(Module):
    """Learned C x G x G grid, bilinearly resampled to the requested H x W."""

    def __init__(self, rng: np.random.Generator, dim: int, grid: int = 64):
        self.weight = _param(trunc_normal(rng, (dim, grid, grid), 0.02))

    def __call__(self, height: int, width: int) -> Tensor:
        c, gh, gw = self.weight.shape
        grid = self.weight
        if (height, width) != (gh, gw):
            rh = Tensor(bilinear_matrix(height, gh), dtype=grid.dtype)
            rw = Tensor(bilinear_matrix(width, gw).T, dtype=grid.dtype)
            grid = F.matmul(F.matmul(rh, grid), rw)
        return F.reshape(F.transpose(grid, (1, 2, 0)), (height * width, c))


class ChannelAttention(Module):
    """Squeeze-and-excitation gate: w = sigmoid(up(relu(down(avgpool(f)))))."""

    def __init__(self, rng: np.random.Generator, channels: int, reduction: int = 16):
        if reduction < 1 or channels % reduction:
            raise ContractError(f"reduction {reduction} does not divide {channels} channels")
        hidden = channels // reduction
        self.down = Linear(rng, channels, hidden, bias=True)
        self.up = Linear(rng, hidden, channels, bias=True)
        self.up.weight.data[...] = 0.0

    def gate(self, pooled: Tensor) -> Tensor:
        """B x C pooled descriptors -> B x C gates in (0, 1)."""
        return F.sigmoid(self.up(F.relu(self.down(pooled))))

    def __call__(self, f: Tensor) -> Tensor:
        f, squeeze = _batched(f, 4)
        b, c = f.shape[:2]
        w = F.reshape(self.gate(F.reshape(F.global_avg_pool(f), (b, c))), (b, c, 1, 1))
        out = F.mul(f, w)
        return F.reshape(out, out.shape[1:]) if squeeze else out

    def tokens(self, t: Tensor) -> Tensor:
        """Same gate applied to B x L x C tokens."""
        w = self.gate(F.mean(t, axis=1))
        return F.mul(t, F.reshape(w, (w.shape[0], 1, w.shape[1])))


def channel_attention(p: ChannelAttention, f: Tensor) -> Tensor:
    return p(f)


class Mlp(Module):
    def __init__(self, rng: np.random.Generator, dim: int, ratio: int = 4):
        self.fc1 = Linear(rng, dim, ratio * dim)
        self.fc2 = Linear(rng, ratio * dim, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class ConvMixer(Module):
    """Residual CNN token mixer used by the convolutional ablation: x + conv(relu(conv(x)))."""

    def __init__(self, rng: np.random.Generator, channels: int):
        self.conv1 = Conv2d(rng, channels, channels)
        self.conv2 = Conv2d(rng, channels, channels)

    def __call__(self, f: Tensor) -> Tensor:
        return F.add(f, self.conv2(F.relu(self.conv1(f))))


class MMABlock(Module):
    """u = f + mixer(LN1 f) + CA(LN1 f); out = u + MLP(LN2 u)."""

    def __init__(
        self,
        rng: np.random.Generator,
        dim: int,
        mixer: str = "vim",
        use_channel_attention: bool = True,
        state: int = 16,
        mlp_ratio: int = 4,
        ca_reduction: int = 16,
        expand: int = 2,
        conv_width: int = 4,
    ):
        self.norm1 = LayerNorm(dim)
        if mixer == "vim":
            self.mixer = VimBlock(rng, dim, state=state, expand=expand, conv_width=conv_width)
        elif mixer == "cnn":
            self.mixer = ConvMixer(rng, dim)
        else:
            raise ContractError(f"unknown token mixer {mixer!r}")
        self.mixer_kind = mixer
        self.ca = ChannelAttention(rng, dim, ca_reduction) if use_channel_attention else None
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(rng, dim, mlp_ratio)

    def forward_tokens(self, t: Tensor, height: int, width: int, pos: Tensor | None = None) -> Tensor:
        n1 = self.norm1(t)
        if self.mixer_kind == "vim":
            mixed = self.mixer(n1 if pos is None else F.add(n1, pos))
        else:
            grid = detokenize(TokenGrid(n1 if pos is None else F.add(n1, pos), height, width))
            mixed = tokenize(self.mixer(grid)).tokens
        u = F.add(t, mixed)
        if self.ca is not None:
            u = F.add(u, self.ca.tokens(n1))
        return F.add(u, self.mlp(self.norm2(u)))

    def __call__(self, f: Tensor, pos: Tensor | None = None) -> Tensor:
        f, squeeze = _batched(f, 4)
        grid = tokenize(f)
        out = detokenize(TokenGrid(self.forward_tokens(grid.tokens, grid.height, grid.width, pos), grid.height, grid.width))
        return F.reshape(out, out.shape[1:]) if squeeze else out


def mma_block(p: MMABlock, f: Tensor, pos: Tensor | None = None) -> Tensor:
    return p(f, pos)


def pixel_shuffle(x: Tensor, s: int) -> Tensor:
    """out[c, s*i + di, s*j + dj] = in[c*s*s + di*s + dj, i, j]."""
    x, squeeze = _batched(x, 4)
    b, ch, h, w = x.shape
    if ch % (s * s):
        raise ContractError(f"{ch} channels are not divisible by scale^2 = {s * s}")
    c = ch // (s * s)
    out = F.reshape(F.transpose(F.reshape(x, (b, c, s, s, h, w)), (0, 1, 4, 2, 5, 3)), (b, c, h * s, w * s))
    return F.reshape(out, out.shape[1:]) if squeeze else out


def pixel_unshuffle(x: Tensor, s: int) -> Tensor:
    x, squeeze = _batched(x, 4)
    b, c, hs, ws = x.shape
    if hs % s or ws % s:
        raise ContractError(f"spatial size {hs} x {ws} is not divisible by {s}")
    h, w = hs // s, ws // s
    out = F.reshape(F.transpose(F.reshape(x, (b, c, h, s, w, s)), (0, 1, 3, 5, 2, 4)), (b, c * s * s, h, w))
    return F.reshape(out, out.shape[1:]) if squeeze else out
