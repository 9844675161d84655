"""State-space kernels and the bidirectional selective-scan token mixer.

The linear time-invariant path (``discretize_zoh``, ``scan_sequential``,
``kernel_form``) works on plain numpy arrays and doubles as an oracle for the
selective path, which runs on the autodiff engine.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
import scipy.linalg

from mma.numerics import ContractError, Module, Tensor, functional as F, make_node
from mma.numerics.layers import Linear, _param, kaiming_uniform

ZOH_EPS = 1e-8


@dataclass
class SsmParams:
    """Continuous parameters of one single-input single-output SSM head.

    ``A`` is either a vector (diagonal state matrix) or a dense N x N matrix.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    delta: float

    @property
    def N(self) -> int:
        return int(np.shape(self.A)[0])


@dataclass
class DiscreteParams:
    """Discrete multipliers. With ``time_varying`` the leading axis of both arrays is time."""

    a_bar: np.ndarray
    b_bar: np.ndarray
    time_varying: bool = False

    @property
    def diagonal(self) -> bool:
        return np.ndim(self.a_bar) == (2 if self.time_varying else 1)


def discretize_zoh(p: SsmParams) -> DiscreteParams:
    """Zero-order hold: a_bar = exp(dA), b_bar = (dA)^-1 (exp(dA) - I) dB."""
    if not np.all(np.asarray(p.delta) > 0):
        raise ContractError(f"delta must be positive, got {p.delta}")
    A = np.asarray(p.A, dtype=np.float64)
    B = np.asarray(p.B, dtype=np.float64).reshape(-1)
    dA = p.delta * A
    if A.ndim == 1:
        a_bar = np.exp(dA)
        small = np.abs(dA) < ZOH_EPS
        safe = np.where(small, 1.0, dA)
        ratio = np.where(small, 1.0, np.expm1(safe) / safe)
        return DiscreteParams(a_bar, ratio * p.delta * B)
    a_bar = scipy.linalg.expm(dA)
    b_bar = np.linalg.solve(dA, (a_bar - np.eye(A.shape[0])) @ (p.delta * B))
    return DiscreteParams(a_bar, b_bar)


def scan_sequential(d: DiscreteParams, C: np.ndarray, x: np.ndarray) -> np.ndarray:
    """h_t = a_bar h_{t-1} + b_bar x_t, y_t = C h_t, from h_0 = 0."""
    x = np.asarray(x)
    C = np.asarray(C).reshape(-1)
    h = np.zeros(C.shape[0], dtype=np.result_type(x, d.a_bar))
    y = np.empty(x.shape[0], dtype=h.dtype)
    for t in range(x.shape[0]):
        a = d.a_bar[t] if d.time_varying else d.a_bar
        b = d.b_bar[t] if d.time_varying else d.b_bar
        h = (a * h if np.ndim(a) == 1 else a @ h) + b * x[t]
        y[t] = C @ h
    return y


def kernel_form(d: DiscreteParams, C: np.ndarray, M: int) -> np.ndarray:
    """K = (C b_bar, C a_bar b_bar, ..., C a_bar^(M-1) b_bar)."""
    if d.time_varying:
        raise ContractError("kernel form is only valid for time-invariant parameters")
    C = np.asarray(C).reshape(-1)
    if d.diagonal:
        dtype = np.result_type(d.a_bar, d.b_bar, C)
        powers = d.a_bar[None, :] ** np.arange(M, dtype=dtype)[:, None]
        return powers @ (C * d.b_bar)
    K = np.empty(M, dtype=np.result_type(d.a_bar, C))
    v = np.asarray(d.b_bar, dtype=K.dtype)
    for k in range(M):
        K[k] = C @ v
        v = d.a_bar @ v
    return K


def causal_conv(x: np.ndarray, K: np.ndarray) -> np.ndarray:
    """y_t = sum_{k <= t} K_k x_{t-k}."""
    return np.convolve(x, K)[: len(x)]


def compose(p: tuple, q: tuple) -> tuple:
    """Apply step ``p`` then step ``q``: (a1, b1) o (a2, b2) = (a2 a1, a2 b1 + b2)."""
    a1, b1 = p
    a2, b2 = q
    return a2 * a1, a2 * b1 + b2


def scan_pairs_sequential(a: np.ndarray, b: np.ndarray, axis: int = 0) -> np.ndarray:
    """Reference loop for h_t = a_t h_{t-1} + b_t along ``axis``."""
    a = np.moveaxis(a, axis, 0)
    b = np.moveaxis(b, axis, 0)
    h = np.empty(np.broadcast_shapes(a.shape, b.shape), dtype=np.result_type(a, b))
    prev = np.zeros(h.shape[1:], dtype=h.dtype)
    for t in range(h.shape[0]):
        prev = a[t] * prev + b[t]
        h[t] = prev
    return np.ascontiguousarray(np.moveaxis(h, 0, axis))


def scan_parallel(a: np.ndarray, b: np.ndarray, axis: int = 0) -> np.ndarray:
    """Work-efficient up-sweep/down-sweep scan of the affine recurrence along ``axis``.

    The sequence is padded with identity pairs (1, 0) to a power of two so the
    reduction tree, and therefore the rounding, is fixed for a given length.
    """
    a = np.moveaxis(np.asarray(a), axis, 0)
    b = np.moveaxis(np.asarray(b), axis, 0)
    shape = np.broadcast_shapes(a.shape, b.shape)
    dtype = np.result_type(a, b)
    n = shape[0]
    m = 1 << max(n - 1, 0).bit_length()
    acc_a = np.ones((m,) + shape[1:], dtype=dtype)
    acc_b = np.zeros((m,) + shape[1:], dtype=dtype)
    acc_a[:n] = a
    acc_b[:n] = b

    d = 1
    while d < m:
        right = slice(2 * d - 1, m, 2 * d)
        left = slice(d - 1, m, 2 * d)
        acc_b[right] += acc_a[right] * acc_b[left]
        acc_a[right] *= acc_a[left]
        d *= 2

    acc_a[m - 1] = 1
    acc_b[m - 1] = 0
    d = m // 2
    while d >= 1:
        right = slice(2 * d - 1, m, 2 * d)
        left = slice(d - 1, m, 2 * d)
        ta = acc_a[left].copy()
        tb = acc_b[left].copy()
        acc_a[left] = acc_a[right]
        acc_b[left] = acc_b[right]
        acc_b[right] = ta * acc_b[right] + tb
        acc_a[right] = ta * acc_a[right]
        d //= 2

    # acc_b now holds the exclusive prefix applied to h_0 = 0, i.e. h_{t-1}.
    h = a * acc_b[:n] + b
    return np.ascontiguousarray(np.moveaxis(h, 0, axis))


def scan_chunked(a: np.ndarray, b: np.ndarray, axis: int = 0, chunk: int | None = None) -> np.ndarray:
    """Two-level blocked scan: local scans inside chunks, then a carry pass across chunks.

    Same recurrence as :func:`scan_pairs_sequential` with about 2 sqrt(L)
    vectorized steps instead of L; the fastest choice on a single CPU core.
    """
    a = np.moveaxis(np.asarray(a), axis, 0)
    b = np.moveaxis(np.asarray(b), axis, 0)
    shape = np.broadcast_shapes(a.shape, b.shape)
    dtype = np.result_type(a, b)
    n = shape[0]
    c = chunk or max(1, int(np.ceil(np.sqrt(n))))
    nc = -(-n // c)
    acc_a = np.ones((nc * c,) + shape[1:], dtype=dtype)
    acc_b = np.zeros((nc * c,) + shape[1:], dtype=dtype)
    acc_a[:n] = a
    acc_b[:n] = b
    acc_a = acc_a.reshape((nc, c) + shape[1:])
    acc_b = acc_b.reshape((nc, c) + shape[1:])
    local = np.empty_like(acc_b)
    decay = np.empty_like(acc_a)
    h = np.zeros((nc,) + shape[1:], dtype=dtype)
    p = np.ones((nc,) + shape[1:], dtype=dtype)
    for j in range(c):
        h = acc_a[:, j] * h + acc_b[:, j]
        p = acc_a[:, j] * p
        local[:, j] = h
        decay[:, j] = p
    carry = np.zeros((nc,) + shape[1:], dtype=dtype)
    run = np.zeros(shape[1:], dtype=dtype)
    for k in range(nc):
        carry[k] = run
        run = decay[k, -1] * run + local[k, -1]
    out = (local + decay * carry[:, None]).reshape((nc * c,) + shape[1:])[:n]
    return np.ascontiguousarray(np.moveaxis(out, 0, axis))


@numba.njit(cache=True)
def _scan_kernel(a, b, out):
    p_count, length, width = a.shape
    for p in range(p_count):
        for j in range(width):
            out[p, 0, j] = b[p, 0, j]
        for t in range(1, length):
            for j in range(width):
                out[p, t, j] = a[p, t, j] * out[p, t - 1, j] + b[p, t, j]


def scan_compiled(a: np.ndarray, b: np.ndarray, axis: int = 0) -> np.ndarray:
    """Sequential recurrence compiled to a native loop; same order of operations as the reference."""
    shape = np.broadcast_shapes(np.shape(a), np.shape(b))
    dtype = np.result_type(a, b)
    axis = axis % len(shape)
    lead = int(np.prod(shape[:axis], dtype=np.int64))
    trail = int(np.prod(shape[axis + 1 :], dtype=np.int64))
    view = (lead, shape[axis], trail)
    a3 = np.ascontiguousarray(np.broadcast_to(a, shape), dtype=dtype).reshape(view)
    b3 = np.ascontiguousarray(np.broadcast_to(b, shape), dtype=dtype).reshape(view)
    out = np.empty(view, dtype=dtype)
    _scan_kernel(a3, b3, out)
    return out.reshape(shape)


_SCANS = {
    "parallel": scan_parallel,
    "sequential": scan_pairs_sequential,
    "chunked": scan_chunked,
    "compiled": scan_compiled,
}


def _shift(x: np.ndarray, axis: int, fill: float) -> np.ndarray:
    """out[t] = x[t - 1] along ``axis``, with ``fill`` at t = 0."""
    out = np.empty_like(x)
    head = [slice(None)] * x.ndim
    head[axis] = slice(0, 1)
    body = list(head)
    body[axis] = slice(1, None)
    src = list(head)
    src[axis] = slice(0, -1)
    out[tuple(head)] = fill
    out[tuple(body)] = x[tuple(src)]
    return out


def linear_scan(a: Tensor, b: Tensor, axis: int = 1, method: str = "compiled") -> Tensor:
    """Differentiable h_t = a_t h_{t-1} + b_t.

    Backward runs the same scan in reverse time on the adjoint:
    lam_t = dh_t + a_{t+1} lam_{t+1}; then db = lam and da_t = lam_t h_{t-1}.
    """
    if a.shape != b.shape:
        raise ContractError(f"scan operands differ in shape: {a.shape} vs {b.shape}")
    scan = _SCANS[method]
    h = scan(a.data, b.data, axis=axis)

    def bw(g):
        a_next = _shift(np.flip(a.data, axis=axis), axis, 1.0)
        lam = np.ascontiguousarray(np.flip(scan(a_next, np.flip(g, axis=axis), axis=axis), axis=axis))
        ga = lam * _shift(h, axis, 0.0) if a.requires_grad else None
        return ga, lam

    return make_node(h, (a, b), bw)


@numba.njit(cache=True)
def _selective_forward(u, delta, A, Bm, Cm, hs, y):
    # time-major loops keep every access to hs contiguous
    batch, length, width = u.shape
    state = A.shape[1]
    for b in range(batch):
        for t in range(length):
            for e in range(width):
                d = delta[b, t, e]
                du = d * u[b, t, e]
                acc = 0.0
                for n in range(state):
                    prev = hs[b, t - 1, e, n] if t > 0 else 0.0
                    h = np.exp(d * A[e, n]) * prev + du * Bm[b, t, n]
                    hs[b, t, e, n] = h
                    acc += Cm[b, t, n] * h
                y[b, t, e] = acc


@numba.njit(cache=True)
def _selective_backward(g, u, delta, A, Bm, Cm, hs, gu, gdelta, gA, gB, gC):
    batch, length, width = u.shape
    state = A.shape[1]
    carry = np.zeros((width, state), dtype=hs.dtype)
    for b in range(batch):
        carry[:, :] = 0.0
        for t in range(length - 1, -1, -1):
            for e in range(width):
                d = delta[b, t, e]
                du = d * u[b, t, e]
                gy = g[b, t, e]
                g_du = 0.0
                g_d = 0.0
                for n in range(state):
                    a = np.exp(d * A[e, n])
                    lam = gy * Cm[b, t, n] + carry[e, n]
                    gC[b, t, n] += gy * hs[b, t, e, n]
                    gB[b, t, n] += lam * du
                    g_du += lam * Bm[b, t, n]
                    prev = hs[b, t - 1, e, n] if t > 0 else 0.0
                    g_da = lam * prev * a
                    g_d += g_da * A[e, n]
                    gA[e, n] += g_da * d
                    carry[e, n] = a * lam
                gu[b, t, e] = g_du * d
                gdelta[b, t, e] = g_d + g_du * u[b, t, e]


def _selective_compiled(u, delta, A, B, C):
    dtype = u.dtype
    arrs = [np.ascontiguousarray(t.data, dtype=dtype) for t in (u, delta, A, B, C)]
    ud, dd, Ad, Bd, Cd = arrs
    batch, length, width = ud.shape
    hs = np.empty((batch, length, width, Ad.shape[1]), dtype=dtype)
    y = np.empty_like(ud)
    _selective_forward(ud, dd, Ad, Bd, Cd, hs, y)

    def bw(g):
        g = np.ascontiguousarray(g, dtype=dtype)
        gu, gdelta = np.empty_like(ud), np.empty_like(dd)
        gA, gB, gC = np.zeros_like(Ad), np.zeros_like(Bd), np.zeros_like(Cd)
        _selective_backward(g, ud, dd, Ad, Bd, Cd, hs, gu, gdelta, gA, gB, gC)
        return gu, gdelta, gA, gB, gC

    return y, bw


def _selective_numpy(u, delta, A, B, C, scan):
    a_bar = np.exp(delta.data[..., None] * A.data)
    du = delta.data * u.data
    h = scan(a_bar, du[..., None] * B.data[:, :, None, :], axis=1)
    y = np.matmul(h, C.data[..., None])[..., 0]

    def bw(g):
        lam = np.flip(
            scan(_shift(np.flip(a_bar, axis=1), 1, 1.0), np.flip(g[..., None] * C.data[:, :, None, :], axis=1), axis=1),
            axis=1,
        )
        gC = np.matmul(g[:, :, None, :], h)[:, :, 0, :]
        gB = np.matmul(du[:, :, None, :], lam)[:, :, 0, :]
        g_du = np.matmul(lam, B.data[..., None])[..., 0]
        g_dA = lam * _shift(h, 1, 0.0) * a_bar
        g_delta = (g_dA * A.data).sum(axis=-1) + g_du * u.data
        gA = np.einsum("blen,ble->en", g_dA, delta.data, optimize=True)
        return g_du * delta.data, g_delta, gA, gB, gC

    return y, bw


def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, method: str = "compiled") -> Tensor:
    """Time-varying diagonal SSM over a batch of sequences, as one fused primitive.

    Shapes: u, delta (batch, L, E); A (E, N); B, C (batch, L, N). Discretization
    is a_bar = exp(delta A) with the Euler input weight b_bar = delta B, so
    h_t = a_bar_t h_{t-1} + delta_t B_t u_t and y_t = C_t . h_t per channel.
    ``method`` picks the recurrence evaluator; "compiled" fuses everything
    into native loops, the others materialize the (batch, L, E, N) operands
    and call the named numpy scan.
    """
    if u.shape != delta.shape or u.ndim != 3:
        raise ContractError(f"u and delta must share a (batch, L, E) shape, got {u.shape}, {delta.shape}")
    if B.shape != C.shape or B.shape[:2] != u.shape[:2] or A.shape != (u.shape[2], B.shape[2]):
        raise ContractError("inconsistent selective-scan parameter shapes")
    if method == "compiled":
        y, bw = _selective_compiled(u, delta, A, B, C)
    else:
        y, bw = _selective_numpy(u, delta, A, B, C, _SCANS[method])
    return make_node(y, (u, delta, A, B, C), bw)


def _inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


class SelectiveSSM(Module):
    """Input-dependent SSM: delta, B and C are linear functions of each token."""

    def __init__(self, rng: np.random.Generator, dim: int, state: int, dt_min: float = 1e-3, dt_max: float = 1e-1):
        self.delta_proj = Linear(rng, dim, dim, bias=True)
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=dim))
        self.delta_proj.bias = _param(_inverse_softplus(dt))
        self.B_proj = Linear(rng, dim, state, bias=False)
        self.C_proj = Linear(rng, dim, state, bias=False)
        # A = -exp(A_log) stays negative; initial A_n = -(n + 1).
        self.A_log = _param(np.log(np.tile(np.arange(1, state + 1, dtype=np.float64), (dim, 1))))
        self.method = "compiled"

    @property
    def A(self) -> Tensor:
        return F.neg(F.exp(self.A_log))

    def __call__(self, u: Tensor) -> Tensor:
        delta = F.softplus(self.delta_proj(u))
        return selective_scan(u, delta, self.A, self.B_proj(u), self.C_proj(u), method=self.method)


class VimDirection(Module):
    """Causal depthwise conv, SiLU, then a selective SSM."""

    def __init__(self, rng: np.random.Generator, dim: int, state: int, conv_width: int = 4):
        self.conv_weight = _param(kaiming_uniform(rng, (dim, conv_width), conv_width))
        self.conv_bias = _param(np.zeros(dim))
        self.ssm = SelectiveSSM(rng, dim, state)

    def __call__(self, x: Tensor) -> Tensor:
        return self.ssm(F.silu(F.conv1d_causal_depthwise(x, self.conv_weight, self.conv_bias)))


class VimBlock(Module):
    """Bidirectional gated selective-scan mixer over B x L x D tokens.

    out = out_proj(silu(z) * (fwd(x) + flip(bwd(flip(x))))) where x and z come
    from one bias-free input projection of width 2E.
    """

    def __init__(self, rng: np.random.Generator, dim: int, state: int = 16, expand: int = 2, conv_width: int = 4):
        inner = expand * dim
        self.inner = inner
        self.in_proj = Linear(rng, dim, 2 * inner, bias=False)
        self.forward_dir = VimDirection(rng, inner, state, conv_width)
        self.backward_dir = VimDirection(rng, inner, state, conv_width)
        self.out_proj = Linear(rng, inner, dim, bias=False)

    def set_scan_method(self, method: str) -> None:
        if method not in _SCANS:
            raise ContractError(f"unknown scan method {method!r}")
        self.forward_dir.ssm.method = method
        self.backward_dir.ssm.method = method

    def __call__(self, tokens: Tensor) -> Tensor:
        squeeze = tokens.ndim == 2
        if squeeze:
            tokens = F.reshape(tokens, (1,) + tokens.shape)
        x, z = F.split(self.in_proj(tokens), [self.inner, self.inner], axis=-1)
        y = F.add(self.forward_dir(x), F.flip(self.backward_dir(F.flip(x, 1)), 1))
        out = self.out_proj(F.mul(y, F.silu(z)))
        return F.reshape(out, out.shape[1:]) if squeeze else out
