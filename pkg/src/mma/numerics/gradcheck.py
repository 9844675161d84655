"""Central finite-difference checks of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from mma.numerics.tensor import Tensor, backward, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |analytic - numeric| / (|numeric| + 1e-8)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)))


def numeric_grad(
    fn: Callable[[], Tensor],
    tensor: Tensor,
    h: float,
    indices: Sequence[tuple[int, ...]] | None = None,
) -> tuple[list[tuple[int, ...]], np.ndarray]:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``tensor`` (mutated in place)."""
    if indices is None:
        indices = list(np.ndindex(tensor.shape))
    out = np.empty(len(indices))
    with no_grad():
        for k, idx in enumerate(indices):
            orig = tensor.data[idx]
            tensor.data[idx] = orig + h
            fp = fn().item()
            tensor.data[idx] = orig - h
            fm = fn().item()
            tensor.data[idx] = orig
            out[k] = (fp - fm) / (2.0 * h)
    return list(indices), out


def check_gradients(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error between tape and finite-difference gradients.

    ``fn`` closes over ``tensors`` and must return a scalar. When
    ``max_entries`` is set, that many entries are sampled across all tensors.
    """
    for t in tensors:
        t.grad = None
    backward(fn())
    picks: list[tuple[int, tuple[int, ...]]] = []
    for ti, t in enumerate(tensors):
        picks.extend((ti, idx) for idx in np.ndindex(t.shape))
    if max_entries is not None and len(picks) > max_entries:
        rng = rng or np.random.default_rng(0)
        chosen = rng.choice(len(picks), size=max_entries, replace=False)
        picks = [picks[i] for i in sorted(chosen)]
    analytic, numeric = [], []
    for ti, idx in picks:
        t = tensors[ti]
        _, num = numeric_grad(fn, t, h, [idx])
        analytic.append(0.0 if t.grad is None else t.grad[idx])
        numeric.append(num[0])
    return relative_error(np.array(analytic), np.array(numeric))
