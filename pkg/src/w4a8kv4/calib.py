"""Calibration-time transforms that make W4A8KV4 quantization accurate.

All weight matrices use the ``(out_features, in_features)`` convention, so a
linear layer computes ``x @ w.T``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidInput, ShapeError, Unsupported

DEFAULT_CLIP_GRID = tuple(np.linspace(0.5, 1.0, 20))
ROPE_BASE = 10000.0


@dataclass(frozen=True)
class SmoothScales:
    lam: np.ndarray  # (n_kv_heads * head_dim,)
    alpha: float
    head_dim: int

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=np.float64)
        if lam.ndim != 1 or lam.size % self.head_dim:
            raise ShapeError("lambda length must be a multiple of head_dim")
        if not np.all(np.isfinite(lam)) or np.any(lam <= 0):
            raise InvalidInput("smoothing scales must be finite and positive")
        half = self.head_dim // 2
        per_head = lam.reshape(-1, self.head_dim)
        if not np.array_equal(per_head[:, :half], per_head[:, half:]):
            raise InvalidInput("smoothing scales break the RoPE pairing (i, i + D/2)")

    @property
    def n_heads(self) -> int:
        return self.lam.size // self.head_dim


def _guard(x: np.ndarray) -> np.ndarray:
    return np.where(x == 0, 1.0, x)


def smooth_attention_scales(k_samples, alpha: float = 0.5, head_dim: int | None = None) -> SmoothScales:
    """Per-channel key scales ``max(|K_i|, |K_{i+D/2}|) ** alpha``, computed per head.

    ``k_samples`` is ``tokens x (n_kv_heads * head_dim)``; a single head is the
    common case where ``head_dim`` equals the column count.
    """
    k = np.asarray(k_samples, dtype=np.float64)
    if k.ndim != 2:
        raise ShapeError("k_samples must be tokens x channels")
    d = k.shape[1] if head_dim is None else int(head_dim)
    if d % 2:
        raise ShapeError(f"head_dim must be even, got {d}")
    if k.shape[1] % d:
        raise ShapeError("channel count is not a multiple of head_dim")
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInput("alpha must lie in [0, 1]")
    amax = np.abs(k).max(axis=0).reshape(-1, d)
    half = d // 2
    paired = np.maximum(amax[:, :half], amax[:, half:])
    lam = _guard(paired) ** alpha
    lam = np.concatenate([lam, lam], axis=1).reshape(-1)
    return SmoothScales(lam, alpha, d)


def fuse_smooth_into_projections(w_q, w_k, s: SmoothScales):
    """Scale query rows by lambda and key rows by 1/lambda.

    Query heads beyond the key-head count (grouped-query attention) reuse the
    scales of the key head they attend to.
    """
    w_q = np.asarray(w_q, dtype=np.float64)
    w_k = np.asarray(w_k, dtype=np.float64)
    if w_k.shape[0] != s.lam.size:
        raise ShapeError(f"w_k has {w_k.shape[0]} rows, scales cover {s.lam.size}")
    if w_q.shape[0] % w_k.shape[0] or w_q.shape[1] != w_k.shape[1]:
        raise ShapeError("w_q rows must be a multiple of w_k rows with equal in_features")
    r = w_q.shape[0] // w_k.shape[0]
    lam_q = np.repeat(s.lam.reshape(s.n_heads, 1, s.head_dim), r, axis=1).reshape(-1)
    return w_q * lam_q[:, None], w_k / s.lam[:, None]


def rope(x, position, base: float = ROPE_BASE):
    """Rotary embedding pairing channel ``i`` with ``i + D/2``.

    ``x`` has shape ``(..., D)``; ``position`` is a scalar or broadcasts
    against the leading axes.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    if d % 2:
        raise ShapeError("rope needs an even head dimension")
    half = d // 2
    theta = base ** (-2.0 * np.arange(half) / d)
    ang = np.asarray(position, dtype=np.float64)[..., None] * theta
    cos, sin = np.cos(ang), np.sin(ang)
    a, b = x[..., :half], x[..., half:]
    return np.concatenate([a * cos - b * sin, b * cos + a * sin], axis=-1)


def hadamard(n: int) -> np.ndarray:
    """Orthonormal Sylvester-Hadamard matrix of order ``n`` (a power of two)."""
    if n < 1 or n & (n - 1):
        raise Unsupported(f"Hadamard order must be a power of two, got {n}")
    h = np.ones((1, 1))
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    return h / np.sqrt(n)


def rotate_block_input(x, w, q):
    """Return ``(x @ q, w @ q)`` so that ``(x q)(w q)^T == x w^T``."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (x.shape[1], x.shape[1]) or w.shape[1] != x.shape[1]:
        raise ShapeError("rotation must be k x k with k the shared dimension")
    return x @ q, w @ q


def output_smooth_scales(x_absmax, w, alpha: float = 0.1) -> np.ndarray:
    """``max|X_j| ** alpha / max|W_{:,j}| ** (1 - alpha)`` with zero guards."""
    w = np.asarray(w, dtype=np.float64)
    xa = np.asarray(x_absmax, dtype=np.float64)
    if xa.shape != (w.shape[1],):
        raise ShapeError("stats length must equal in_features")
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInput("alpha must lie in [0, 1]")
    wa = np.abs(w).max(axis=0)
    return _guard(_guard(xa) ** alpha / _guard(wa) ** (1.0 - alpha))


def smooth_output_module(stats, w, alpha: float = 0.1):
    """Smooth an output module: activations are divided by lambda, weights multiplied.

    Returns ``(lam, w * lam)``; the caller folds ``1 / lam`` into whatever
    produces the activations.
    """
    lam = output_smooth_scales(stats, w, alpha)
    return lam, np.asarray(w, dtype=np.float64) * lam[None, :]


def reorder_channels(stats, g: int) -> np.ndarray:
    """Group channels by salience.

    Channels are ranked by ``max|X|`` descending (ties keep the lower index
    first) and cut into contiguous groups of ``g``; inside a group the original
    index order is kept, so already-ranked input gives the identity.
    """
    stats = np.asarray(stats, dtype=np.float64)
    if stats.ndim != 1:
        raise ShapeError("stats must be 1-D")
    if g < 1 or stats.size % g:
        raise ShapeError(f"group size {g} does not divide {stats.size} channels")
    ranked = np.argsort(-stats, kind="stable")
    return np.sort(ranked.reshape(-1, g), axis=1).reshape(-1)


def inverse_permutation(perm) -> np.ndarray:
    perm = np.asarray(perm)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return inv


def apply_permutation(x, w, perm):
    """Permute the shared reduction dimension of both GEMM operands."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    perm = np.asarray(perm)
    k = x.shape[1]
    if w.shape[1] != k or perm.shape != (k,) or not np.array_equal(np.sort(perm), np.arange(k)):
        raise ShapeError("perm must be a permutation of the shared dimension")
    return x[:, perm], w[:, perm]


def clip_weight(w, alpha: float, g: int | None = None) -> np.ndarray:
    """Clamp each group (or row when ``g`` is None) to ``alpha * [min, max]``."""
    w = np.asarray(w, dtype=np.float64)
    n, k = w.shape
    g = k if g is None else g
    grp = w.reshape(n, k // g, g)
    lo = alpha * np.minimum(grp.min(axis=-1, keepdims=True), 0.0)
    hi = alpha * np.maximum(grp.max(axis=-1, keepdims=True), 0.0)
    return np.clip(grp, lo, hi).reshape(n, k)


def clip_search(
    w,
    x_calib,
    quantizer: Callable[[np.ndarray, float], np.ndarray],
    grid: Sequence[float] = DEFAULT_CLIP_GRID,
    objective: str = "layer",
    block: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
) -> float:
    """Grid-search the clip ratio minimizing output squared error.

    ``objective="layer"`` compares ``x @ w.T``; ``objective="block"`` compares
    ``block(x, w)``. Ties go to the larger ratio.
    """
    grid = sorted({float(a) for a in grid}, reverse=True)
    if not grid:
        raise InvalidInput("clip grid is empty")
    if any(not 0.0 < a <= 1.0 for a in grid):
        raise InvalidInput("clip ratios must lie in (0, 1]")
    if objective == "layer":
        f = lambda x, wt: x @ wt.T  # noqa: E731
    elif objective == "block":
        if block is None:
            raise InvalidInput("block objective needs a block callable")
        f = block
    else:
        raise InvalidInput(f"unknown objective {objective!r}")
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x_calib, dtype=np.float64)
    ref = f(x, w)
    best, best_err = grid[0], np.inf
    for a in grid:
        err = float(np.sum((ref - f(x, quantizer(w, a))) ** 2))
        if err < best_err:
            best, best_err = a, err
    return best
