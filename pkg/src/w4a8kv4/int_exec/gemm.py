"""Integer GEMM datapaths for W4A8 with zero points handled after multiplication.

Activations arrive as per-token symmetric INT8 codes ``qx`` (``m x k``) with
scales ``s_x`` (``m``). Weights are ``n x k`` and the output is ``m x n``.
Epilogues accept float64 or object (``Fraction``) arrays, which lets tests
check the algebra in exact rational arithmetic.
"""

from __future__ import annotations

import numpy as np

from ..errors import AccumulatorOverflow, ShapeError
from ..progressive import ProgressiveWeight
from .lanes import broadcast_byte, lane_mul, lane_sub, signed_lanes, unpack_rlp
from .layout import TILE, PackedWeight, pack_weight, word_positions

MAX_K = 2**16


def gemm_int8(qx, qw) -> np.ndarray:
    """Exact int8 x int8 -> int32 GEMM, ``qx`` is ``m x k`` and ``qw`` is ``k x n``."""
    qx = np.asarray(qx, dtype=np.int64)
    qw = np.asarray(qw, dtype=np.int64)
    if qx.ndim != 2 or qw.ndim != 2 or qx.shape[1] != qw.shape[0]:
        raise ShapeError(f"cannot multiply {qx.shape} by {qw.shape}")
    k = qx.shape[1]
    if k > MAX_K:
        # 128 * 128 * 2**16 = 2**30 keeps every partial sum inside int32.
        raise AccumulatorOverflow(f"k={k} exceeds the int32 accumulator bound {MAX_K}")
    for name, a in (("qx", qx), ("qw", qw)):
        if a.size and (a.min() < -128 or a.max() > 127):
            raise ShapeError(f"{name} has values outside int8")
    return (qx @ qw).astype(np.int32)


def precompute_token_sums(x) -> np.ndarray:
    """``t_x = X 1_k``, one sum per token."""
    x = np.asarray(x)
    return x.sum(axis=1)


def _epilogue_dtype(*arrays) -> type | None:
    return object if any(np.asarray(a).dtype == object for a in arrays) else None


def gemm_w4a8_per_channel(qx, s_x, qw_codes, z_w, s_w, t_x) -> np.ndarray:
    """Per-channel W4A8 GEMM with the zero point moved to a rank-1 epilogue.

    ``O = (Qx Qw^T) * (s_x outer s_w) - t_x outer (z_w * s_w)``. For the result
    to equal the dequantize-first path exactly, ``t_x`` must be the token sums
    of the dequantized activations ``Qx * s_x``.
    """
    qw_codes = np.asarray(qw_codes)
    n, k = qw_codes.shape
    qx = np.asarray(qx)
    s_x, s_w, z_w, t_x = (np.asarray(a) for a in (s_x, s_w, z_w, t_x))
    if qx.shape[1] != k or s_x.shape != (qx.shape[0],) or t_x.shape != (qx.shape[0],):
        raise ShapeError("activation operands do not conform")
    if s_w.shape != (n,) or z_w.shape != (n,):
        raise ShapeError("weight scales/zeros must have one entry per output channel")
    acc = gemm_int8(qx, qw_codes.T)
    if _epilogue_dtype(s_x, s_w, t_x) is object:
        acc = acc.astype(object)
        z_w = z_w.astype(object)
    return acc * (s_x[:, None] * s_w[None, :]) - t_x[:, None] * (z_w * s_w)[None, :]


def reference_per_channel(qx, s_x, qw_codes, z_w, s_w) -> np.ndarray:
    """Dequantize both operands first, then multiply."""
    qx = np.asarray(qx)
    qw = np.asarray(qw_codes)
    s_x, s_w, z_w = (np.asarray(a) for a in (s_x, s_w, z_w))
    if _epilogue_dtype(s_x, s_w) is object:
        qx, qw, z_w = qx.astype(object), qw.astype(object), z_w.astype(object)
    x_hat = qx * s_x[:, None]
    w_hat = (qw - z_w[:, None]) * s_w[:, None]
    return x_hat @ w_hat.T


def _check_group_layout(pw: ProgressiveWeight, packed: PackedWeight) -> None:
    if packed.shape != pw.shape:
        raise ShapeError(f"packed weight {packed.shape} does not match {pw.shape}")
    if pw.group_size % TILE:
        raise ShapeError("packed per-group path needs a group size that is a multiple of 32")


def decode_tile_column(packed: PackedWeight, pw: ProgressiveWeight, kt: int, checked: bool = True) -> np.ndarray:
    """Main-loop weight decode for one 32-wide slice of k: ``n x 32`` int8.

    Per word: three-op unpack, lane multiply by the group scale, lane subtract
    of ``zero * scale``; then lanes are read back as signed bytes.
    """
    n, k = pw.shape
    words = np.ascontiguousarray(packed.tiles[:, kt]).view("<u4")  # (n // 32, 128)
    rows, cols = word_positions(n, TILE)
    rows, cols = rows[:, 0], cols[:, 0]
    grp = (kt * TILE + cols) // pw.group_size
    s1 = pw.scales_l2[rows, grp].astype(np.uint32)
    zs = broadcast_byte(pw.zeros[rows, grp].astype(np.uint32) * s1)
    low, high = unpack_rlp(words)
    lo = signed_lanes(lane_sub(lane_mul(low, s1, checked=checked), zs))
    hi = signed_lanes(lane_sub(lane_mul(high, s1, checked=checked), zs))
    out = np.empty((n, TILE), dtype=np.int8)
    lane = np.arange(4)
    out[rows[..., None], cols[..., None] + lane] = lo
    out[rows[..., None], cols[..., None] + 16 + lane] = hi
    return out


def dequant_stream(packed: PackedWeight, pw: ProgressiveWeight, checked: bool = True) -> np.ndarray:
    """The full ``n x k`` int8 operand stream the main loop feeds to the GEMM."""
    _check_group_layout(pw, packed)
    k = pw.shape[1]
    return np.concatenate([decode_tile_column(packed, pw, kt, checked) for kt in range(k // TILE)], axis=1)


def gemm_w4a8_per_group(qx, s_x, pw: ProgressiveWeight, packed: PackedWeight | None = None) -> np.ndarray:
    """Per-group W4A8 GEMM: int8 main loop over 32-wide k slices, then
    ``s_x outer s_l1`` in the epilogue."""
    qx = np.asarray(qx)
    s_x = np.asarray(s_x, dtype=np.float64)
    n, k = pw.shape
    if packed is None:
        packed = pack_weight(pw.codes)
    _check_group_layout(pw, packed)
    if qx.ndim != 2 or qx.shape[1] != k or s_x.shape != (qx.shape[0],):
        raise ShapeError("activation operands do not conform")
    acc = np.zeros((qx.shape[0], n), dtype=np.int64)
    for kt in range(k // TILE):
        w8 = decode_tile_column(packed, pw, kt)
        acc += gemm_int8(qx[:, kt * TILE:(kt + 1) * TILE], w8.T)
    if np.abs(acc).max(initial=0) >= 2**31:
        raise AccumulatorOverflow("accumulator left int32")  # pragma: no cover
    return acc.astype(np.float64) * (s_x[:, None] * pw.scales_l1[None, :])
