"""Two-level progressive group quantization for 4-bit weights.

Level 1 is per-channel symmetric INT8 inside a shrunken *protective range*;
level 2 quantizes those integers per group to UINT4 with integer UINT8 scales,
so that ``(code - zero) * scale`` always lands back inside int8.  A legacy
two-level scheme (group quantization first, then quantizing the float group
scales) lives here too so the two can be compared.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import OverflowViolation, ShapeError, Unsupported
from .quant_core import Granularity, QuantizedTensor, QuantSpec, dequantize, round_half_away, round_to_f16

INT8_LO, INT8_HI = -128, 127
U4_MAX = 15


def div_round(a, b):
    """``round_half_away(a / b)`` in exact integer arithmetic (``b > 0``)."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    return np.sign(a) * ((2 * np.abs(a) + b) // (2 * b))


def level2_params(q_min, q_max):
    """Integer group scale and zero for level-1 values spanning ``[q_min, q_max]``.

    The span is widened to include 0. The scale is ``round(span / 15)`` (at
    least 1) when that still reconstructs both ends of the span to within half
    a step; otherwise it is ``ceil(span / 15)``, which always does. The zero
    point is clamped to ``[0, 15]``.
    """
    lo = np.minimum(np.asarray(q_min, dtype=np.int64), 0)
    hi = np.maximum(np.asarray(q_max, dtype=np.int64), 0)
    span = hi - lo
    s_near = np.maximum(1, div_round(span, U4_MAX))
    s_up = np.maximum(1, -(-span // U4_MAX))
    z_near = np.clip(div_round(-lo, s_near), 0, U4_MAX)
    fits = np.ones(np.shape(span), dtype=bool)
    for v in (lo, hi):
        rec = (level2_codes(v, s_near, z_near) - z_near) * s_near
        fits &= 2 * np.abs(rec - v) <= s_near
    s = np.where(fits, s_near, s_up)
    z = np.clip(div_round(-lo, s), 0, U4_MAX)
    return s, z


def level2_codes(q, s, z):
    return np.clip(div_round(q, s) + z, 0, U4_MAX)


@dataclass(frozen=True)
class SweepResult:
    bound: int
    cases: int       # (min, max, code) triples enumerated: (2 * bound + 1) ** 2 * 16
    reachable: int   # triples with min <= max and a code the quantizer can emit
    violations: int
    witness: tuple[int, int, int] | None  # (group min, group max, code)

    @property
    def ok(self) -> bool:
        return self.violations == 0


def protective_sweep(bound: int) -> SweepResult:
    """Exhaustively check level-2 reconstruction for level-1 range ``[-bound, bound]``.

    Every integer pair ``(min, max)`` in the range is crossed with codes 0..15.
    A triple is reachable when ``min <= max`` and the quantizer can emit the
    code for some value inside the group; a reachable triple is a violation
    when ``(code - zero) * scale`` leaves ``[-128, 127]``.
    """
    r = np.arange(-bound, bound + 1)
    n_cases = r.size**2 * (U4_MAX + 1)
    lo, hi = np.meshgrid(r, r, indexing="ij")
    keep = lo <= hi
    lo, hi = lo[keep], hi[keep]
    s, z = level2_params(lo, hi)
    c_lo = level2_codes(lo, s, z)[:, None]
    c_hi = level2_codes(hi, s, z)[:, None]
    codes = np.arange(U4_MAX + 1)[None, :]
    reachable = (codes >= c_lo) & (codes <= c_hi)
    rec = (codes - z[:, None]) * s[:, None]
    bad = reachable & ((rec < INT8_LO) | (rec > INT8_HI))
    n_bad = int(bad.sum())
    witness = None
    if n_bad:
        i, c = np.argwhere(bad)[0]
        witness = (int(lo[i]), int(hi[i]), int(c))
    return SweepResult(bound, n_cases, int(reachable.sum()), n_bad, witness)


@lru_cache(maxsize=None)
def protective_range(bits_l1: int = 8, bits_l2: int = 4) -> tuple[int, int]:
    """Largest symmetric level-1 range whose level-2 reconstruction never overflows int8."""
    if (bits_l1, bits_l2) != (8, 4):
        raise Unsupported(f"protective range only derived for (8, 4), got {(bits_l1, bits_l2)}")
    for bound in range(INT8_HI, 0, -1):
        if protective_sweep(bound).ok:
            return -bound, bound
    raise AssertionError("no sound protective range")  # pragma: no cover


@dataclass
class ProgressiveWeight:
    codes: np.ndarray        # (n, k) uint4 values, int32
    zeros: np.ndarray        # (n, k // g) uint4 values
    scales_l2: np.ndarray    # (n, k // g) integers in [1, 255]
    scales_l1: np.ndarray    # (n,) float64, binary16-representable
    group_size: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    def expand(self, arr: np.ndarray) -> np.ndarray:
        return np.repeat(arr, self.group_size, axis=1)


def quantize_level1(w, bound: int | None = None):
    """Per-channel symmetric INT8 into the protective range. Returns (q, s0)."""
    w = np.asarray(w, dtype=np.float64)
    if bound is None:
        bound = protective_range()[1]
    amax = np.abs(w).max(axis=1)
    raw = np.atleast_1d(np.where(amax == 0, 1.0, amax / bound))
    s0 = np.atleast_1d(round_to_f16(raw))
    # subnormal scales lose relative precision (or flush to 0); round those up
    # on the 2**-24 grid so the row never clips
    tiny = raw < 2.0**-14
    s0 = np.where(tiny, np.ceil(raw / 2.0**-24) * 2.0**-24, s0)
    q = np.clip(round_half_away(w / s0[:, None]), -bound, bound).astype(np.int64)
    return q, s0


def quantize_progressive(w, g: int = 128) -> ProgressiveWeight:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ShapeError("weight must be 2-D")
    n, k = w.shape
    if g < 1 or k % g:
        raise ShapeError(f"group size {g} does not divide k={k}")
    q, s0 = quantize_level1(w)
    groups = q.reshape(n, k // g, g)
    s1, z = level2_params(groups.min(axis=-1), groups.max(axis=-1))
    codes = level2_codes(groups, s1[..., None], z[..., None]).reshape(n, k)
    return ProgressiveWeight(
        codes=codes.astype(np.int32),
        zeros=z.astype(np.int32),
        scales_l2=s1.astype(np.int32),
        scales_l1=s0,
        group_size=g,
    )


def dequantize_level1(pw: ProgressiveWeight) -> np.ndarray:
    """Integer level-1 weights ``(code - zero) * scale_l2``, guaranteed int8."""
    out = (pw.codes.astype(np.int64) - pw.expand(pw.zeros)) * pw.expand(pw.scales_l2)
    if out.size and (out.min() < INT8_LO or out.max() > INT8_HI):
        raise OverflowViolation(f"level-1 value outside int8: [{out.min()}, {out.max()}]")
    return out.astype(np.int8)


def dequantize_full(pw: ProgressiveWeight) -> np.ndarray:
    return dequantize_level1(pw).astype(np.float64) * pw.scales_l1[:, None]


def as_level1_tensor(pw: ProgressiveWeight) -> QuantizedTensor:
    """Wrap the level-1 integers as a per-channel s8 QuantizedTensor."""
    q1 = dequantize_level1(pw).astype(np.int32)
    return QuantizedTensor(
        codes=q1,
        scales=pw.scales_l1[:, None].copy(),
        zeros=np.zeros((q1.shape[0], 1), dtype=np.int32),
        spec=QuantSpec.signed(8, Granularity.per_channel()),
    )


@dataclass
class LegacyTwoLevelWeight:
    codes: np.ndarray            # (n, k) signed 4-bit values in [-7, 7]
    scales_group_u8: np.ndarray  # (n, k // g) integers in [1, 255]
    scales_channel: np.ndarray   # (n,) float64, binary16-representable
    group_size: int


def quantize_legacy_two_level(w, g: int = 128) -> LegacyTwoLevelWeight:
    """Group-wise symmetric INT4, then per-channel UINT8 quantization of the group scales."""
    w = np.asarray(w, dtype=np.float64)
    n, k = w.shape
    if g < 1 or k % g:
        raise ShapeError(f"group size {g} does not divide k={k}")
    groups = w.reshape(n, k // g, g)
    s_group = np.abs(groups).max(axis=-1) / 7
    s_chan = s_group.max(axis=1) / 255
    s_chan = np.atleast_1d(round_to_f16(np.where(s_chan == 0, 1.0, s_chan)))
    s_u8 = np.clip(round_half_away(s_group / s_chan[:, None]), 1, 255)
    eff = s_u8 * s_chan[:, None]
    codes = np.clip(round_half_away(groups / eff[..., None]), -7, 7)
    return LegacyTwoLevelWeight(
        codes=codes.reshape(n, k).astype(np.int32),
        scales_group_u8=s_u8.astype(np.int32),
        scales_channel=s_chan,
        group_size=g,
    )


def dequantize_legacy(lw: LegacyTwoLevelWeight) -> np.ndarray:
    eff = lw.scales_group_u8 * lw.scales_channel[:, None]
    return lw.codes * np.repeat(eff, lw.group_size, axis=1)


def legacy_group_scale_only(lw: LegacyTwoLevelWeight) -> np.ndarray:
    """Integer ``codes * s_u8``: what an int8 path would have to consume. Not int8 in general."""
    return lw.codes.astype(np.int64) * np.repeat(lw.scales_group_u8, lw.group_size, axis=1)
