"""SWAR arithmetic on 32-bit words holding four independent 8-bit lanes.

Functions accept Python ints or numpy ``uint32`` arrays and return the same
kind. Byte 0 (least significant) is lane 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import LaneOverflow

NIBBLE_MASK = 0x0F0F0F0F
HIGH_BITS = 0x80808080
LOW7_BITS = 0x7F7F7F7F
WORD_MASK = 0xFFFFFFFF
BYTE_ONES = 0x01010101


def unpack_rlp(word):
    """Split eight packed nibbles into two lane words with three logical ops.

    The low nibble of every byte goes to ``low``, the high nibble to ``high``.
    """
    low = word & NIBBLE_MASK
    high = (word >> 4) & NIBBLE_MASK
    return low, high


def lanes_of(word) -> np.ndarray:
    """Reference extraction of the four unsigned lanes, shape ``(..., 4)``."""
    w = np.asarray(word, dtype=np.uint64)
    return ((w[..., None] >> (8 * np.arange(4, dtype=np.uint64))) & 0xFF).astype(np.int64)


def signed_lanes(word) -> np.ndarray:
    """Lanes reinterpreted as two's-complement int8."""
    u = lanes_of(word)
    return np.where(u >= 128, u - 256, u)


def word_of(lanes) -> int | np.ndarray:
    """Inverse of :func:`lanes_of`; lanes are taken modulo 256."""
    a = np.asarray(lanes, dtype=np.int64) & 0xFF
    w = (a << (8 * np.arange(4, dtype=np.int64))).sum(axis=-1).astype(np.uint32)
    return int(w) if w.ndim == 0 else w


def broadcast_byte(v):
    """Replicate an 8-bit value into all four lanes."""
    if isinstance(v, (int, np.integer)):
        return (int(v) & 0xFF) * BYTE_ONES
    return ((np.asarray(v, dtype=np.uint32) & 0xFF) * np.uint32(BYTE_ONES)).astype(np.uint32)


def lane_mul(word, scale, checked: bool = True):
    """Multiply every lane by an 8-bit scale with one 32-bit integer multiply.

    The scale is zero-extended to 32 bits, so a lane product above 255 carries
    into the next lane. ``checked`` raises :class:`LaneOverflow` in that case.
    """
    if checked:
        prod = lanes_of(word) * np.asarray(scale, dtype=np.int64)[..., None]
        if np.any(prod > 0xFF):
            raise LaneOverflow("lane product exceeds 255; result would corrupt neighbouring lanes")
    if isinstance(word, (int, np.integer)) and isinstance(scale, (int, np.integer)):
        return (int(word) * int(scale)) & WORD_MASK
    w = np.asarray(word, dtype=np.uint64)
    s = np.asarray(scale, dtype=np.uint64)
    return ((w * s) & WORD_MASK).astype(np.uint32)


def lane_sub(a, b):
    """Per-lane ``a - b`` modulo 256 with no borrow between lanes (vsub4)."""
    if isinstance(a, (int, np.integer)) and isinstance(b, (int, np.integer)):
        a, b = int(a), int(b)
        return (((a | HIGH_BITS) - (b & LOW7_BITS)) ^ ((a ^ ~b) & HIGH_BITS)) & WORD_MASK
    a = np.asarray(a, dtype=np.uint32)
    b = np.asarray(b, dtype=np.uint32)
    hb = np.uint32(HIGH_BITS)
    return ((a | hb) - (b & np.uint32(LOW7_BITS))) ^ ((a ^ ~b) & hb)


def lane_add(a, b):
    """Per-lane ``a + b`` modulo 256 with no carry between lanes (vadd4)."""
    if isinstance(a, (int, np.integer)) and isinstance(b, (int, np.integer)):
        a, b = int(a), int(b)
        return (((a & LOW7_BITS) + (b & LOW7_BITS)) ^ ((a ^ b) & HIGH_BITS)) & WORD_MASK
    a = np.asarray(a, dtype=np.uint32)
    b = np.asarray(b, dtype=np.uint32)
    lo7 = np.uint32(LOW7_BITS)
    return ((a & lo7) + (b & lo7)) ^ ((a ^ b) & np.uint32(HIGH_BITS))


def dequant_mul_then_sub(codes_word, scale: int, zero: int, checked: bool = True):
    """Level-2 dequantization in the multiply-then-subtract order."""
    return lane_sub(lane_mul(codes_word, scale, checked=checked), broadcast_byte(zero * scale))


def dequant_sub_then_mul(codes_word, scale: int, zero: int):
    """The subtract-first order: lanes go negative, then the multiply spills."""
    return lane_mul(lane_sub(codes_word, broadcast_byte(zero)), scale, checked=False)


@dataclass(frozen=True)
class LaneSweep:
    cases: int
    admissible: int
    mul_first_failures: int
    sub_first_failures: int
    witness: "OrderWitness | None"

    @property
    def ok(self) -> bool:
        return self.mul_first_failures == 0 and self.witness is not None


@dataclass(frozen=True)
class OrderWitness:
    code: int
    zero: int
    scale: int
    expected: tuple[int, ...]
    mul_first: tuple[int, ...]
    sub_first: tuple[int, ...]


def lane_sweep(max_scale: int = 16) -> LaneSweep:
    """Exhaustive check over code, zero in 0..15 and scale in 1..max_scale.

    A case is admissible when the true value ``(code - zero) * scale`` fits in
    int8, which the protective range guarantees for quantizer output. Lane 0
    holds the probe code; lanes 1..3 hold ``zero`` (true value 0) so that any
    carry out of lane 0 shows up as a wrong neighbour.
    """
    s, z, c = (a.reshape(-1) for a in np.meshgrid(
        np.arange(1, max_scale + 1), np.arange(16), np.arange(16), indexing="ij"))
    truth = (c - z) * s
    ok = (truth >= -128) & (truth <= 127)
    s, z, c, truth = s[ok], z[ok], c[ok], truth[ok]
    words = word_of(np.stack([c, z, z, z], axis=1))
    expected = np.stack([truth] + [np.zeros_like(truth)] * 3, axis=1)
    got_mul = signed_lanes(dequant_mul_then_sub(words, s, z))
    got_sub = signed_lanes(dequant_sub_then_mul(words, s, z))
    mul_bad = np.any(got_mul != expected, axis=1)
    sub_bad = np.any(got_sub != expected, axis=1)
    witness = None
    if sub_bad.any():
        i = int(np.argmax(sub_bad))
        witness = OrderWitness(
            int(c[i]), int(z[i]), int(s[i]),
            tuple(int(v) for v in expected[i]),
            tuple(int(v) for v in got_mul[i]),
            tuple(int(v) for v in got_sub[i]),
        )
    return LaneSweep(16 * 16 * max_scale, int(ok.sum()), int(mul_bad.sum()), int(sub_bad.sum()), witness)


def order_matters_demo() -> OrderWitness:
    """First (code, zero, scale) where subtracting before multiplying gives wrong lanes."""
    w = lane_sweep().witness
    assert w is not None
    return w
