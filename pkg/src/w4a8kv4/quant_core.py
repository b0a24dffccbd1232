"""Integer quantization primitives shared by every other module.

Matrices are plain 2-D ``float64`` numpy arrays. Codes are kept widened to
``int32``; the semantic bit width lives on the :class:`QuantSpec`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput, ShapeError

F16_MAX = 65504.0


def round_half_away(x):
    """Round to nearest, ties away from zero. Works on scalars and arrays.

    ``floor(x + 0.5)`` misrounds 0.49999999999999994, so the fractional part is
    taken exactly instead.
    """
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    f = np.floor(a)
    r = f + (a - f >= 0.5)
    out = np.copysign(r, x)
    return out if out.ndim else float(out)


def round_to_f16(x):
    """Nearest binary16 value (ties to even), widened back to float64.

    Magnitudes beyond the binary16 range saturate at +-65504.
    """
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInput("round_to_f16 needs finite input")
    clipped = np.clip(arr, -F16_MAX, F16_MAX)
    out = clipped.astype(np.float16).astype(np.float64)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class Granularity:
    kind: str  # "tensor" | "channel" | "group"
    group_size: int | None = None

    def __post_init__(self):
        if self.kind not in ("tensor", "channel", "group"):
            raise InvalidInput(f"unknown granularity {self.kind!r}")
        if self.kind == "group" and (self.group_size is None or self.group_size < 1):
            raise InvalidInput("per-group granularity needs group_size >= 1")

    @classmethod
    def per_tensor(cls) -> "Granularity":
        return cls("tensor")

    @classmethod
    def per_channel(cls) -> "Granularity":
        return cls("channel")

    @classmethod
    def per_group(cls, group_size: int) -> "Granularity":
        return cls("group", int(group_size))


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    symmetric: bool
    granularity: Granularity
    clamp_lo: int
    clamp_hi: int

    def __post_init__(self):
        if self.clamp_lo >= self.clamp_hi:
            raise InvalidInput("empty clamp range")
        if self.symmetric and self.clamp_lo != -self.clamp_hi:
            raise InvalidInput("symmetric spec needs clamp_lo == -clamp_hi")
        if self.clamp_hi - self.clamp_lo > 2**self.bits - 1:
            raise InvalidInput("clamp range wider than the bit width")

    @classmethod
    def signed(cls, bits: int, granularity: Granularity, qmax: int | None = None) -> "QuantSpec":
        """Symmetric signed spec, ``[-qmax, qmax]`` (default ``2**(bits-1) - 1``)."""
        qmax = 2 ** (bits - 1) - 1 if qmax is None else int(qmax)
        return cls(bits, True, granularity, -qmax, qmax)

    @classmethod
    def unsigned(cls, bits: int, granularity: Granularity) -> "QuantSpec":
        return cls(bits, False, granularity, 0, 2**bits - 1)


@dataclass
class QuantizedTensor:
    """Integer codes plus the scales/zeros that map them back to reals.

    ``scales`` and ``zeros`` have shape ``(1, 1)`` per-tensor, ``(rows, 1)``
    per-channel and ``(rows, cols // g)`` per-group.
    """

    codes: np.ndarray
    scales: np.ndarray
    zeros: np.ndarray
    spec: QuantSpec

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    def expanded(self, arr: np.ndarray) -> np.ndarray:
        """Broadcast a per-unit parameter array to the code matrix shape."""
        rows, cols = self.codes.shape
        if arr.shape[1] == cols or arr.shape == (1, 1) or arr.shape[1] == 1:
            return np.broadcast_to(arr, (rows, cols))
        g = cols // arr.shape[1]
        return np.repeat(arr, g, axis=1)


def compute_scale_zero(x_min: float, x_max: float, spec: QuantSpec) -> tuple[float, int]:
    if not (math.isfinite(x_min) and math.isfinite(x_max)):
        raise InvalidInput("x_min/x_max must be finite")
    if x_min > x_max:
        raise InvalidInput("x_min > x_max")
    s, z = _scale_zero(np.array(x_min, dtype=np.float64), np.array(x_max, dtype=np.float64), spec)
    return float(s), int(z)


def _scale_zero(x_min: np.ndarray, x_max: np.ndarray, spec: QuantSpec):
    if spec.symmetric:
        s = np.maximum(np.abs(x_min), np.abs(x_max)) / spec.clamp_hi
        z = np.zeros_like(s, dtype=np.int64)
        s = np.where(s == 0, 1.0, s)
        return s, z
    s = (x_max - x_min) / (spec.clamp_hi - spec.clamp_lo)
    degenerate = s == 0
    safe = np.where(degenerate, 1.0, s)
    z = round_half_away(spec.clamp_lo - x_min / safe)
    z = np.clip(z, spec.clamp_lo, spec.clamp_hi).astype(np.int64)
    z = np.where(degenerate, spec.clamp_lo, z)
    return safe, z


def _as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidInput("matrix has non-finite entries")
    return x


def _unit_view(x: np.ndarray, gran: Granularity) -> np.ndarray:
    """Reshape so that the last axis is one sharing unit."""
    rows, cols = x.shape
    if gran.kind == "tensor":
        return x.reshape(1, 1, rows * cols)
    if gran.kind == "channel":
        return x.reshape(rows, 1, cols)
    g = gran.group_size
    if cols % g:
        raise ShapeError(f"group size {g} does not divide {cols} columns")
    return x.reshape(rows, cols // g, g)


def quantize(x, spec: QuantSpec) -> QuantizedTensor:
    """Round-to-nearest quantization at the given granularity.

    Asymmetric ranges are widened to include 0 so that the zero point always
    lands inside the code range.
    """
    x = _as_matrix(x)
    units = _unit_view(x, spec.granularity)
    if spec.symmetric:
        lo = units.min(axis=-1)
        hi = units.max(axis=-1)
    else:
        lo = np.minimum(units.min(axis=-1), 0.0)
        hi = np.maximum(units.max(axis=-1), 0.0)
    s, z = _scale_zero(lo, hi, spec)
    codes = round_half_away(units / s[..., None] + z[..., None])
    codes = np.clip(codes, spec.clamp_lo, spec.clamp_hi).astype(np.int32)
    return QuantizedTensor(codes.reshape(x.shape), s, z.astype(np.int32), spec)


def quantize_with(x, scales, zeros, spec: QuantSpec) -> QuantizedTensor:
    """Quantize with caller-provided scales/zeros (shapes as in QuantizedTensor)."""
    x = _as_matrix(x)
    units = _unit_view(x, spec.granularity)
    s = np.asarray(scales, dtype=np.float64).reshape(units.shape[:2])
    z = np.asarray(zeros, dtype=np.int64).reshape(units.shape[:2])
    codes = round_half_away(units / s[..., None] + z[..., None])
    codes = np.clip(codes, spec.clamp_lo, spec.clamp_hi).astype(np.int32)
    return QuantizedTensor(codes.reshape(x.shape), s, z.astype(np.int32), spec)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    s = q.expanded(np.asarray(q.scales, dtype=np.float64))
    z = q.expanded(np.asarray(q.zeros))
    return (q.codes.astype(np.float64) - z) * s


def fake_quantize(x, spec: QuantSpec) -> np.ndarray:
    return dequantize(quantize(x, spec))


def quantize_per_token_s8(x) -> QuantizedTensor:
    """Per-token symmetric INT8, the activation format every GEMM consumes."""
    return quantize(x, QuantSpec.signed(8, Granularity.per_channel()))
