"""Paged low-bit KV cache with per-head, per-token dynamic quantization.

Each token's key (and value) vector for one KV head is quantized
asymmetrically with its own binary16 scale and zero point. Zero points are
stored as binary16 *floats* (``-min / scale``), so the row minimum maps to
code 0 exactly and constant rows reconstruct exactly.

Page byte layout (frozen; golden fixture in tests), for each KV head in order:

1. K codes, ``page_size x head_dim`` row-major. 4-bit codes pack two per byte,
   even channel in the low nibble; 8-bit codes take one byte each.
2. V codes, same layout.
3. K parameters, ``page_size`` pairs of (scale, zero) as little-endian
   binary16 bit patterns.
4. V parameters, same layout.

Slots past the page's token count are zero.
"""

from __future__ import annotations

import ast
import inspect
import textwrap
from dataclasses import dataclass, field

import numpy as np

from .calib import SmoothScales
from .errors import EmptyCache, InvalidInput, ShapeError
from .quant_core import round_half_away, round_to_f16

DEFAULT_PAGE_SIZE = 64
F16_1024 = 0x6400  # binary16 bit pattern of 1024.0; its mantissa LSB is worth 1


# -- dequantization paths ---------------------------------------------------
# The *_core functions are the per-element instruction sequences. Their op
# counts are read off the source by dequant_ops_count, so keep them minimal.

def _lop3(a, mask, bits):
    """``(a & mask) | bits``: one three-input logic instruction."""
    return (a & mask) | bits


def _fma(a, b, c):
    """Fused multiply-add with a single rounding to binary16.

    Operands are binary16 values or constants exact in float64, so the float64
    product and sum carry no error before the final rounding.
    """
    return (np.asarray(a, dtype=np.float64) * b + c).astype(np.float16)


def _trick_core(bits16, mask, scale, bias):
    x = _lop3(bits16, mask, F16_1024).view(np.float16)
    return _fma(x, scale, bias)


def _naive_core(packed, shift, scale, zero):
    code = (packed >> shift) & 0xF
    x = code.astype(np.float32)
    return (x - zero) * scale


def trick_constants(scale, zero, high_nibble: bool = False):
    """Per-(token, head) FMA constants, prepared once when scales are fetched.

    Low nibble: ``(1024 + c) * s - (1024 + z) * s``. High nibble is masked in
    place as ``1024 + 16c``, so the scale is ``s / 16`` and the offset
    ``(64 + z) * s``.
    """
    s = np.asarray(scale, dtype=np.float64)
    z = np.asarray(zero, dtype=np.float64)
    if high_nibble:
        return s / 16.0, -(64.0 + z) * s
    return s, -(1024.0 + z) * s


def dequant_fp16_trick(code, scale, zero) -> np.ndarray | float:
    """Dequantize codes via the binary16 exponent splice plus one FMA.

    Equivalent to ``(code - zero) * scale`` rounded to binary16.
    """
    c = np.asarray(code)
    if c.size and (c.min() < 0 or c.max() > 255):
        raise InvalidInput("codes must fit in 8 bits")
    s, b = trick_constants(scale, zero)
    out = _trick_core(c.astype(np.uint16), np.uint16(0x00FF), s, b).astype(np.float64)
    return out if out.ndim else float(out)


def dequant_packed_trick(packed, scale, zero) -> np.ndarray:
    """Dequantize packed 4-bit bytes ``(..., D/2)`` to ``(..., D)`` binary16 values.

    Low and high nibbles are each isolated by one masked OR into 1024.0; no
    shifts are needed.
    """
    p = np.asarray(packed, dtype=np.uint16)
    s_lo, b_lo = trick_constants(scale, zero)
    s_hi, b_hi = trick_constants(scale, zero, high_nibble=True)
    lo = _trick_core(p, np.uint16(0x000F), s_lo[..., None], b_lo[..., None])
    hi = _trick_core(p, np.uint16(0x00F0), s_hi[..., None], b_hi[..., None])
    out = np.empty(p.shape[:-1] + (2 * p.shape[-1],), dtype=np.float16)
    out[..., 0::2] = lo
    out[..., 1::2] = hi
    return out


def dequant_packed_naive(packed, scale, zero) -> np.ndarray:
    p = np.asarray(packed, dtype=np.uint8)
    s = np.asarray(scale, dtype=np.float32)[..., None]
    z = np.asarray(zero, dtype=np.float32)[..., None]
    out = np.empty(p.shape[:-1] + (2 * p.shape[-1],), dtype=np.float32)
    out[..., 0::2] = _naive_core(p, 0, s, z)
    out[..., 1::2] = _naive_core(p, 4, s, z)
    return out


def dequant_reference(codes, scale, zero) -> np.ndarray:
    """Plain float64 ``(code - zero) * scale`` with per-row parameters."""
    c = np.asarray(codes, dtype=np.float64)
    return (c - np.asarray(zero, dtype=np.float64)[..., None]) * np.asarray(scale, dtype=np.float64)[..., None]


_PRIMITIVES = {"_lop3", "_fma"}


def _audit_ops(fn) -> int:
    """Count ALU instructions in a per-element core.

    Binary operators count one each, as do ``astype`` conversions and calls
    to the single-instruction primitives; ``view`` is a free reinterpret.
    """
    tree = ast.parse(textwrap.dedent(inspect.getsource(fn)))
    body = tree.body[0]
    n = 0
    for node in ast.walk(body):
        if isinstance(node, ast.BinOp):
            n += 1
        elif isinstance(node, ast.Call):
            f = node.func
            if isinstance(f, ast.Name) and f.id in _PRIMITIVES:
                n += 1
            elif isinstance(f, ast.Attribute) and f.attr == "astype":
                n += 1
    return n


def dequant_ops_count(path: str) -> int:
    if path == "naive":
        return _audit_ops(_naive_core)
    if path == "trick":
        return _audit_ops(_trick_core)
    raise InvalidInput(f"unknown dequantization path {path!r}")


# -- quantization and paging ------------------------------------------------

def quantize_kv_rows(x, bits: int = 4):
    """Asymmetric per-row quantization. Returns ``(codes, scale, zero)``;
    scale and zero are binary16-representable float64 arrays."""
    x = np.asarray(x, dtype=np.float64)
    qmax = 2**bits - 1
    lo, hi = x.min(axis=-1), x.max(axis=-1)
    s = (hi - lo) / qmax
    s = np.atleast_1d(round_to_f16(np.where(s == 0, 1.0, s)))
    s = np.where(s == 0, 2.0**-24, s)  # underflowed spans keep a positive scale
    z = np.atleast_1d(round_to_f16(-lo / s))
    codes = np.clip(round_half_away(x / s[..., None] + z[..., None]), 0, qmax)
    return codes.astype(np.uint8), s, z


def _pack_nibbles(codes: np.ndarray) -> np.ndarray:
    return (codes[..., 0::2] | (codes[..., 1::2] << 4)).astype(np.uint8)


def _unpack_nibbles(packed: np.ndarray) -> np.ndarray:
    out = np.empty(packed.shape[:-1] + (2 * packed.shape[-1],), dtype=np.uint8)
    out[..., 0::2] = packed & 0x0F
    out[..., 1::2] = packed >> 4
    return out


@dataclass
class KvPage:
    n_heads: int
    page_size: int
    head_dim: int
    bits: int = 4
    n_tokens: int = 0
    k_codes: np.ndarray = field(init=False)
    v_codes: np.ndarray = field(init=False)
    params: np.ndarray = field(init=False)  # (2 [k, v], heads, page_size, 2 [scale, zero]) float16

    def __post_init__(self):
        shape = (self.n_heads, self.page_size, self.head_dim)
        self.k_codes = np.zeros(shape, dtype=np.uint8)
        self.v_codes = np.zeros(shape, dtype=np.uint8)
        self.params = np.zeros((2, self.n_heads, self.page_size, 2), dtype=np.float16)

    @property
    def full(self) -> bool:
        return self.n_tokens == self.page_size

    def _codes_bytes(self, codes: np.ndarray) -> np.ndarray:
        return _pack_nibbles(codes) if self.bits == 4 else codes

    def to_bytes(self) -> bytes:
        parts = []
        for h in range(self.n_heads):
            parts.append(self._codes_bytes(self.k_codes[h]).tobytes())
            parts.append(self._codes_bytes(self.v_codes[h]).tobytes())
            parts.append(self.params[0, h].astype("<f2").tobytes())
            parts.append(self.params[1, h].astype("<f2").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, raw: bytes, n_heads: int, page_size: int, head_dim: int, bits: int, n_tokens: int) -> "KvPage":
        page = cls(n_heads, page_size, head_dim, bits, n_tokens)
        cb = page_size * head_dim * bits // 8
        pb = page_size * 2 * 2
        stride = 2 * cb + 2 * pb
        if len(raw) != n_heads * stride:
            raise ShapeError(f"page needs {n_heads * stride} bytes, got {len(raw)}")
        buf = np.frombuffer(raw, dtype=np.uint8)
        for h in range(n_heads):
            base = h * stride
            for dst, off in ((page.k_codes, 0), (page.v_codes, cb)):
                chunk = buf[base + off: base + off + cb]
                codes = _unpack_nibbles(chunk.reshape(page_size, head_dim // 2)) if bits == 4 else chunk.reshape(page_size, head_dim)
                dst[h] = codes
            for kind in (0, 1):
                off = base + 2 * cb + kind * pb
                page.params[kind, h] = np.frombuffer(raw[off: off + pb], dtype="<f2").reshape(page_size, 2)
        return page


class KvPageStore:
    """Paged KV cache for one sequence. One writer appends; readers decode."""

    def __init__(self, n_kv_heads: int, head_dim: int, page_size: int = DEFAULT_PAGE_SIZE, bits: int = 4):
        if bits not in (4, 8):
            raise InvalidInput("KV cache supports 4- or 8-bit codes")
        if head_dim % 2:
            raise ShapeError("head_dim must be even")
        if page_size < 1:
            raise InvalidInput("page_size must be positive")
        self.n_kv_heads = n_kv_heads
        self.head_dim = head_dim
        self.page_size = page_size
        self.bits = bits
        self.pages: list[KvPage] = []

    def __len__(self) -> int:
        return sum(p.n_tokens for p in self.pages)

    @property
    def n_tokens(self) -> int:
        return len(self)

    def append_token(self, k, v) -> None:
        k = np.asarray(k, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        shape = (self.n_kv_heads, self.head_dim)
        if k.shape != shape or v.shape != shape:
            raise ShapeError(f"k and v must be {shape}, got {k.shape} and {v.shape}")
        if not self.pages or self.pages[-1].full:
            self.pages.append(KvPage(self.n_kv_heads, self.page_size, self.head_dim, self.bits))
        page = self.pages[-1]
        t = page.n_tokens
        for kind, (x, dst) in enumerate(((k, page.k_codes), (v, page.v_codes))):
            codes, s, z = quantize_kv_rows(x, self.bits)
            dst[:, t] = codes
            page.params[kind, :, t, 0] = s
            page.params[kind, :, t, 1] = z
        page.n_tokens += 1

    def gather(self, head: int, kind: str):
        """Codes ``(T, D)`` plus scale and zero ``(T,)`` for one head, in token order."""
        if not self.pages:
            raise EmptyCache("KV cache is empty")
        idx = {"k": 0, "v": 1}[kind]
        codes = np.concatenate([(p.k_codes if idx == 0 else p.v_codes)[head, :p.n_tokens] for p in self.pages])
        prm = np.concatenate([p.params[idx, head, :p.n_tokens] for p in self.pages])
        return codes, prm[:, 0].astype(np.float64), prm[:, 1].astype(np.float64)

    def dequantized(self, head: int, kind: str, path: str = "trick") -> np.ndarray:
        codes, s, z = self.gather(head, kind)
        if path == "reference":
            return dequant_reference(codes, s, z)
        if path != "trick":
            raise InvalidInput(f"unknown path {path!r}")
        if self.bits == 4:
            return dequant_packed_trick(_pack_nibbles(codes), s, z).astype(np.float64)
        return dequant_fp16_trick(codes, s[:, None], z[:, None]).astype(np.float64)


def softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def attention_reference(q, k, v) -> np.ndarray:
    """Full-precision decode attention. ``q`` is ``(H, D)``, ``k``/``v`` are ``(T, H_kv, D)``."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    h, d = q.shape
    r = h // k.shape[1]
    out = np.empty_like(q)
    for i in range(h):
        hk = i // r
        p = softmax(k[:, hk] @ q[i] / np.sqrt(d))
        out[i] = p @ v[:, hk]
    return out


def smooth_keys(k, smooth: SmoothScales) -> np.ndarray:
    """Divide a ``(H_kv, D)`` key row by its smoothing scales before caching."""
    k = np.asarray(k, dtype=np.float64)
    return k / smooth.lam.reshape(k.shape)


def attention_decode(store: KvPageStore, q, smooth: SmoothScales | None = None, path: str = "trick") -> np.ndarray:
    """One decode step for every query head against the cached tokens.

    Query head ``h`` reads KV head ``h // r`` with ``r = H / H_kv``. With
    ``smooth`` given the cached keys must have been divided by lambda
    (:func:`smooth_keys`) and the query is multiplied by it here.
    """
    q = np.asarray(q, dtype=np.float64)
    if len(store) == 0:
        raise EmptyCache("attention over an empty KV cache")
    h, d = q.shape
    if d != store.head_dim or h % store.n_kv_heads:
        raise ShapeError(f"query {q.shape} incompatible with {store.n_kv_heads} KV heads of dim {store.head_dim}")
    r = h // store.n_kv_heads
    if smooth is not None:
        q = q * np.repeat(smooth.lam.reshape(store.n_kv_heads, 1, d), r, axis=1).reshape(h, d)
    keys = [store.dequantized(hk, "k", path) for hk in range(store.n_kv_heads)]
    vals = [store.dequantized(hk, "v", path) for hk in range(store.n_kv_heads)]
    out = np.empty_like(q)
    for i in range(h):
        hk = i // r
        p = softmax(keys[hk] @ q[i] / np.sqrt(d))
        out[i] = p @ vals[hk]
    return out
