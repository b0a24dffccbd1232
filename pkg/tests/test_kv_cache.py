from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from w4a8kv4.calib import smooth_attention_scales
from w4a8kv4.checks import f16_ulp
from w4a8kv4.errors import EmptyCache, InvalidInput, ShapeError
from w4a8kv4.kv_cache import (
    KvPage,
    KvPageStore,
    attention_decode,
    attention_reference,
    dequant_fp16_trick,
    dequant_ops_count,
    dequant_packed_naive,
    dequant_packed_trick,
    dequant_reference,
    quantize_kv_rows,
    smooth_keys,
)
from w4a8kv4.quant_core import round_to_f16

from .fixtures.make_fixtures import PAGE_SHAPE, page_bytes, page_store
from .oracles import f16_round

FIXTURES = Path(__file__).parent / "fixtures"


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def f16_samples(rng, n):
    scale = np.atleast_1d(round_to_f16(2.0 ** rng.uniform(-8, 4, n)))
    zero = np.atleast_1d(round_to_f16(rng.uniform(-4.0, 20.0, n)))
    return scale, zero


def decode_trace(rng, tokens, hk=2, d=16, outliers=15.0):
    k = rng.standard_normal((tokens, hk, d))
    k[..., [1, 1 + d // 2]] *= outliers
    v = rng.standard_normal((tokens, hk, d))
    q = rng.standard_normal((2 * hk, d))
    return q, k, v


def fill(store, k, v, smooth=None):
    for t in range(k.shape[0]):
        store.append_token(k[t] if smooth is None else smooth_keys(k[t], smooth), v[t])
    return store


# ---- dequantization paths ----

def test_trick_trivial_cases():
    assert dequant_fp16_trick(7, 0.5, 7.0) == 0.0
    assert dequant_fp16_trick(15, 1.0, 0.0) == 15.0
    assert dequant_fp16_trick(0, 0.25, 3.0) == -0.75


def test_trick_splice_is_exact_integer():
    # OR-ing a code into the mantissa of 1024.0 gives 1024 + code exactly
    codes = np.arange(256, dtype=np.uint16)
    spliced = (codes | np.uint16(0x6400)).view(np.float16).astype(np.float64)
    assert np.array_equal(spliced, 1024.0 + codes)


def test_op_counts():
    assert dequant_ops_count("naive") == 5
    assert dequant_ops_count("trick") == 2
    with pytest.raises(InvalidInput):
        dequant_ops_count("other")


def test_trick_within_one_ulp_sweep():
    rng = np.random.default_rng(0)
    scale, zero = f16_samples(rng, 1000)
    codes = np.arange(16)[:, None]
    got = dequant_fp16_trick(np.broadcast_to(codes, (16, 1000)), scale, zero)
    ref = (codes - zero) * scale
    assert np.all(np.abs(got - ref) <= f16_ulp(ref))


def test_trick_rational_oracle():
    # against binary16 rounding of the exact rational value
    rng = np.random.default_rng(1)
    scale, zero = f16_samples(rng, 100)
    for s, z in zip(scale, zero):
        for c in range(16):
            exact = (c - Fraction(float(z))) * Fraction(float(s))
            got = dequant_fp16_trick(c, s, z)
            assert abs(got - f16_round(float(exact))) <= f16_ulp(float(exact))


@given(st.integers(0, 255), st.floats(2.0**-8, 16.0), st.floats(-4.0, 200.0))
def test_trick_8bit_codes(code, s, z):
    s, z = float(round_to_f16(s)), float(round_to_f16(z))
    ref = (code - z) * s
    assert abs(dequant_fp16_trick(code, s, z) - ref) <= f16_ulp(ref)


def test_trick_code_range():
    with pytest.raises(InvalidInput):
        dequant_fp16_trick(256, 1.0, 0.0)


def test_packed_paths_agree():
    rng = np.random.default_rng(2)
    codes = rng.integers(0, 16, size=(40, 16)).astype(np.uint8)
    packed = codes[:, 0::2] | (codes[:, 1::2] << 4)
    scale, zero = f16_samples(rng, 40)
    ref = dequant_reference(codes, scale, zero)
    ulp = f16_ulp(ref)
    assert np.all(np.abs(dequant_packed_trick(packed, scale, zero) - ref) <= ulp)
    assert np.all(np.abs(dequant_packed_naive(packed, scale, zero) - ref) <= ulp)


# ---- row quantization and paging ----

def test_constant_row_exact():
    for c in (0.0, 0.375, -2.5, 1000.0):
        row = np.full((1, 16), c)
        codes, s, z = quantize_kv_rows(row)
        assert s[0] == 1.0
        assert np.all(dequant_reference(codes, s, z) == c)
        assert np.all(dequant_fp16_trick(codes, s[:, None], z[:, None]) == c)


@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_row_error_bound(seed, spread):
    x = np.random.default_rng(seed).normal(scale=spread, size=(4, 32))
    codes, s, z = quantize_kv_rows(x)
    assert np.all(codes <= 15)
    assert np.array_equal(s, round_to_f16(s)) and np.array_equal(z, round_to_f16(z))
    err = np.abs(dequant_fp16_trick(codes, s[:, None], z[:, None]) - x)
    # half a step, binary16 parameter rounding, and the f16 output rounding
    slack = s[:, None] * (0.5 + 2.0**-6) + f16_ulp(x)
    assert np.all(err <= slack)


def test_paging_arithmetic():
    store = KvPageStore(2, 8, page_size=4)
    ones = np.ones((2, 8))
    for _ in range(5):
        store.append_token(ones, ones)
    assert len(store.pages) == 2 and len(store) == 5
    assert [p.n_tokens for p in store.pages] == [4, 1]


def test_store_errors():
    store = KvPageStore(2, 8)
    with pytest.raises(ShapeError):
        store.append_token(np.ones((2, 4)), np.ones((2, 8)))
    with pytest.raises(EmptyCache):
        attention_decode(store, np.ones((4, 8)))
    with pytest.raises(EmptyCache):
        store.gather(0, "k")
    with pytest.raises(InvalidInput):
        KvPageStore(2, 8, bits=3)
    with pytest.raises(ShapeError):
        KvPageStore(2, 7)
    store.append_token(np.ones((2, 8)), np.ones((2, 8)))
    with pytest.raises(ShapeError):
        attention_decode(store, np.ones((3, 8)))
    with pytest.raises(InvalidInput):
        store.dequantized(0, "k", path="other")


def test_store_trick_matches_reference_path():
    rng = np.random.default_rng(3)
    _, k, v = decode_trace(rng, 40)
    store = fill(KvPageStore(2, 16, page_size=16), k, v)
    for h in range(2):
        for kind in "kv":
            ref = store.dequantized(h, kind, "reference")
            got = store.dequantized(h, kind, "trick")
            assert np.all(np.abs(got - ref) <= f16_ulp(ref))


# ---- attention ----

def test_single_token_constant():
    store = KvPageStore(1, 8)
    store.append_token(np.full((1, 8), 0.5), np.full((1, 8), 1.25))
    out = attention_decode(store, np.random.default_rng(4).normal(size=(2, 8)))
    assert np.all(out == 1.25)


def test_gqa_head_mapping():
    rng = np.random.default_rng(5)
    _, k, v = decode_trace(rng, 8)
    v[:, 1] += 100.0  # kv head 1 is easy to tell apart
    store = fill(KvPageStore(2, 16), k, v)
    out = attention_decode(store, rng.normal(size=(4, 16)))
    assert np.all(out[:2] < 50) and np.all(out[2:] > 50)


def test_paging_transparency():
    rng = np.random.default_rng(6)
    q, k, v = decode_trace(rng, 37)
    paged = fill(KvPageStore(2, 16, page_size=5), k, v)
    flat = fill(KvPageStore(2, 16, page_size=64), k, v)
    assert len(paged.pages) == 8 and len(flat.pages) == 1
    assert np.array_equal(attention_decode(paged, q), attention_decode(flat, q))


def test_kv8_no_worse_than_kv4():
    rng = np.random.default_rng(7)
    e4 = e8 = 0.0
    for _ in range(10):
        q, k, v = decode_trace(rng, 32)
        ref = attention_reference(q, k, v)
        e4 += rel(attention_decode(fill(KvPageStore(2, 16, bits=4), k, v), q), ref)
        e8 += rel(attention_decode(fill(KvPageStore(2, 16, bits=8), k, v), q), ref)
    assert e8 <= e4


def test_smoothing_exact_without_quantization():
    rng = np.random.default_rng(8)
    q, k, v = decode_trace(rng, 20)
    sm = smooth_attention_scales(k.reshape(20, -1), 0.5, 16)
    k_s = np.stack([smooth_keys(k[t], sm) for t in range(20)])
    q_s = q * np.repeat(sm.lam.reshape(2, 1, 16), 2, axis=1).reshape(4, 16)
    assert rel(attention_reference(q_s, k_s, v), attention_reference(q, k, v)) < 1e-9


def test_smoothing_helps_outlier_keys():
    rng = np.random.default_rng(9)
    plain = smoothed = 0.0
    for _ in range(10):
        q, k, v = decode_trace(rng, 32)
        sm = smooth_attention_scales(k.reshape(32, -1), 0.5, 16)
        ref = attention_reference(q, k, v)
        plain += rel(attention_decode(fill(KvPageStore(2, 16), k, v), q), ref)
        smoothed += rel(attention_decode(fill(KvPageStore(2, 16), k, v, sm), q, sm), ref)
    assert smoothed < plain


def test_decode_error_envelope():
    rng = np.random.default_rng(10)
    q, k, v = decode_trace(rng, 32, outliers=1.0)
    ref = attention_reference(q, k, v)
    assert rel(attention_decode(fill(KvPageStore(2, 16), k, v), q), ref) < 0.25


# ---- page layout ----

def test_page_round_trip():
    store = page_store()
    page = store.pages[0]
    raw = page.to_bytes()
    back = KvPage.from_bytes(raw, PAGE_SHAPE["n_kv_heads"], PAGE_SHAPE["page_size"], PAGE_SHAPE["head_dim"], 4, 3)
    assert np.array_equal(back.k_codes, page.k_codes) and np.array_equal(back.v_codes, page.v_codes)
    assert np.array_equal(back.params.view(np.uint16), page.params.view(np.uint16))
    assert back.to_bytes() == raw
    with pytest.raises(ShapeError):
        KvPage.from_bytes(raw[:-1], 2, 4, 8, 4, 3)


def test_page_layout_by_hand():
    page = page_store().pages[0]
    raw = page.to_bytes()
    cb, pb = 4 * 8 // 2, 4 * 2 * 2
    stride = 2 * cb + 2 * pb
    assert len(raw) == 2 * stride
    for h in range(2):
        base = h * stride
        # token 0, channels 0 and 1 share the first K byte, channel 0 low
        assert raw[base] == page.k_codes[h, 0, 0] | (page.k_codes[h, 0, 1] << 4)
        assert raw[base + cb] == page.v_codes[h, 0, 0] | (page.v_codes[h, 0, 1] << 4)
        s_bits = int.from_bytes(raw[base + 2 * cb: base + 2 * cb + 2], "little")
        assert s_bits == int(page.params[0, h, 0, 0].view(np.uint16))
        # the unused fourth slot is zero-filled
        assert raw[base + 3 * 4: base + 4 * 4] == b"\0" * 4


def test_golden_page():
    golden = (FIXTURES / "page.bin").read_bytes()
    assert page_bytes() == golden == page_bytes()
