import json
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from w4a8kv4 import container
from w4a8kv4.errors import FormatError

from .fixtures.make_fixtures import CONTAINER_META, container_bytes, container_tensors

FIXTURES = Path(__file__).parent / "fixtures"

NUMPY_OF = {"f64": np.float64, "f16-bits": np.float16, "u8": np.uint8, "i8": np.int8, "i32": np.int32}


def same_bits(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return a.shape == b.shape and a.tobytes() == b.astype(a.dtype).tobytes()


def test_header_layout():
    raw = container.encode([("a", "u8", np.arange(3, dtype=np.uint8))], {"k": 1})
    assert raw[:4] == b"QTZ1"
    (mlen,) = struct.unpack("<Q", raw[4:12])
    manifest = json.loads(raw[12:12 + mlen])
    assert manifest == {"meta": {"k": 1}, "tensors": [
        {"name": "a", "dtype": "u8", "shape": [3], "offset": 0, "length": 3}]}
    base = -(-(12 + mlen) // 64) * 64
    assert raw[12 + mlen:base] == bytes(base - 12 - mlen)
    assert raw[base:base + 3] == b"\x00\x01\x02" and len(raw) == base + 64


def test_offsets_aligned():
    raw = container.encode([(f"t{i}", "u8", np.ones(i + 1, dtype=np.uint8)) for i in range(5)])
    (mlen,) = struct.unpack("<Q", raw[4:12])
    entries = json.loads(raw[12:12 + mlen])["tensors"]
    assert [e["offset"] for e in entries] == [0, 64, 128, 192, 256]


def test_u4_packing_order():
    raw = container.encode([("n", "u4-packed", np.array([1, 2, 3]))])
    assert raw[-64:-62] == bytes([0x21, 0x03])
    got, _ = container.decode(raw)
    assert got["n"].tolist() == [1, 2, 3]


@pytest.mark.parametrize("dtype", ["f64", "f16-bits", "u8", "i8", "i32"])
@given(data=st.data())
def test_round_trip_dtypes(dtype, data):
    if dtype == "f64":
        elems = st.floats(allow_nan=False)
    elif dtype == "f16-bits":
        elems = st.floats(width=16, allow_nan=False)
    else:
        info = np.iinfo(NUMPY_OF[dtype])
        elems = st.integers(int(info.min), int(info.max))
    arr = data.draw(arrays(NUMPY_OF[dtype], array_shapes(min_dims=0, max_dims=3, max_side=5), elements=elems))
    got, meta = container.decode(container.encode([("x", dtype, arr)], {"d": dtype}))
    assert meta == {"d": dtype}
    assert same_bits(got["x"], arr)


@given(arrays(np.uint8, array_shapes(max_dims=3, max_side=7), elements=st.integers(0, 15)))
def test_round_trip_u4(arr):
    got, _ = container.decode(container.encode([("x", "u4-packed", arr)]))
    assert np.array_equal(got["x"], arr) and got["x"].shape == arr.shape


def test_f16_negative_zero_and_subnormal_bits():
    arr = np.array([-0.0, 2.0**-24, 65504.0], dtype=np.float16)
    got, _ = container.decode(container.encode([("h", "f16-bits", arr)]))
    assert got["h"].view(np.uint16).tolist() == arr.view(np.uint16).tolist()


def test_encode_errors():
    with pytest.raises(FormatError):
        container.encode([("a", "u4-packed", np.array([16]))])
    with pytest.raises(FormatError):
        container.encode([("a", "i8", np.array([200]))])
    with pytest.raises(FormatError):
        container.encode([("a", "f16-bits", np.array([0.1]))])
    with pytest.raises(FormatError):
        container.encode([("a", "bf16", np.zeros(1))])
    with pytest.raises(FormatError):
        container.encode([("a", "u8", np.zeros(1)), ("a", "u8", np.zeros(1))])


def _patch_manifest(raw: bytes, edit) -> bytes:
    (mlen,) = struct.unpack("<Q", raw[4:12])
    m = json.loads(raw[12:12 + mlen])
    edit(m)
    new = json.dumps(m, sort_keys=True, separators=(",", ":")).encode()
    payload = raw[-(-(12 + mlen) // 64) * 64:]
    head = b"QTZ1" + struct.pack("<Q", len(new)) + new
    return head + bytes(-(-len(head) // 64) * 64 - len(head)) + payload


def test_decode_errors():
    good = container.encode([("a", "u8", np.arange(70, dtype=np.uint8)), ("b", "f64", np.ones(2))])
    assert container.decode(good)[0]["b"].tolist() == [1.0, 1.0]
    with pytest.raises(FormatError):
        container.decode(b"QTZ2" + good[4:])
    with pytest.raises(FormatError):
        container.decode(good[:8])
    with pytest.raises(FormatError):
        container.decode(good[:4] + struct.pack("<Q", 10**6) + good[12:])
    with pytest.raises(FormatError):
        container.decode(good[:12] + b"x" + good[13:])

    def misalign(m):
        m["tensors"][1]["offset"] = 65

    def overlap(m):
        m["tensors"][1]["offset"] = 64
        m["tensors"][0]["length"] = 128
        m["tensors"][0]["shape"] = [128]

    def past_end(m):
        m["tensors"][1]["offset"] = 4096

    def missing(m):
        del m["tensors"][0]["dtype"]

    def wrong_length(m):
        m["tensors"][1]["shape"] = [3]

    for edit in (misalign, overlap, past_end, missing, wrong_length):
        with pytest.raises(FormatError):
            container.decode(_patch_manifest(good, edit))


def test_file_io(tmp_path):
    tensors = container_tensors()
    container.write(tmp_path / "x.qtz", tensors, CONTAINER_META)
    got, meta = container.read(tmp_path / "x.qtz")
    assert meta == CONTAINER_META and list(got) == [t[0] for t in tensors]


def test_golden_container():
    golden = (FIXTURES / "container.qtz").read_bytes()
    assert container_bytes() == golden == container_bytes()
    got, meta = container.decode(golden)
    assert meta == CONTAINER_META
    for name, dtype, arr in container_tensors():
        assert same_bits(got[name], arr) if dtype != "u4-packed" else np.array_equal(got[name], arr)
    assert container.encode([(n, d, got[n]) for n, d, _ in container_tensors()], meta) == golden
