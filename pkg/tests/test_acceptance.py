"""End-to-end acceptance criteria, one test each.

Every test times its body against a budget and prints a single
``PASS criterion N: ...`` or ``FAIL criterion N: ...`` line, even without
``-s``. Run ``pytest tests/test_acceptance.py`` to see just these.
"""

import ast
import hashlib
import inspect
import subprocess
import sys
import textwrap
import time
from contextlib import contextmanager
from fractions import Fraction
from pathlib import Path

import numpy as np

from w4a8kv4 import container
from w4a8kv4.calib import fuse_smooth_into_projections, rope, smooth_attention_scales
from w4a8kv4.checks import f16_ulp
from w4a8kv4.int_exec import (
    dequant_stream,
    gemm_w4a8_per_channel,
    lane_sweep,
    pack_weight,
    precompute_token_sums,
    reference_per_channel,
    unpack_rlp,
)
from w4a8kv4.int_exec.layout import PackedTile, unpack_tile
from w4a8kv4.int_exec.lanes import dequant_sub_then_mul, lanes_of, signed_lanes, word_of
from w4a8kv4.kv_cache import KvPage, dequant_fp16_trick, dequant_ops_count
from w4a8kv4.pipeline import QuantRecipe, suite_cases, suite_mse
from w4a8kv4.progressive import dequantize_level1, level2_codes, level2_params, protective_sweep, quantize_progressive
from w4a8kv4.quant_core import round_to_f16
from w4a8kv4.roofline import A100, W4A8, W4A16, W8A8, crossover, gemm_attainable, turning_point

from .fixtures.make_fixtures import PAGE_SHAPE, container_tensors, tile_codes
from .oracles import matmul

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = Path(__file__).parent / "fixtures"


@contextmanager
def criterion(capsys, number: int, budget: float, what: str):
    """Time the body, print one PASS/FAIL line, then fail on overtime."""
    notes: list[str] = []
    start = time.perf_counter()
    ok = False
    try:
        yield notes
        ok = True
    finally:
        took = time.perf_counter() - start
        in_time = took < budget
        status = "PASS" if ok and in_time else "FAIL"
        detail = "; ".join(notes)
        if ok and not in_time:
            detail += "; over budget"
        with capsys.disabled():
            print(f"\n{status} criterion {number}: {what} ({took:.2f}s of {budget:g}s) {detail}")
    assert in_time, f"criterion {number} took {took:.2f}s, budget {budget:g}s"


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_criterion_01_protective_range(capsys):
    with criterion(capsys, 1, 5.0, "protective range sweep") as notes:
        good = protective_sweep(119)
        assert good.cases == 239**2 * 16 and good.violations == 0
        wide = protective_sweep(127)
        assert not wide.ok
        s, z = level2_params(-113, 120)
        code = int(level2_codes(120, s, z))
        assert (code, int(z), int(s)) == (15, 7, 16) and (code - z) * s == 128
        notes.append(f"[-119,119] {good.cases} cases, 0 violations; [-127,127] {wide.violations} violations, "
                     f"(15 - 7) * 16 = {(code - z) * s}")


def test_criterion_02_lane_arithmetic(capsys):
    with criterion(capsys, 2, 1.0, "lane arithmetic exactness") as notes:
        r = lane_sweep()
        assert r.cases == 16 * 16 * 16 and r.mul_first_failures == 0
        w = r.witness
        assert w is not None
        # replay the witness independently with wide integers
        word = word_of([w.code, w.zero, w.zero, w.zero])
        got = list(signed_lanes(dequant_sub_then_mul(word, w.scale, w.zero)))
        assert got != [(w.code - w.zero) * w.scale, 0, 0, 0]
        notes.append(f"{r.admissible} admissible cases exact; subtract-first witness "
                     f"code={w.code} zero={w.zero} scale={w.scale}")


def test_criterion_03_gemm_identity(capsys):
    with criterion(capsys, 3, 30.0, "per-channel GEMM identity") as notes:
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(1000):
            m, n, k = rng.integers(1, 9), rng.integers(1, 65), rng.integers(1, 257)
            qx = rng.integers(-127, 128, size=(m, k))
            s_x = rng.uniform(1e-3, 1.0, m)
            qw = rng.integers(0, 16, size=(n, k))
            z_w = rng.integers(0, 16, n)
            s_w = rng.uniform(1e-3, 1.0, n)
            got = gemm_w4a8_per_channel(qx, s_x, qw, z_w, s_w, precompute_token_sums(qx * s_x[:, None]))
            ref = reference_per_channel(qx, s_x, qw, z_w, s_w)
            if np.any(ref):
                worst = max(worst, rel(got, ref))
        assert worst <= 1e-9
        for _ in range(100):
            m, n, k = rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 17)
            qx = rng.integers(-127, 128, size=(m, k))
            qw = rng.integers(0, 16, size=(n, k))
            z_w = rng.integers(0, 16, n)
            s_x = np.array([Fraction(int(a), int(b)) for a, b in rng.integers(1, 100, size=(m, 2))], dtype=object)
            s_w = np.array([Fraction(int(a), int(b)) for a, b in rng.integers(1, 100, size=(n, 2))], dtype=object)
            x_hat = qx.astype(object) * s_x[:, None]
            t_x = np.array([sum(row) for row in x_hat], dtype=object)
            got = gemm_w4a8_per_channel(qx, s_x, qw, z_w, s_w, t_x)
            w_hat = (qw - z_w[:, None]).astype(object) * s_w[:, None]
            assert (got == np.array(matmul(x_hat.tolist(), w_hat.T.tolist()), dtype=object)).all()
        notes.append(f"worst relative error {worst:.1e} over 1000; 100 rational instances exact")


def test_criterion_04_operand_stream(capsys):
    with criterion(capsys, 4, 30.0, "per-group operand stream") as notes:
        rng = np.random.default_rng(4)
        for _ in range(1000):
            g = int(rng.choice([32, 64, 128]))
            n, k = 32 * int(rng.integers(1, 3)), 128 * int(rng.integers(1, 3))
            w = rng.standard_t(3, size=(n, k)) * rng.uniform(1e-3, 10.0)
            pw = quantize_progressive(w, g)
            assert np.array_equal(dequant_stream(pack_weight(pw.codes), pw), dequantize_level1(pw))
        notes.append("1000 weights bit-identical")


def test_criterion_05_rlp_unpack(capsys):
    with criterion(capsys, 5, 5.0, "three-op nibble unpack") as notes:
        rng = np.random.default_rng(5)
        corners = np.array([0, 0xFFFFFFFF, 0x0F0F0F0F, 0xF0F0F0F0, 0x80808080, 0x7F7F7F7F, 0x76543210],
                           dtype=np.uint32)
        w = np.concatenate([corners, rng.integers(0, 2**32, size=10**6, dtype=np.uint64).astype(np.uint32)])
        low, high = unpack_rlp(w)
        # reference: nibble 2i is the low half of byte i, nibble 2i+1 the high half
        nib = np.stack([(w.astype(np.uint64) >> np.uint64(4 * j)) & np.uint64(0xF) for j in range(8)], axis=1)
        assert np.array_equal(lanes_of(low), nib[:, 0::2]) and np.array_equal(lanes_of(high), nib[:, 1::2])
        tree = ast.parse(textwrap.dedent(inspect.getsource(unpack_rlp)))
        ops = sum(isinstance(n, ast.BinOp) for n in ast.walk(tree))
        assert ops == 3
        notes.append(f"{w.size} words match; {ops} logical ops")


def test_criterion_06_roofline(capsys):
    with criterion(capsys, 6, 1.0, "roofline numbers") as notes:
        m_range = range(1, 1025)
        cross = crossover(W4A16, W8A8, A100, m_range)
        assert cross == 78
        tp = turning_point(A100)
        assert abs(tp - 9.8) <= 0.2
        for m in m_range:
            assert gemm_attainable(m, W4A8) >= max(gemm_attainable(m, W4A16), gemm_attainable(m, W8A8))
        notes.append(f"crossover m={cross}; turning point {tp:.2f} ops/byte; W4A8 dominates 1..1024")


def test_criterion_07_smooth_attention(capsys):
    with criterion(capsys, 7, 5.0, "SmoothAttention correctness") as notes:
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(20):
            x = rng.normal(size=(16, 64))
            wq, wk = rng.normal(size=(64, 64)), rng.normal(size=(32, 64))
            wk[[3, 3 + 8]] *= 20.0  # an outlier channel pair
            sm = smooth_attention_scales(x @ wk.T, 0.5, head_dim=16)
            fq, fk = fuse_smooth_into_projections(wq, wk, sm)
            pos = np.arange(16)
            for h in range(4):  # query head h reads kv head h // 2
                qs = slice(16 * h, 16 * h + 16)
                ks = slice(16 * (h // 2), 16 * (h // 2) + 16)
                ref = rope(x @ wq[qs].T, pos) @ rope(x @ wk[ks].T, pos).T
                got = rope(x @ fq[qs].T, pos) @ rope(x @ fk[ks].T, pos).T
                worst = max(worst, rel(got, ref))
        assert worst <= 1e-9
        n, d = 10**4, 64
        x = rng.normal(size=(n, d))
        half = rng.uniform(0.05, 20.0, size=(n, d // 2))
        lam = np.concatenate([half, half], axis=1)
        pos = rng.integers(0, 100_000, n)
        diff = np.abs(rope(lam * x, pos) - lam * rope(x, pos))
        scale = np.maximum(1.0, np.abs(lam * rope(x, pos)))
        assert np.all(diff <= 1e-12 * scale)
        notes.append(f"fused scores worst {worst:.1e}; {n} RoPE triples max diff {diff.max():.1e}")


def test_criterion_08_kv_trick(capsys):
    with criterion(capsys, 8, 5.0, "KV fp16 trick path") as notes:
        rng = np.random.default_rng(8)
        scale = np.atleast_1d(round_to_f16(2.0 ** rng.uniform(-8, 4, 1000)))
        zero = np.atleast_1d(round_to_f16(rng.uniform(-4.0, 20.0, 1000)))
        codes = np.arange(16)[:, None]
        got = dequant_fp16_trick(np.broadcast_to(codes, (16, 1000)), scale, zero)
        ref = (codes - zero) * scale
        ulps = np.abs(got - ref) / f16_ulp(ref)
        assert np.all(ulps <= 1.0)
        ops = dequant_ops_count("trick"), dequant_ops_count("naive")
        assert ops == (2, 5)
        notes.append(f"16000 values within {ulps.max():.2f} ulp; ops trick={ops[0]} naive={ops[1]}")


def test_criterion_09_pipeline_direction(capsys):
    with criterion(capsys, 9, 60.0, "pipeline ablation direction") as notes:
        cases = suite_cases()
        rtn = suite_mse(QuantRecipe.rtn(group_size=128), cases)
        qoq = suite_mse(QuantRecipe(group_size=128), cases)
        per_channel = suite_mse(QuantRecipe(group_size=None), cases)
        assert qoq < rtn and qoq <= per_channel
        notes.append(f"MSE rtn={rtn:.3g} qoq g128={qoq:.3g} qoq per-channel={per_channel:.3g}")


BUILD = (
    "import hashlib, sys\n"
    "from tests.fixtures.make_fixtures import FIXTURES\n"
    "for name, build in FIXTURES.items():\n"
    "    print(name, hashlib.sha256(build()).hexdigest())\n"
)


def test_criterion_10_golden_fixtures(capsys):
    with criterion(capsys, 10, 5.0, "golden binary fixtures") as notes:
        golden = {p: (FIXTURES / p).read_bytes() for p in ("tile.bin", "page.bin", "container.qtz")}
        digests = {p: hashlib.sha256(b).hexdigest() for p, b in golden.items()}
        for run in range(2):  # separate interpreters, different hash seeds
            out = subprocess.run([sys.executable, "-c", BUILD], cwd=ROOT, capture_output=True, text=True,
                                 env={"PYTHONHASHSEED": str(run + 1), "PATH": ""}, check=True).stdout
            assert dict(line.split() for line in out.splitlines()) == digests
        tile = PackedTile.from_bytes(golden["tile.bin"])
        assert np.array_equal(unpack_tile(tile), tile_codes()) and tile.to_bytes() == golden["tile.bin"]
        page = KvPage.from_bytes(golden["page.bin"], PAGE_SHAPE["n_kv_heads"], PAGE_SHAPE["page_size"],
                                 PAGE_SHAPE["head_dim"], 4, 3)
        assert page.to_bytes() == golden["page.bin"]
        tensors, meta = container.decode(golden["container.qtz"])
        rebuilt = [(name, dtype, tensors[name]) for name, dtype, _ in container_tensors()]
        assert container.encode(rebuilt, meta) == golden["container.qtz"]
        notes.append("3 fixtures rebuilt in 2 interpreters and re-encoded bit-exactly")
