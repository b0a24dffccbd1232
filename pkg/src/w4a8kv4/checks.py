"""User-visible self-checks driven by ``w4a8kv4 check <suite>``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .int_exec import dequant_stream, gemm_w4a8_per_channel, lane_sweep, pack_weight, reference_per_channel
from .kv_cache import dequant_fp16_trick, dequant_ops_count
from .progressive import dequantize_level1, level2_codes, level2_params, protective_sweep, quantize_progressive
from .quant_core import round_to_f16


@dataclass(frozen=True)
class CheckResult:
    name: str
    ok: bool
    detail: str


def f16_ulp(x) -> np.ndarray:
    """Spacing of binary16 numbers in the binade containing ``x``."""
    a = np.abs(np.asarray(x, dtype=np.float64))
    e = np.floor(np.log2(np.where(a > 0, a, 1.0)))
    return np.where(a >= 2.0**-14, 2.0 ** (e - 10), 2.0**-24)


def check_protective() -> CheckResult:
    good = protective_sweep(119)
    wide = protective_sweep(127)
    s, z = level2_params(-113, 120)
    rec = int((level2_codes(120, s, z) - z) * s)
    ok = good.ok and not wide.ok and rec == 128
    return CheckResult("protective", ok,
                       f"[-119,119]: {good.cases} cases, {good.reachable} reachable, {good.violations} violations; "
                       f"[-127,127]: {wide.violations} violations; group [-113,120] maps 120 to {rec}")


def check_lanes() -> CheckResult:
    r = lane_sweep()
    w = r.witness
    wit = "none" if w is None else f"code={w.code} zero={w.zero} scale={w.scale} sub-first lanes {w.sub_first}"
    return CheckResult("lanes", r.ok,
                       f"{r.cases} cases, {r.admissible} admissible, {r.mul_first_failures} multiply-first failures, "
                       f"{r.sub_first_failures} subtract-first failures; witness {wit}")


def check_gemm(instances: int = 200, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        m, n, k = rng.integers(1, 9), rng.integers(1, 65), rng.integers(1, 257)
        qx = rng.integers(-127, 128, size=(m, k))
        s_x = rng.uniform(1e-3, 1.0, m)
        qw = rng.integers(0, 16, size=(n, k))
        z_w = rng.integers(0, 16, n)
        s_w = rng.uniform(1e-3, 1.0, n)
        t_x = (qx * s_x[:, None]).sum(axis=1)
        got = gemm_w4a8_per_channel(qx, s_x, qw, z_w, s_w, t_x)
        ref = reference_per_channel(qx, s_x, qw, z_w, s_w)
        worst = max(worst, np.linalg.norm(got - ref) / max(np.linalg.norm(ref), 1e-300))
    mismatched = 0
    for _ in range(instances):
        n, k = 32 * rng.integers(1, 3), 128 * rng.integers(1, 3)
        pw = quantize_progressive(rng.standard_t(3, size=(n, k)), 128)
        if not np.array_equal(dequant_stream(pack_weight(pw.codes), pw), dequantize_level1(pw)):
            mismatched += 1
    ok = worst <= 1e-9 and mismatched == 0
    return CheckResult("gemm", ok, f"per-channel worst relative error {worst:.2e} over {instances}; "
                                   f"per-group stream mismatches {mismatched}/{instances}")


def check_kv(samples: int = 1000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    scale = np.atleast_1d(round_to_f16(2.0 ** rng.uniform(-8, 4, samples)))
    zero = np.atleast_1d(round_to_f16(rng.uniform(-4.0, 20.0, samples)))
    codes = np.arange(16)[:, None]
    got = dequant_fp16_trick(np.broadcast_to(codes, (16, samples)), scale[None, :], zero[None, :])
    ref = (codes - zero[None, :]) * scale[None, :]
    worst = float(np.max(np.abs(got - ref) / f16_ulp(ref)))
    ops = (dequant_ops_count("naive"), dequant_ops_count("trick"))
    ok = worst <= 1.0 and ops == (5, 2)
    return CheckResult("kv", ok, f"trick vs reference worst {worst:.3f} ulp over {16 * samples} values; "
                                 f"ops naive={ops[0]} trick={ops[1]}")


SUITES = {"protective": check_protective, "lanes": check_lanes, "gemm": check_gemm, "kv": check_kv}
