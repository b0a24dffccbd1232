"""Roofline model for quantized GEMM and decode attention.

Throughput is ``min(peak, intensity * bandwidth)``. GEMM intensity counts
weight traffic only by default, which is the regime of small-batch serving
where ``n, k >> m``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import InvalidConfig, InvalidInput

PRECISIONS = ("fp16", "int8", "int4", "fp32_cuda")


@dataclass(frozen=True)
class HardwareSpec:
    name: str
    peak_ops: dict = field(hash=False)  # precision -> Ops/s
    mem_bandwidth: float                # bytes/s

    def __post_init__(self):
        if self.mem_bandwidth <= 0:
            raise InvalidConfig("memory bandwidth must be positive")
        for k, v in self.peak_ops.items():
            if v <= 0:
                raise InvalidConfig(f"peak for {k} must be positive")

    def peak(self, precision: str) -> float:
        try:
            return float(self.peak_ops[precision])
        except KeyError:
            raise InvalidConfig(f"hardware {self.name!r} has no peak for {precision!r}") from None

    def scaled(self, factor: float) -> "HardwareSpec":
        return HardwareSpec(self.name, {k: v * factor for k, v in self.peak_ops.items()}, self.mem_bandwidth * factor)

    @classmethod
    def from_config(cls, path: str | Path) -> "HardwareSpec":
        """Read ``key = value`` lines: ``name``, ``mem_bandwidth`` and one
        ``peak.<precision>`` per precision. ``#`` starts a comment."""
        name, bw, peaks = Path(path).stem, None, {}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidConfig(f"{path}:{lineno}: expected key = value")
            key, val = (p.strip() for p in line.split("=", 1))
            if key == "name":
                name = val
                continue
            try:
                num = float(val)
            except ValueError:
                raise InvalidConfig(f"{path}:{lineno}: {val!r} is not a number") from None
            if key == "mem_bandwidth":
                bw = num
            elif key.startswith("peak."):
                peaks[key[5:]] = num
            else:
                raise InvalidConfig(f"{path}:{lineno}: unknown key {key!r}")
        if bw is None:
            raise InvalidConfig(f"{path}: mem_bandwidth missing")
        return cls(name, peaks, bw)


A100 = HardwareSpec(
    "A100",
    {"fp16": 312e12, "int8": 624e12, "int4": 1248e12, "fp32_cuda": 19.6e12},
    2e12,
)


@dataclass(frozen=True)
class PrecisionConfig:
    name: str
    weight_bits: int
    act_bits: int
    kv_bits: int
    compute: str

    def __post_init__(self):
        if self.compute not in PRECISIONS:
            raise InvalidConfig(f"unknown compute precision {self.compute!r}")
        expected = {16: "fp16", 8: "int8", 4: "int4"}.get(self.act_bits)
        if expected != self.compute:
            raise InvalidConfig(f"{self.name}: {self.act_bits}-bit activations need {expected} compute, not {self.compute}")


W4A16 = PrecisionConfig("W4A16", 4, 16, 16, "fp16")
W8A8 = PrecisionConfig("W8A8", 8, 8, 8, "int8")
W4A8 = PrecisionConfig("W4A8", 4, 8, 4, "int8")
W4A4 = PrecisionConfig("W4A4", 4, 4, 4, "int4")
PRESETS = {c.name: c for c in (W4A16, W8A8, W4A8, W4A4)}


def gemm_intensity(m: int, cfg: PrecisionConfig, with_activations: bool = False, n: int = 4096, k: int = 4096) -> float:
    """Ops per byte of a ``m x k`` by ``k x n`` GEMM (2 Ops per MAC).

    Weight-only traffic gives ``2 m * 8 / weight_bits``. With activations,
    input and fp16 output traffic for the given ``n, k`` is added.
    """
    if m < 1:
        raise InvalidInput("m must be at least 1")
    ops = 2.0 * m * n * k
    traffic = n * k * cfg.weight_bits / 8
    if with_activations:
        traffic += m * k * cfg.act_bits / 8 + m * n * 2
    return ops / traffic


def gemm_attainable(m: int, cfg: PrecisionConfig, hw: HardwareSpec = A100, with_activations: bool = False) -> float:
    return min(hw.peak(cfg.compute), gemm_intensity(m, cfg, with_activations) * hw.mem_bandwidth)


def gemm_bound(m: int, cfg: PrecisionConfig, hw: HardwareSpec = A100) -> str:
    peak = hw.peak(cfg.compute)
    return "compute" if gemm_intensity(m, cfg) * hw.mem_bandwidth >= peak else "memory"


@dataclass(frozen=True)
class AttentionBound:
    bound: str           # "memory" or "compute"
    intensity: float     # Ops per byte of KV traffic
    turning_point: float
    margin: float        # intensity / turning point

    @property
    def memory_bound(self) -> bool:
        return self.bound == "memory"


def turning_point(hw: HardwareSpec = A100, accum: str = "fp32") -> float:
    """Ops/byte at which the CUDA-core roof meets the bandwidth slope."""
    if accum not in ("fp32", "fp16"):
        raise InvalidInput(f"accumulation must be fp32 or fp16, got {accum!r}")
    peak = hw.peak("fp32_cuda") * (2.0 if accum == "fp16" else 1.0)
    return peak / hw.mem_bandwidth


def attention_bound(kv_bits: int, dequant_ops: int, accum: str = "fp32", hw: HardwareSpec = A100) -> AttentionBound:
    """Classify decode attention on CUDA cores.

    Each cached element costs one MAC (2 Ops) plus its dequantization ops;
    one byte holds ``8 / kv_bits`` elements.
    """
    if kv_bits <= 0 or dequant_ops < 0:
        raise InvalidInput("kv_bits must be positive and dequant_ops non-negative")
    intensity = (2 + dequant_ops) * 8 / kv_bits
    tp = turning_point(hw, accum)
    bound = "compute" if intensity > tp else "memory"
    return AttentionBound(bound, intensity, tp, intensity / tp)


def crossover(cfg_a: PrecisionConfig, cfg_b: PrecisionConfig, hw: HardwareSpec = A100,
              m_range: Iterable[int] = range(1, 1025)) -> int | None:
    """Smallest m where ``b`` catches up with ``a`` after ``a`` has led.

    Catching up only counts if ``b`` later pulls strictly ahead; two configs
    that merely meet on the same compute roof do not cross.
    """
    ms = list(m_range)
    if not ms:
        raise InvalidInput("m_range is empty")
    diff = [gemm_attainable(m, cfg_a, hw) - gemm_attainable(m, cfg_b, hw) for m in ms]
    a_led = False
    for i, d in enumerate(diff):
        if d > 0:
            a_led = True
        elif a_led and any(x < 0 for x in diff[i:]):
            return ms[i]
    return None


def sweep_rows(configs: Sequence[PrecisionConfig], m_values: Iterable[int], hw: HardwareSpec = A100):
    rows = []
    for m in m_values:
        for cfg in configs:
            rows.append((m, cfg.name, gemm_attainable(m, cfg, hw), gemm_bound(m, cfg, hw)))
    return rows


def to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["m", "config", "ops_per_s", "bound"])
    for m, name, ops, bound in rows:
        w.writerow([m, name, repr(float(ops)), bound])
    return buf.getvalue()


def write_svg(rows, path: str | Path, title: str = "roofline") -> None:
    """Attainable throughput vs m, log-log. Output is byte-stable across runs."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "w4a8kv4"
    series: dict[str, tuple[list, list]] = {}
    for m, name, ops, _ in rows:
        xs, ys = series.setdefault(name, ([], []))
        xs.append(m)
        ys.append(ops / 1e12)
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, (xs, ys) in series.items():
        ax.plot(xs, ys, label=name)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("m (tokens)")
    ax.set_ylabel("attainable TOPS")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
