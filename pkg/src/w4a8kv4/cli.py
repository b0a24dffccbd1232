"""``w4a8kv4`` command-line interface.

Exit codes: 0 success, 1 check failure or IO/format error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import pipeline, roofline
from .checks import SUITES
from .errors import QuantError
from .kv_cache import KvPageStore, attention_decode, attention_reference, smooth_keys
from .calib import smooth_attention_scales


def _recipe_from(args) -> pipeline.QuantRecipe:
    grid = None
    if args.clip_grid:
        grid = tuple(float(v) for v in args.clip_grid.split(","))
    elif not args.no_clip:
        grid = pipeline.QuantRecipe().clip_grid
    return pipeline.QuantRecipe(
        rotate=not args.no_rotate,
        smooth_attention=None if args.alpha_smooth < 0 else args.alpha_smooth,
        output_smooth=None if args.alpha_output < 0 else args.alpha_output,
        reorder=not args.no_reorder,
        clip_grid=grid,
        group_size=None if args.per_channel else args.group_size,
        kv_bits=args.kv_bits,
    )


def cmd_make_block(args) -> int:
    blk = pipeline.make_block(args.seed, n_heads=args.heads, n_kv_heads=args.kv_heads,
                              head_dim=args.head_dim, hidden=args.hidden)
    x = pipeline.make_inputs(1000 + args.seed, args.tokens, args.hidden)
    Path(args.out).write_bytes(pipeline.block_to_container(blk, x))
    print(f"wrote {args.out}")
    return 0


def cmd_quantize(args) -> int:
    blk, x = pipeline.block_from_container(Path(args.input).read_bytes())
    if x is None:
        x = pipeline.make_inputs(1000 + args.seed, 64, blk.hidden)
    recipe = _recipe_from(args)
    qb = pipeline.apply_qoq(blk, recipe, pipeline.calibrate(blk, x))
    Path(args.out).write_bytes(pipeline.qblock_to_container(qb))
    print(json.dumps({"recipe": recipe.to_record(), "clip": qb.record.get("clip", {})}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    blk, _ = pipeline.block_from_container(Path(args.block).read_bytes())
    qb = pipeline.qblock_from_container(Path(args.quantized).read_bytes())
    x = pipeline.make_inputs(2000 + args.seed, args.tokens, blk.hidden)
    rep = pipeline.evaluate_fidelity(blk, qb, x)
    text = json.dumps(rep.to_dict(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_check(args) -> int:
    res = SUITES[args.suite]()
    print(f"{'PASS' if res.ok else 'FAIL'} {res.name}: {res.detail}")
    return 0 if res.ok else 1


def cmd_roofline(args, parser) -> int:
    if args.m_min < 1 or args.m_max < args.m_min:
        parser.error(f"empty m range [{args.m_min}, {args.m_max}]")
    hw = roofline.HardwareSpec.from_config(args.hw) if args.hw else roofline.A100
    try:
        cfgs = [roofline.PRESETS[c] for c in args.configs.split(",")]
    except KeyError as exc:
        parser.error(f"unknown precision config {exc}; choose from {sorted(roofline.PRESETS)}")
    rows = roofline.sweep_rows(cfgs, range(args.m_min, args.m_max + 1), hw)
    out = Path(args.out)
    out.with_suffix(".csv").write_text(roofline.to_csv(rows))
    roofline.write_svg(rows, out.with_suffix(".svg"), f"{hw.name} roofline")
    for a, b in zip(cfgs, cfgs[1:]):
        m = roofline.crossover(a, b, hw, range(args.m_min, args.m_max + 1))
        print(f"crossover {a.name} -> {b.name}: {m}")
    print(f"wrote {out.with_suffix('.csv')} and {out.with_suffix('.svg')}")
    return 0


def cmd_kv_sim(args) -> int:
    """Decode a synthetic trace with outlier key channels, with and without smoothing."""
    rng = np.random.default_rng(args.seed)
    hk, d, h = 2, args.head_dim, 4
    k = rng.standard_normal((args.tokens, hk, d))
    k[..., [1, 1 + d // 2]] *= 15.0
    v = rng.standard_normal((args.tokens, hk, d))
    q = rng.standard_normal((args.tokens, h, d))
    sm = None if args.alpha_smooth < 0 else smooth_attention_scales(k.reshape(args.tokens, -1), args.alpha_smooth, d)
    store = KvPageStore(hk, d, args.page_size, args.kv_bits)
    errs = []
    for t in range(args.tokens):
        store.append_token(k[t] if sm is None else smooth_keys(k[t], sm), v[t])
        got = attention_decode(store, q[t], sm)
        ref = attention_reference(q[t], k[: t + 1], v[: t + 1])
        errs.append(np.linalg.norm(got - ref) / np.linalg.norm(ref))
    print(json.dumps({"tokens": args.tokens, "pages": len(store.pages), "kv_bits": args.kv_bits,
                      "smooth": sm is not None, "mean_rel_err": float(np.mean(errs)),
                      "max_rel_err": float(np.max(errs))}, sort_keys=True))
    return 0


def _recipe_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--group-size", type=int, default=64)
    p.add_argument("--per-channel", action="store_true", help="per-channel weights instead of groups")
    p.add_argument("--alpha-smooth", type=float, default=0.5, help="SmoothAttention alpha; negative disables")
    p.add_argument("--alpha-output", type=float, default=0.1, help="output smoothing alpha; negative disables")
    p.add_argument("--clip-grid", type=str, default=None, help="comma-separated clip ratios")
    p.add_argument("--no-clip", action="store_true")
    p.add_argument("--no-rotate", action="store_true")
    p.add_argument("--no-reorder", action="store_true")
    p.add_argument("--kv-bits", type=int, default=4, choices=(4, 8, 16))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="w4a8kv4", description="W4A8KV4 quantization toolkit and integer simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-block", help="write a random toy block container")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--kv-heads", type=int, default=2)
    p.add_argument("--head-dim", type=int, default=16)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--tokens", type=int, default=64, help="calibration tokens stored alongside")
    p.add_argument("--out", required=True)

    p = sub.add_parser("quantize", help="apply the quantization pipeline to a block container")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _recipe_flags(p)

    p = sub.add_parser("eval", help="fidelity report of a quantized block against its source")
    p.add_argument("block")
    p.add_argument("quantized")
    p.add_argument("--tokens", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)

    p = sub.add_parser("check", help="run an exhaustive self-check suite")
    p.add_argument("suite", choices=sorted(SUITES))

    p = sub.add_parser("roofline", help="emit roofline CSV and SVG")
    p.add_argument("--hw", default=None, help="hardware key=value config (default: A100 preset)")
    p.add_argument("--configs", default="W4A16,W8A8,W4A8")
    p.add_argument("--m-min", type=int, default=1)
    p.add_argument("--m-max", type=int, default=1024)
    p.add_argument("--out", required=True, help="output path prefix")

    p = sub.add_parser("kv-sim", help="decode a synthetic trace through the paged KV cache")
    p.add_argument("--tokens", type=int, default=128)
    p.add_argument("--head-dim", type=int, default=16)
    p.add_argument("--page-size", type=int, default=64)
    p.add_argument("--kv-bits", type=int, default=4, choices=(4, 8))
    p.add_argument("--alpha-smooth", type=float, default=0.5, help="negative disables smoothing")
    p.add_argument("--seed", type=int, default=0)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"make-block": cmd_make_block, "quantize": cmd_quantize, "eval": cmd_eval,
                "check": cmd_check, "kv-sim": cmd_kv_sim}
    try:
        if args.command == "roofline":
            return cmd_roofline(args, parser)
        return handlers[args.command](args)
    except (OSError, QuantError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
