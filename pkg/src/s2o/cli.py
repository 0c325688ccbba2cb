"""Command line: ``s2o gen | run | sweep | heatmap``.

Exit codes: 0 ok, 1 run failure, 2 bad arguments.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .attention import TileSpec, causal_attention_probs
from .harness import VARIANTS, RunConfig, load_inputs, run_sweep, threads_from_env
from .io import HEATMAP_MODES, export_heatmap, permuted_heatmap, save_tensor_file
from .plan import build_plan
from .synthetic import PATTERNS, SyntheticSpec, generate_synthetic

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


def _csv_list(kind):
    def parse(text):
        try:
            return [kind(x) for x in text.split(",") if x.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a comma-separated list, got {text!r}")

    return parse


def _tile(text):
    parts = text.lower().replace(",", "x").split("x")
    try:
        bm, bn = (int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"tile must look like 16x16, got {text!r}")
    return TileSpec(bm, bn)


def _add_input_args(p):
    p.add_argument("--input", help="directory holding q.s2ot, k.s2ot, v.s2ot")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--seq-len", type=int, default=2048)
    p.add_argument("--head-dim", type=int, default=64)
    p.add_argument("--pattern", choices=PATTERNS, default="mixed")
    p.add_argument("--stripe-count", type=int, default=64)
    p.add_argument("--stripe-gain", type=float, default=8.0)
    p.add_argument("--seed", type=int, default=0)


def _add_run_args(p, sweep: bool):
    many = "comma-separated list" if sweep else "single value"
    p.add_argument("--segment-len", type=_csv_list(int), default=[128], help=many)
    p.add_argument("--tau", type=_csv_list(float), default=[0.005], help=many)
    p.add_argument("--k", type=_csv_list(int), default=[8], help=f"baseline-topk budget, {many}")
    p.add_argument("--variant", type=_csv_list(str), default=["two-pass"], help=f"{many} of {', '.join(VARIANTS)}")
    p.add_argument("--tile", type=_tile, default=TileSpec(16, 16), help="BMxBN, e.g. 16x16")
    p.add_argument("--block", type=_tile, help="baseline block shape; defaults to --tile")
    p.add_argument("--stop-mode", choices=("row", "tile"), default="row")
    p.add_argument("--repeats", type=int, default=3, help="timed runs after one warm-up")
    p.add_argument("--out", required=True, help="report path prefix; writes PREFIX.json and PREFIX.csv")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="s2o", description="Permuted sparse attention benchmark harness")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="write synthetic Q/K/V as S2OT files")
    _add_input_args(gen)
    gen.add_argument("--out", required=True, help="output directory")

    run = sub.add_parser("run", help="evaluate a single configuration")
    _add_input_args(run)
    _add_run_args(run, sweep=False)

    sweep = sub.add_parser("sweep", help="evaluate a grid of configurations")
    _add_input_args(sweep)
    _add_run_args(sweep, sweep=True)

    hm = sub.add_parser("heatmap", help="export the dense attention map in original or permuted order")
    _add_input_args(hm)
    hm.add_argument("--segment-len", type=int, default=128)
    hm.add_argument("--mode", choices=HEATMAP_MODES, default="original")
    hm.add_argument("--pool", type=int, default=1, help="pixel = pool x pool block of summed mass")
    hm.add_argument("--z", type=int, default=0)
    hm.add_argument("--head", type=int, default=0)
    hm.add_argument("--csv", help="also write the (pooled) mass as CSV")
    hm.add_argument("--out", required=True, help="output .pgm path")
    return parser


def _synthetic(args) -> SyntheticSpec:
    return SyntheticSpec(args.pattern, args.stripe_count, args.stripe_gain, args.seed)


def _dims(args):
    return (args.batch, args.heads, args.seq_len, args.head_dim)


def _run_config(args, sweep: bool) -> RunConfig:
    if not sweep:
        for name in ("segment_len", "tau", "k", "variant"):
            if len(getattr(args, name)) != 1:
                raise ValueError(f"run takes a single --{name.replace('_', '-')}; use sweep for grids")
    block = (args.block.block_m, args.block.block_n) if args.block else None
    return RunConfig(
        dims=_dims(args),
        synthetic=None if args.input else _synthetic(args),
        input_dir=args.input,
        segment_lens=args.segment_len,
        taus=args.tau,
        tiles=args.tile,
        variants=args.variant,
        ks=args.k,
        block=block,
        stop_mode=args.stop_mode,
        repeats=args.repeats,
        threads=threads_from_env(),
        out_json=f"{args.out}.json",
        out_csv=f"{args.out}.csv",
    )


def _gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, t in zip("qkv", generate_synthetic(_synthetic(args), _dims(args))):
        save_tensor_file(t, out / f"{name}.s2ot")
    return EXIT_OK


def _heatmap(args) -> int:
    cfg = RunConfig(dims=_dims(args), synthetic=None if args.input else _synthetic(args), input_dir=args.input)
    Q, K, _ = load_inputs(cfg)
    probs = causal_attention_probs(Q[args.z, args.head], K[args.z, args.head])
    plan = None
    if args.mode != "original":
        sl = (slice(args.z, args.z + 1), slice(args.head, args.head + 1))
        plan, _ = build_plan(Q[sl], K[sl], args.segment_len)
    weights = permuted_heatmap(probs, plan, args.mode)
    export_heatmap(weights, args.out, pool=args.pool, csv_path=args.csv)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "gen":
            return _gen(args)
        if args.command == "heatmap":
            return _heatmap(args)
        cfg = _run_config(args, sweep=args.command == "sweep")
    except ValueError as exc:
        print(f"s2o: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        run_sweep(cfg)
    except Exception as exc:
        print(f"s2o: run failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
