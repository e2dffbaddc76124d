"""Command-line entry point: ``pykv generate|bench|analyze|position``.

Exit codes: 0 success, 2 usage or config error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import numpy as np

from . import analysis, bench
from .config import ConfigError, EngineConfig, build_policy, load_config
from .kv_store import kv_bytes, kv_entry_count
from .model import generate, init_model, sample_tokens
from .policies import POLICY_NAMES
from .trace import TraceError, load_trace, save_trace

log = logging.getLogger("pykv")

EXIT_USAGE = 2
EXIT_RUNTIME = 3
EVAL_TEMPERATURE = 0.3


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _policies(text: str) -> list[str]:
    names = [x.strip() for x in text.split(",") if x.strip()]
    bad = [n for n in names if n not in POLICY_NAMES]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"unknown policy {bad or text!r}; choose from {POLICY_NAMES}")
    return names


def run_seed(cfg: EngineConfig) -> int:
    env = os.environ.get("PYKV_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"PYKV_SEED must be an integer, got {env!r}") from None
    return cfg.seed


def _config(path) -> EngineConfig:
    return load_config(path) if path else EngineConfig()


# --------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    cfg = _config(args.config)
    seed = run_seed(cfg)
    model = init_model(cfg.model)
    if args.prompt_bytes:
        with open(args.prompt_bytes, "rb") as f:
            data = f.read()
        if cfg.model.vocab < 256:
            raise UsageError(f"--prompt-bytes needs vocab >= 256, config has {cfg.model.vocab}")
        prompt = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
        if prompt.size == 0:
            raise ValueError(f"prompt file {args.prompt_bytes} is empty")
    else:
        prompt = np.random.default_rng(seed).integers(0, cfg.model.vocab, args.prompt_random)
    policy = build_policy(cfg, args.policy)

    def on_step(step, tok, caches):
        if args.verbose:
            print(f"step {step} token {tok} cache {' '.join(map(str, caches.lengths()))}")

    tokens, caches = generate(model, prompt, args.steps, policy, on_step=on_step)
    print("tokens:", " ".join(map(str, tokens)))
    print(
        f"policy={policy.name} prompt={len(prompt)} steps={args.steps} "
        f"cache={','.join(map(str, caches.lengths()))} "
        f"kv_entries={kv_entry_count(caches)} "
        f"kv_bytes={kv_bytes(caches, cfg.model.heads, cfg.model.head_dim)} "
        f"attn_cells={caches.attn_cells}"
    )
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args.config)
    seed = run_seed(cfg)
    model = init_model(cfg.model)
    records = []
    for batch in args.batch:
        for name in args.policy:
            rec = bench.run_bench(
                model, build_policy(cfg, name), batch, args.prefill, args.gen, seed, workers=args.workers
            )
            records.append(rec)
            log.info("%s", rec)
    out = args.csv or cfg.run.get("csv")
    if out:
        bench.write_bench_csv(out, records)
    else:
        _print_csv(bench.BENCH_COLUMNS, (r.row() for r in records))
    return 0


def _print_csv(columns, rows):
    w = csv.writer(sys.stdout)
    w.writerow(columns)
    w.writerows(rows)


def _analysis_source(args):
    """Return (trace or None, model or None, config or None)."""
    if args.trace:
        return load_trace(args.trace), None, None
    cfg = load_config(args.model_config)
    return None, init_model(cfg.model), cfg


def cmd_analyze(args) -> int:
    if bool(args.trace) == bool(args.model_config):
        raise UsageError("exactly one of --trace / --model-config is required")
    if args.kind == "icr" and args.trace:
        raise UsageError("icr needs --model-config (it reruns the model)")
    trace, model, cfg = _analysis_source(args)
    seed = run_seed(cfg) if cfg else 0

    if args.kind == "icr":
        tokens = sample_tokens(model, args.eval_len, seed, EVAL_TEMPERATURE)
        report = analysis.icr_report(model, tokens, args.grid, args.layers)
        columns, rows = analysis.ICR_COLUMNS, list(report.rows())
    else:
        if trace is None:
            tokens = sample_tokens(model, args.seq_len, seed, EVAL_TEMPERATURE)
            trace = analysis.capture_trace(model, tokens)
            if args.trace_out:
                save_trace(trace, args.trace_out)
        if args.kind == "rac":
            report = analysis.rac_heatmap(
                trace, args.d_grid, args.top_p, args.mode, ensemble_span=args.span
            )
            columns, rows = analysis.RAC_COLUMNS, list(report.rows())
        else:
            report = analysis.nonshared_overlap(trace, args.top_p)
            if report.degenerate:
                print("note: no non-shared PvCs at this top-p (degenerate case)", file=sys.stderr)
            columns, rows = analysis.NONSHARED_COLUMNS, list(report.rows())

    if args.csv:
        analysis.write_csv(args.csv, columns, rows)
    else:
        _print_csv(columns, rows)
    return 0


def cmd_position(args) -> int:
    cfg = _config(args.config)
    seed = run_seed(cfg)
    model = init_model(cfg.model)
    tokens = sample_tokens(model, args.prompt_len + args.eval_len, seed, EVAL_TEMPERATURE)
    rows = bench.position_ablation(
        cfg.model, lambda: build_policy(cfg, "pyramid"), tokens, args.prompt_len
    )
    if args.csv:
        bench.write_rows(args.csv, bench.POSITION_COLUMNS, rows)
    else:
        _print_csv(bench.POSITION_COLUMNS, rows)
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pykv", description="KV-cache compression toy engine")
    ap.add_argument("-v", "--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="greedy generation with a cache policy")
    g.add_argument("--config")
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--prompt-bytes", metavar="FILE")
    src.add_argument("--prompt-random", type=int, metavar="LEN")
    g.add_argument("--steps", type=int, default=16)
    g.add_argument("--policy", choices=POLICY_NAMES)
    g.add_argument("--verbose", action="store_true")
    g.set_defaults(func=cmd_generate)

    b = sub.add_parser("bench", help="efficiency benchmark, CSV output")
    b.add_argument("--config")
    b.add_argument("--batch", type=_ints, required=True)
    b.add_argument("--prefill", type=int, default=512)
    b.add_argument("--gen", type=int, default=128)
    b.add_argument("--policy", type=_policies, default=["full", "pyramid"])
    b.add_argument("--csv")
    b.add_argument("--workers", type=int, default=1)
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("analyze", help="ICR / RAC / non-shared PvC measurements")
    a.add_argument("kind", choices=("icr", "rac", "nonshared"))
    a.add_argument("--trace")
    a.add_argument("--model-config")
    a.add_argument("--csv")
    a.add_argument("--top-p", type=float, default=0.8)
    a.add_argument("--mode", choices=("separate", "ensemble"), default="separate")
    a.add_argument("--d-grid", type=_floats, default=list(analysis.DEFAULT_D_GRID))
    a.add_argument("--span", type=float, default=0.10)
    a.add_argument("--grid", type=_floats, default=[0.2, 0.4, 0.6, 0.8, 1.0])
    a.add_argument("--layers", type=_ints)
    a.add_argument("--eval-len", type=int, default=96)
    a.add_argument("--seq-len", type=int, default=200)
    a.add_argument("--trace-out")
    a.set_defaults(func=cmd_analyze)

    p = sub.add_parser("position", help="gather vs re-encode position ablation")
    p.add_argument("--config")
    p.add_argument("--prompt-len", type=int, default=128)
    p.add_argument("--eval-len", type=int, default=64)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_position)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as e:
        print(f"pykv: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TraceError as e:
        print(f"pykv: trace error [{e.code}]: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, OSError) as e:
        print(f"pykv: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
