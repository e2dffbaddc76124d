"""Efficiency benchmarks and ablation sweeps.

Entry counts and attention-cell counts are the hardware-independent metrics;
wall-clock latency and throughput are reported alongside but are only
meaningful relative to another run on the same machine.
"""

from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import astuple, dataclass, replace

import numpy as np

from .kv_store import kv_entry_count
from .model import Model, ModelConfig, decode_step, init_model, perplexity, prefill
from .policies import CachePolicy, FullCachePolicy, PyramidPolicy, PyramidPolicyConfig

BENCH_COLUMNS = (
    "policy",
    "batch",
    "prefill",
    "gen",
    "kv_entries_peak",
    "kv_bytes_peak",
    "attn_cells",
    "sort_ops",
    "lat_ms_per_token",
    "thr_tok_s",
)


@dataclass
class BenchRecord:
    policy: str
    batch: int
    prefill: int
    gen: int
    kv_entries_peak: int
    kv_bytes_peak: int
    attn_cells: int
    sort_ops: int
    lat_ms_per_token: float
    thr_tok_s: float

    def row(self) -> tuple:
        return astuple(self)

    def work_row(self) -> tuple:
        """All columns except the wall-clock ones."""
        return self.row()[:-2]


def full_attn_cells(layers: int, heads: int, prefill_len: int, gen_len: int) -> int:
    """Closed-form attention cells of one uncompressed sequence."""
    p = prefill_len
    per_head = p * (p + 1) // 2 + gen_len * p + gen_len * (gen_len + 1) // 2
    return layers * heads * per_head


def _run_sequence(model: Model, policy: CachePolicy, prompt: np.ndarray, gen_len: int):
    out, caches = prefill(model, prompt, policy)
    counts = [kv_entry_count(caches)]
    for _ in range(gen_len):
        out, caches = decode_step(model, int(np.argmax(out.logits)), caches, policy)
        counts.append(kv_entry_count(caches))
    return counts, caches.attn_cells, caches.sort_ops


def run_bench(
    model: Model,
    policy: CachePolicy,
    batch: int,
    prefill_len: int,
    gen_len: int,
    seed: int = 0,
    bytes_per_element: int = 4,
    workers: int = 1,
) -> BenchRecord:
    """Prefill ``batch`` random prompts and greedily decode ``gen_len`` tokens each.

    Sequences are independent; the KV peak is taken over the step-wise sum of
    all sequences, as if the batch advanced in lockstep.
    """
    cfg = model.config
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    if prefill_len < 1 or gen_len < 0:
        raise ValueError(f"invalid lengths prefill={prefill_len} gen={gen_len}")
    if bytes_per_element not in (2, 4):
        raise ValueError(f"bytes_per_element must be 2 or 4, got {bytes_per_element}")
    if prefill_len + gen_len > cfg.max_seq:
        raise ValueError(
            f"length violation: {prefill_len}+{gen_len} exceeds max_seq {cfg.max_seq}"
        )
    rng = np.random.default_rng(seed)
    prompts = [rng.integers(0, cfg.vocab, prefill_len) for _ in range(batch)]

    t0 = time.perf_counter()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda p: _run_sequence(model, policy, p, gen_len), prompts))
    else:
        results = [_run_sequence(model, policy, p, gen_len) for p in prompts]
    wall = time.perf_counter() - t0

    stepwise = np.sum([r[0] for r in results], axis=0)
    peak = int(stepwise.max())
    tokens = batch * (gen_len if gen_len else prefill_len)
    return BenchRecord(
        policy=policy.name,
        batch=batch,
        prefill=prefill_len,
        gen=gen_len,
        kv_entries_peak=peak,
        kv_bytes_peak=2 * peak * cfg.heads * cfg.head_dim * bytes_per_element,
        attn_cells=int(sum(r[1] for r in results)),
        sort_ops=int(sum(r[2] for r in results)),
        lat_ms_per_token=1000.0 * wall / tokens,
        thr_tok_s=tokens / wall if wall > 0 else float("inf"),
    )


def write_bench_csv(path, records) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(BENCH_COLUMNS)
        for r in records:
            w.writerow(r.row())


# --------------------------------------------------------------------------
# sweeps


@dataclass
class RecentRatioRow:
    ratio: float
    kv_ratio: float
    perplexity: float
    record: BenchRecord


def sweep_recent_ratio(
    model: Model,
    ratios,
    base: PyramidPolicyConfig | None = None,
    prefill_len: int = 256,
    gen_len: int = 32,
    eval_tokens=None,
    seed: int = 0,
) -> list[RecentRatioRow]:
    """KV size relative to full cache and perplexity for each recent-window ratio.

    Perplexity scores ``eval_tokens[prefill_len:]`` after prefilling the first
    ``prefill_len`` eval tokens under the policy. Without ``eval_tokens`` only
    the KV ratio is computed (perplexity is NaN).
    """
    base = base or PyramidPolicyConfig()
    full = run_bench(model, FullCachePolicy(), 1, prefill_len, gen_len, seed)
    rows = []
    for r in ratios:
        if not 0.0 < r < 1.0:
            raise ValueError(f"recent ratio must be in (0, 1), got {r}")
        policy = PyramidPolicy(replace(base, recent_ratio=float(r)))
        rec = run_bench(model, policy, 1, prefill_len, gen_len, seed)
        ppl = float("nan")
        if eval_tokens is not None:
            ppl = perplexity(model, eval_tokens, policy, prompt_len=prefill_len)
        rows.append(RecentRatioRow(float(r), rec.kv_entries_peak / full.kv_entries_peak, ppl, rec))
    return rows


RECENT_RATIO_COLUMNS = ("ratio", "kv_ratio", "perplexity", "kv_entries_peak", "attn_cells")


def recent_ratio_csv_rows(rows):
    for r in rows:
        yield r.ratio, r.kv_ratio, r.perplexity, r.record.kv_entries_peak, r.record.attn_cells


@dataclass
class BatchSweep:
    records: list[BenchRecord]
    crossover: int | None

    def rows(self):
        by_batch: dict[int, dict[str, BenchRecord]] = {}
        for rec in self.records:
            by_batch.setdefault(rec.batch, {})[rec.policy] = rec
        for b, recs in sorted(by_batch.items()):
            full, pyr = recs["full"], recs["pyramid"]
            yield (
                b,
                full.thr_tok_s,
                pyr.thr_tok_s,
                pyr.thr_tok_s / full.thr_tok_s,
                full.attn_cells,
                pyr.attn_cells,
                pyr.sort_ops,
            )


BATCH_COLUMNS = (
    "batch",
    "full_thr_tok_s",
    "pyramid_thr_tok_s",
    "thr_ratio",
    "full_attn_cells",
    "pyramid_attn_cells",
    "pyramid_sort_ops",
)


def sweep_batch(
    model: Model,
    full: CachePolicy,
    pyramid: CachePolicy,
    batches,
    prefill_len: int = 256,
    gen_len: int = 32,
    seed: int = 0,
    workers: int = 1,
) -> BatchSweep:
    """Throughput of both policies per batch size.

    ``crossover`` is the first batch size where the pyramid throughput meets
    or beats full cache (``None`` if it never does). It is reported only;
    wall-clock behaviour depends on the machine.
    """
    batches = list(batches)
    if batches != sorted(batches):
        raise ValueError("batches must be ascending")
    records, crossover = [], None
    for b in batches:
        f = run_bench(model, full, b, prefill_len, gen_len, seed, workers=workers)
        p = run_bench(model, pyramid, b, prefill_len, gen_len, seed, workers=workers)
        records += [f, p]
        if crossover is None and p.thr_tok_s >= f.thr_tok_s:
            crossover = b
    return BatchSweep(records, crossover)


# --------------------------------------------------------------------------
# position encoding ablation

POSITION_COLUMNS = ("rope_mode", "policy", "prompt_len", "eval_len", "perplexity", "kv_entries")


def position_ablation(
    config: ModelConfig,
    policy_factory,
    eval_tokens,
    prompt_len: int,
) -> list[tuple]:
    """Perplexity of the same weights under gathered vs re-encoded positions."""
    rows = []
    for mode in ("gather", "reencode"):
        model = init_model(replace(config, rope_mode=mode))
        policy = policy_factory()
        ppl = perplexity(model, eval_tokens, policy, prompt_len=prompt_len)
        _, caches = prefill(model, np.asarray(eval_tokens)[:prompt_len], policy_factory())
        rows.append((mode, policy.name, prompt_len, len(eval_tokens), ppl, kv_entry_count(caches)))
    return rows


def write_rows(path, columns, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(columns)
        w.writerows(rows)

