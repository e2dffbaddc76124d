"""Attention measurements behind layer-wise PvC selection.

* ICR sweeps: perplexity when a single layer keeps only its top-p context.
* RAC heatmaps: how well the PvC chosen by a recent token (or an ensemble of
  recent tokens) overlaps the PvC chosen by the last token.
* Non-shared PvC study: where the PvC entries a probe does *not* share with
  the last token end up for later tokens.

Token ``i`` (0-based) of an ``n``-token sequence has recent ratio
``d = (n - 1 - i) / n``; the last token has ``d = 0``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .model import Model, perplexity, prefill
from .policies import PyramidPolicy, PyramidPolicyConfig, ramp_weights, select_pvc
from .trace import AttentionTrace

DEFAULT_D_GRID = (0.0, 0.05, 0.10, 0.15, 0.20, 0.25)


def overlap_ratio(pvc_a, pvc_ref) -> float:
    """``|a & ref| / |ref|``."""
    ref = set(int(x) for x in np.asarray(pvc_ref).reshape(-1))
    if not ref:
        raise ValueError("reference PvC is empty")
    a = set(int(x) for x in np.asarray(pvc_a).reshape(-1))
    return len(a & ref) / len(ref)


def _recent_distance(n: int, i) -> np.ndarray:
    return np.asarray(n - 1 - np.asarray(i), dtype=np.float64) / n


def context_count(n: int, ratio: float) -> int:
    """Number of leading tokens whose recent ratio is at least ``ratio``."""
    last = math.floor(round(n - 1 - ratio * n, 9))
    return max(0, min(n, last + 1))


def capture_trace(model: Model, tokens) -> AttentionTrace:
    """Full-cache attention of every layer and head over ``tokens``."""
    out, _ = prefill(model, tokens, keep_attn=True)
    return AttentionTrace(np.stack(out.attn))


# --------------------------------------------------------------------------
# RAC


@dataclass
class OverlapReport:
    mode: str
    d_grid: tuple[float, ...]
    grid: np.ndarray  # (layers, len(d_grid))

    def rows(self):
        for layer in range(self.grid.shape[0]):
            for j, d in enumerate(self.d_grid):
                yield layer, d, self.mode, float(self.grid[layer, j])


def _probe_index(n: int, d: float, ctx: int, width: float) -> int:
    i = math.floor(round(n - 1 - d * n, 9))
    if i < ctx or i > n - 1 or _recent_distance(n, i) >= d + width:
        raise ValueError(f"empty bucket d={d:g}: no recent token in [{d:g}, {d + width:g})")
    return i


def _ensemble_rows(n: int, d: float, span: float, ctx: int) -> np.ndarray:
    lo = max(ctx, math.ceil(round(n - 1 - (d + span) * n, 9)))
    hi = math.floor(round(n - 1 - d * n, 9))
    if hi < lo:
        raise ValueError(f"empty bucket d={d:g}: no ensemble rows in [{d:g}, {d + span:g}]")
    return np.arange(lo, hi + 1)


def rac_heatmap(
    trace: AttentionTrace,
    d_grid=DEFAULT_D_GRID,
    top_p: float = 0.8,
    mode: str = "separate",
    ensemble_span: float = 0.10,
    context_ratio: float = 0.30,
    bucket_width: float = 0.05,
    ramp: str = "linear",
) -> OverlapReport:
    """PvC overlap with the last token, per layer and recent-ratio bucket.

    Context columns are the tokens with ``d >= context_ratio``. In separate
    mode the probe of bucket ``d`` is the single token at the bucket's left
    edge; in ensemble mode it is the recency-weighted mean of the rows with
    recent ratio in ``[d, d + ensemble_span]``.
    """
    if mode not in ("separate", "ensemble"):
        raise ValueError(f"mode must be 'separate' or 'ensemble', got {mode!r}")
    if not 0.0 < top_p <= 1.0:
        raise ValueError(f"top_p must be in (0, 1], got {top_p}")
    n = trace.seq_len
    ctx = context_count(n, context_ratio)
    if ctx < 1:
        raise ValueError(f"sequence of {n} tokens has no context tokens at d >= {context_ratio}")
    d_grid = tuple(float(d) for d in d_grid)
    probes = []
    for d in d_grid:
        if mode == "separate":
            probes.append((np.array([_probe_index(n, d, ctx, bucket_width)]), np.ones(1)))
        else:
            _probe_index(n, d, ctx, bucket_width)
            rows = _ensemble_rows(n, d, ensemble_span, ctx)
            probes.append((rows, ramp_weights(len(rows), ramp)))

    grid = np.zeros((trace.layers, len(d_grid)))
    for layer in range(trace.layers):
        a = trace.head_mean(layer).astype(np.float64)
        ref = select_pvc(a[n - 1, :ctx], top_p)
        for j, (rows, w) in enumerate(probes):
            probe = select_pvc(w @ a[rows, :ctx], top_p)
            grid[layer, j] = overlap_ratio(probe, ref)
    return OverlapReport(mode, d_grid, grid)


# --------------------------------------------------------------------------
# non-shared PvCs


@dataclass
class NonsharedReport:
    """Per layer: mean overlap of far probes' non-shared PvCs with near probes'
    non-shared PvCs (``nonshared``) and with their non-PvCs (``nonpvc``)."""

    nonshared: np.ndarray
    nonpvc: np.ndarray
    probes: np.ndarray
    degenerate: bool
    per_probe: list = field(default_factory=list)

    def rows(self):
        for layer in range(len(self.nonshared)):
            yield layer, float(self.nonshared[layer]), float(self.nonpvc[layer]), int(self.probes[layer])


def nonshared_overlap(
    trace: AttentionTrace,
    top_p: float = 0.8,
    recent_ratio: float = 0.20,
    split: float = 0.10,
) -> NonsharedReport:
    """Track non-shared PvCs of probes with ``split < d < recent_ratio``.

    Each probe's PvC over the context (``d >= recent_ratio``) splits into the
    part shared with the last token's PvC and the rest. For every far probe
    and every near probe (``0 < d < split``) we measure which fraction of the
    far probe's non-shared PvC lands in the near probe's non-shared PvC and in
    its non-PvC. Layers where no far probe has a non-shared PvC yield NaN;
    ``degenerate`` is set when that holds for every layer.
    """
    n = trace.seq_len
    ctx = context_count(n, recent_ratio)
    if ctx < 1:
        raise ValueError("empty partition: no context tokens")
    idx = np.arange(ctx, n - 1)
    d = _recent_distance(n, idx)
    near = idx[(d > 0) & (d < split)]
    far = idx[(d > split) & (d < recent_ratio)]
    if len(near) == 0:
        raise ValueError(f"empty partition: no probes with 0 < d < {split:g}")
    if len(far) == 0:
        raise ValueError(f"empty partition: no probes with {split:g} < d < {recent_ratio:g}")

    ns_mean = np.full(trace.layers, np.nan)
    np_mean = np.full(trace.layers, np.nan)
    counts = np.zeros(trace.layers, dtype=np.int64)
    per_probe = []
    all_ctx = set(range(ctx))
    for layer in range(trace.layers):
        a = trace.head_mean(layer)
        ref = set(select_pvc(a[n - 1, :ctx], top_p).tolist())
        pvc = {int(i): set(select_pvc(a[i, :ctx], top_p).tolist()) for i in np.concatenate([near, far])}
        nonshared = {i: s - ref for i, s in pvc.items()}
        a_vals, b_vals = [], []
        for p in far:
            ns_p = nonshared[int(p)]
            if not ns_p:
                continue
            ov_ns = np.mean([len(ns_p & nonshared[int(q)]) / len(ns_p) for q in near])
            ov_np = np.mean([len(ns_p & (all_ctx - pvc[int(q)])) / len(ns_p) for q in near])
            a_vals.append(ov_ns)
            b_vals.append(ov_np)
            per_probe.append((layer, float(_recent_distance(n, p)), float(ov_ns), float(ov_np)))
        if a_vals:
            ns_mean[layer] = np.mean(a_vals)
            np_mean[layer] = np.mean(b_vals)
            counts[layer] = len(a_vals)
    return NonsharedReport(ns_mean, np_mean, counts, bool(counts.sum() == 0), per_probe)


# --------------------------------------------------------------------------
# ICR


def icr_policy(layers: int, layer: int, retention: float) -> PyramidPolicy:
    """Compress only ``layer`` to ``retention``, choosing entries by the newest token's attention."""
    schedule = [1.0] * layers
    schedule[layer] = retention
    cfg = PyramidPolicyConfig(
        schedule=tuple(schedule),
        recent_ratio=1e-9,
        recent_window_min=1,
        min_pvc_lens=0,
        prune_prefill=False,
    )
    return PyramidPolicy(cfg, layers)


def icr_sweep(model: Model, eval_tokens, layer: int, retention_grid) -> list[float]:
    layers = model.config.layers
    if not 0 <= layer < layers:
        raise ValueError(f"layer {layer} out of range for {layers} layers")
    grid = [float(r) for r in retention_grid]
    if any(not 0.0 < r <= 1.0 for r in grid):
        raise ValueError("retention grid values must be in (0, 1]")
    return [perplexity(model, eval_tokens, icr_policy(layers, layer, r)) for r in grid]


@dataclass
class IcrReport:
    retention_grid: tuple[float, ...]
    layers: tuple[int, ...]
    curves: np.ndarray  # (len(layers), len(grid))
    baseline: float

    def rows(self):
        for li, layer in enumerate(self.layers):
            for j, r in enumerate(self.retention_grid):
                yield layer, r, float(self.curves[li, j])


def icr_report(model: Model, eval_tokens, retention_grid, layers=None) -> IcrReport:
    layers = tuple(range(model.config.layers)) if layers is None else tuple(layers)
    curves = np.array([icr_sweep(model, eval_tokens, l, retention_grid) for l in layers])
    return IcrReport(
        tuple(float(r) for r in retention_grid), layers, curves, perplexity(model, eval_tokens)
    )


def icr_std(report: IcrReport) -> np.ndarray:
    """Population standard deviation of each layer's perplexity curve."""
    return np.asarray(report.curves, dtype=np.float64).std(axis=1)


# --------------------------------------------------------------------------
# CSV


RAC_COLUMNS = ("layer", "d_bucket", "mode", "overlap")
ICR_COLUMNS = ("layer", "retention", "perplexity")
NONSHARED_COLUMNS = ("layer", "nonshared_overlap", "nonpvc_overlap", "probes")


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(columns)
        w.writerows(rows)
