"""KV-cache compression policies.

Every policy exposes the same small surface used by :mod:`pykv.model`:

* ``begin(caches, prompt_len)`` is called once before prefill;
* ``prefill_layer(caches, layer, cache, attn)`` receives a layer's full K/V
  and its ``(heads, n, n)`` attention weights;
* ``decode_layer(caches, layer, cache, attn)`` receives the cache after the
  new token was appended and the ``(heads, 1, len)`` attention row.

Both hooks return the ascending indices to keep, or ``None`` to keep
everything. ``prunes_prefill`` tells the model whether hidden states of
dropped tokens are dropped as well, so deeper layers never compute them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Protocol

import numpy as np

from .kv_store import CacheSet, LayerKvCache, gather

RAMPS = ("linear", "exp", "uniform")
PRESETS = ("reduce_more", "reduce_uniform", "reduce_less")

# Share of the total removed cache that falls in the first half of the layers.
# At 40% total removal these give the 15% / 10% / 7% first-half reductions of
# the decay ablation.
_PRESET_FIRST_HALF_SHARE = {
    "reduce_more": 0.15 / 0.40,
    "reduce_uniform": 0.10 / 0.40,
    "reduce_less": 0.07 / 0.40,
}


def _ceil_count(ratio: float, n: int) -> int:
    # round() absorbs float noise such as 0.7 * 10 = 7.000000000000001
    return math.ceil(round(ratio * n, 9))


# --------------------------------------------------------------------------
# selection primitives


def ramp_weights(length: int, ramp: str = "linear") -> np.ndarray:
    """Normalized recency weights, oldest first."""
    j = np.arange(length, dtype=np.float64)
    if ramp == "linear":
        w = j + 1.0
    elif ramp == "exp":
        w = np.exp(4.0 * j / max(length, 1))
    elif ramp == "uniform":
        w = np.ones(length)
    else:
        raise ValueError(f"unknown ramp {ramp!r}; expected one of {RAMPS}")
    return w / w.sum()


def head_mean(attn) -> np.ndarray:
    a = np.asarray(attn, dtype=np.float32)
    if a.ndim == 3:
        return a.mean(axis=0)
    if a.ndim == 2:
        return a
    raise ValueError(f"attention must be 2-d or 3-d, got shape {a.shape}")


def ensemble_weights(attn, L: int, ramp: str = "linear", context: int | None = None) -> np.ndarray:
    """Recency-weighted average of the last ``L`` attention rows.

    Heads are averaged first. Only the first ``context`` columns are scored
    (all columns when ``context`` is None).
    """
    a = head_mean(attn)
    rows, cols = a.shape
    if L < 1 or L > rows:
        raise ValueError(f"recent window L={L} not in [1, {rows}] available rows")
    context = cols if context is None else context
    if not 1 <= context <= cols:
        raise ValueError(f"context columns {context} not in [1, {cols}]")
    w = ramp_weights(L, ramp)
    return (w @ a[rows - L:, :context].astype(np.float64)).astype(np.float32)


def top_indices(weights, k: int) -> np.ndarray:
    """Indices of the ``k`` largest weights, ascending.

    Equal weights prefer the larger index. Uses a partition rather than a full
    sort, so the cost is linear in ``len(weights)``.
    """
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    n = w.shape[0]
    if k >= n:
        return np.arange(n, dtype=np.int64)
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    kth = np.partition(w, n - k)[n - k]
    above = np.flatnonzero(w > kth)
    ties = np.flatnonzero(w == kth)
    keep = np.concatenate([above, ties[len(ties) - (k - len(above)):]])
    keep.sort()
    return keep.astype(np.int64)


def select_pvc(weights, retention: float, min_len: int = 0) -> np.ndarray:
    """Keep ``max(min_len, ceil(retention * n))`` of the highest-weighted indices."""
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    n = w.shape[0]
    if n < 1:
        raise ValueError("select_pvc needs at least one weight")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite and non-negative")
    if not 0.0 < retention <= 1.0:
        raise ValueError(f"retention must be in (0, 1], got {retention}")
    k = min(n, max(min_len, _ceil_count(retention, n)))
    return top_indices(w, k)


# --------------------------------------------------------------------------
# retention schedules


def layer_retention_schedule(p0: float, decay: float, layers: int) -> list[float]:
    """Geometric per-layer retention ``min(1, p0 * decay**l)``."""
    if not 0.0 < p0 <= 1.0:
        raise ValueError(f"p0 must be in (0, 1], got {p0}")
    if not 0.0 < decay <= 1.0:
        raise ValueError(f"decay must be in (0, 1], got {decay}")
    return [min(1.0, p0 * decay**l) for l in range(layers)]


def preset_schedule(name: str, layers: int, target_compression: float) -> list[float]:
    """Two-level schedule for the PvC length-decay ablation.

    ``target_compression`` is the fraction of the full cache removed overall.
    The first half of the layers removes a preset share of that total
    (``reduce_more`` the most, ``reduce_less`` the least); the second half
    takes whatever retention makes the overall mean ``1 - target_compression``.
    """
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; expected one of {PRESETS}")
    if not 0.0 < target_compression < 1.0:
        raise ValueError(f"target_compression must be in (0, 1), got {target_compression}")
    if layers < 2:
        raise ValueError("preset schedules need at least 2 layers")
    first = layers // 2
    second = layers - first
    removed_first = _PRESET_FIRST_HALF_SHARE[name] * target_compression
    r1 = 1.0 - removed_first * layers / first
    r2 = ((1.0 - target_compression) * layers - first * r1) / second
    for r in (r1, r2):
        if not 0.0 < r <= 1.0 + 1e-12:
            raise ValueError(
                f"preset {name!r} infeasible at compression {target_compression}: "
                f"retentions ({r1:.4f}, {r2:.4f})"
            )
    return [min(r1, 1.0)] * first + [min(r2, 1.0)] * second


# --------------------------------------------------------------------------
# layer-wise PvC policy


@dataclass(frozen=True)
class PyramidPolicyConfig:
    """Knobs of the layer-wise PvC policy.

    ``schedule`` overrides the geometric ``p0``/``decay`` schedule when given.
    Retention ratios are fractions of the context seen so far, so the ratio
    of a layer does not compound across decode steps.
    """

    recent_ratio: float = 0.2
    recent_window_min: int = 16
    p0: float = 1.0
    decay: float = 0.6
    min_pvc_lens: int | tuple[int, ...] = 32
    recency_ramp: str = "linear"
    budget: int | None = None
    schedule: tuple[float, ...] | None = None
    refresh_every: int = 1
    prune_prefill: bool = True

    def __post_init__(self):
        if not 0.0 < self.p0 <= 1.0:
            raise ValueError(f"p0 must be in (0, 1], got {self.p0}")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")
        if not 0.0 < self.recent_ratio < 1.0:
            raise ValueError(f"recent_ratio must be in (0, 1), got {self.recent_ratio}")
        if self.recent_window_min < 1:
            raise ValueError("recent_window_min must be >= 1")
        if self.recency_ramp not in RAMPS:
            raise ValueError(f"unknown recency ramp {self.recency_ramp!r}")
        if self.budget is not None and self.budget < 0:
            raise ValueError("budget must be >= 0")
        if self.refresh_every < 1:
            raise ValueError("refresh_every must be >= 1")
        if self.schedule is not None:
            object.__setattr__(self, "schedule", tuple(float(r) for r in self.schedule))
            if any(not 0.0 < r <= 1.0 for r in self.schedule):
                raise ValueError("schedule entries must be in (0, 1]")
        if not isinstance(self.min_pvc_lens, int):
            object.__setattr__(self, "min_pvc_lens", tuple(int(n) for n in self.min_pvc_lens))

    def retention(self, layers: int) -> list[float]:
        if self.schedule is not None:
            if len(self.schedule) != layers:
                raise ValueError(f"schedule has {len(self.schedule)} entries for {layers} layers")
            return list(self.schedule)
        return layer_retention_schedule(self.p0, self.decay, layers)

    def min_lens(self, layers: int) -> list[int]:
        if isinstance(self.min_pvc_lens, int):
            return [self.min_pvc_lens] * layers
        if len(self.min_pvc_lens) != layers:
            raise ValueError(f"min_pvc_lens has {len(self.min_pvc_lens)} entries for {layers} layers")
        return list(self.min_pvc_lens)

    def window(self, length: int) -> int:
        """Recent window size used for a prompt of ``length`` tokens."""
        return max(self.recent_window_min, _ceil_count(self.recent_ratio, length))


@dataclass
class LayerPolicyDecision:
    kept_indices: np.ndarray
    retention_used: float


def pyramid_decision(
    length: int,
    attn,
    retention: float,
    min_len: int,
    window: int,
    *,
    reference_context: int | None = None,
    budget: int | None = None,
    ramp: str = "linear",
) -> LayerPolicyDecision | None:
    """Choose which of ``length`` cache entries survive; ``None`` keeps all.

    The last ``window`` entries always survive. The remaining context keeps
    ``max(min_len, ceil(retention * reference_context))`` entries, ranked by
    the ensemble weights of the recent rows, and capped at ``budget``.
    """
    L = min(window, length)
    context = length - L
    if context <= 0:
        return None
    ref = context if reference_context is None else reference_context
    over_budget = budget is not None and context > budget
    if context <= min_len and not over_budget:
        return None
    target = max(min_len, _ceil_count(retention, ref))
    if budget is not None:
        target = min(target, budget)
    if target >= context:
        return None
    scores = ensemble_weights(attn, L, ramp, context=context)
    kept = np.concatenate([top_indices(scores, target), np.arange(context, length)])
    return LayerPolicyDecision(kept.astype(np.int64), retention)


def pyramid_update_layer(
    cache: LayerKvCache,
    attn,
    cfg: PyramidPolicyConfig,
    layer: int,
    layers: int | None = None,
    window: int | None = None,
    reference_context: int | None = None,
) -> LayerKvCache:
    """Apply one PvC selection to ``cache`` using its attention rows ``attn``.

    Without ``window`` the recent window is derived from the cache length as
    in prefill.
    """
    if layers is None:
        layers = len(cfg.schedule) if cfg.schedule is not None else layer + 1
    if layer >= layers:
        raise ValueError(f"layer {layer} out of range for {layers} layers")
    retention = cfg.retention(layers)[layer]
    window = cfg.window(len(cache)) if window is None else window
    decision = pyramid_decision(
        len(cache),
        attn,
        retention,
        cfg.min_lens(layers)[layer],
        window,
        reference_context=reference_context,
        budget=cfg.budget,
        ramp=cfg.recency_ramp,
    )
    return cache if decision is None else gather(cache, decision.kept_indices)


class CachePolicy(Protocol):
    name: str
    prunes_prefill: bool

    def begin(self, caches: CacheSet, prompt_len: int) -> None: ...

    def prefill_layer(self, caches: CacheSet, layer: int, cache: LayerKvCache, attn: np.ndarray): ...

    def decode_layer(self, caches: CacheSet, layer: int, cache: LayerKvCache, attn: np.ndarray): ...


class FullCachePolicy:
    name = "full"
    prunes_prefill = False

    def begin(self, caches, prompt_len):
        pass

    def prefill_layer(self, caches, layer, cache, attn):
        return None

    def decode_layer(self, caches, layer, cache, attn):
        return None


class PyramidPolicy:
    """Layer-wise PvC retention in both prefill and generation.

    The recent window ``L`` is fixed from the prompt length at prefill and
    slides during generation. The head-averaged attention rows of the last
    ``L`` queries are kept per layer so the ensemble can be rebuilt after every
    decode step.
    """

    name = "pyramid"

    def __init__(self, cfg: PyramidPolicyConfig | None = None, layers: int | None = None):
        self.cfg = cfg or PyramidPolicyConfig()
        self.layers = layers
        self.prunes_prefill = self.cfg.prune_prefill

    def begin(self, caches, prompt_len):
        n_layers = len(caches)
        if self.layers is not None and self.layers != n_layers:
            raise ValueError(f"policy built for {self.layers} layers, model has {n_layers}")
        caches.state.update(
            window=min(self.cfg.window(prompt_len), prompt_len),
            prompt_len=prompt_len,
            retention=self.cfg.retention(n_layers),
            min_lens=self.cfg.min_lens(n_layers),
            rows=[None] * n_layers,
        )

    def _select(self, caches, layer, length, rows, reference_context):
        st = caches.state
        caches.sort_ops += max(0, length - st["window"])
        return pyramid_decision(
            length,
            rows,
            st["retention"][layer],
            st["min_lens"][layer],
            caches.state["window"],
            reference_context=reference_context,
            budget=self.cfg.budget,
            ramp=self.cfg.recency_ramp,
        )

    def prefill_layer(self, caches, layer, cache, attn):
        L = caches.state["window"]
        rows = head_mean(attn)[-L:, :]
        prompt_len = caches.state["prompt_len"]
        decision = self._select(caches, layer, len(cache), rows, prompt_len - L)
        if decision is None:
            caches.state["rows"][layer] = rows
            return None
        caches.state["rows"][layer] = rows[:, decision.kept_indices]
        return decision.kept_indices

    def decode_layer(self, caches, layer, cache, attn):
        L = caches.state["window"]
        old = caches.state["rows"][layer]
        new_row = head_mean(attn)[-1:, :]
        grown = np.concatenate([old, np.zeros((old.shape[0], 1), dtype=np.float32)], axis=1)
        rows = np.concatenate([grown, new_row], axis=0)[-L:]
        step = caches.seen - caches.state["prompt_len"]
        if step % self.cfg.refresh_every:
            caches.state["rows"][layer] = rows
            return None
        decision = self._select(caches, layer, len(cache), rows, caches.seen - L)
        if decision is None:
            caches.state["rows"][layer] = rows
            return None
        caches.state["rows"][layer] = rows[:, decision.kept_indices]
        return decision.kept_indices


# --------------------------------------------------------------------------
# baselines


def local_indices(length: int, keep_first: int, window: int) -> np.ndarray:
    first = np.arange(min(keep_first, length))
    last = np.arange(max(length - window, 0), length)
    return np.union1d(first, last).astype(np.int64)


def local_policy_update(cache: LayerKvCache, keep_first: int, window: int) -> LayerKvCache:
    """Keep the first ``keep_first`` and the last ``window`` entries."""
    idx = local_indices(len(cache), keep_first, window)
    return cache if len(idx) == len(cache) else gather(cache, idx)


class LocalPolicy:
    """First tokens plus a sliding recent window, identical at every layer."""

    name = "local"
    prunes_prefill = False

    def __init__(self, keep_first: int = 4, window: int = 256):
        self.keep_first = keep_first
        self.window = window

    def begin(self, caches, prompt_len):
        pass

    def _keep(self, cache):
        idx = local_indices(len(cache), self.keep_first, self.window)
        return None if len(idx) == len(cache) else idx

    def prefill_layer(self, caches, layer, cache, attn):
        return self._keep(cache)

    def decode_layer(self, caches, layer, cache, attn):
        return self._keep(cache)


def heavy_hitter_indices(scores, budget: int, window: int) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if budget < window:
        raise ValueError(f"budget {budget} smaller than window {window}")
    n = scores.shape[0]
    if budget >= n:
        return np.arange(n, dtype=np.int64)
    context = n - window
    hh = top_indices(scores[:context], budget - window)
    return np.concatenate([hh, np.arange(context, n)]).astype(np.int64)


def heavy_hitter_update(cache: LayerKvCache, accumulated_scores, budget: int, window: int) -> LayerKvCache:
    """Keep the recent window plus the context entries with the most accumulated attention."""
    scores = np.asarray(accumulated_scores).reshape(-1)
    if scores.shape[0] != len(cache):
        raise ValueError(f"{scores.shape[0]} scores for cache length {len(cache)}")
    idx = heavy_hitter_indices(scores, budget, window)
    return cache if len(idx) == len(cache) else gather(cache, idx)


class HeavyHitterPolicy:
    """Simplified accumulated-attention eviction with one budget for all layers."""

    name = "heavy_hitter"
    prunes_prefill = False

    def __init__(self, budget: int = 256, window: int = 64):
        if budget < window:
            raise ValueError(f"budget {budget} smaller than window {window}")
        self.budget = budget
        self.window = window

    def begin(self, caches, prompt_len):
        caches.state["scores"] = [None] * len(caches)

    def _evict(self, caches, layer, scores):
        caches.sort_ops += max(0, len(scores) - self.window)
        idx = heavy_hitter_indices(scores, self.budget, self.window)
        if len(idx) == len(scores):
            caches.state["scores"][layer] = scores
            return None
        caches.state["scores"][layer] = scores[idx]
        return idx

    def prefill_layer(self, caches, layer, cache, attn):
        return self._evict(caches, layer, head_mean(attn).sum(axis=0, dtype=np.float64))

    def decode_layer(self, caches, layer, cache, attn):
        scores = np.append(caches.state["scores"][layer], 0.0) + head_mean(attn)[-1]
        return self._evict(caches, layer, scores)


POLICY_NAMES = ("full", "pyramid", "local", "heavy_hitter")


def make_policy(name: str, **kwargs) -> CachePolicy:
    """Build a policy by name; keyword arguments go to its constructor/config."""
    if name == "full":
        if kwargs:
            raise ValueError(f"full policy takes no options, got {sorted(kwargs)}")
        return FullCachePolicy()
    if name == "pyramid":
        layers = kwargs.pop("layers", None)
        return PyramidPolicy(PyramidPolicyConfig(**kwargs), layers)
    if name == "local":
        return LocalPolicy(**kwargs)
    if name == "heavy_hitter":
        return HeavyHitterPolicy(**kwargs)
    raise ValueError(f"unknown policy {name!r}; expected one of {POLICY_NAMES}")


def lossless_pyramid(**overrides) -> PyramidPolicy:
    """Pyramid policy whose every layer keeps its whole context."""
    cfg = replace(PyramidPolicyConfig(p0=1.0, decay=1.0, budget=None), **overrides)
    return PyramidPolicy(cfg)
