"""Seeded toy decoder-only transformer with policy-driven KV caching.

Blocks are pre-norm (RMS norm), rotary multi-head attention and a GELU MLP;
the output projection is tied to the embedding table.

In ``gather`` rope mode cached keys are stored already rotated at their
original positions, which never change. In ``reencode`` mode keys are stored
raw and rotated by their index in the compacted cache on every step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core_math import attention_forward, rotary_encode
from .kv_store import CacheSet, LayerKvCache, append, gather
from .policies import CachePolicy, FullCachePolicy

ROPE_MODES = ("gather", "reencode")
INIT_STD = 0.02
_EPS = 1e-6

# traversal order for weight init; norm gains are not drawn
LAYER_PARAMS = ("w_in", "w_out", "wk", "wo", "wq", "wv")


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 8
    heads: int = 4
    head_dim: int = 32
    vocab: int = 256
    mlp_ratio: float = 4.0
    seed: int = 0
    max_seq: int = 2048
    rope_mode: str = "gather"

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError(f"layers must be >= 1, got {self.layers}")
        if self.heads < 1:
            raise ValueError(f"heads must be >= 1, got {self.heads}")
        if self.head_dim < 2 or self.head_dim % 2:
            raise ValueError(f"head_dim must be even and >= 2, got {self.head_dim}")
        if self.vocab < 2:
            raise ValueError(f"vocab must be >= 2, got {self.vocab}")
        if self.mlp_ratio <= 0:
            raise ValueError(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {self.seed}")
        if self.max_seq < 1:
            raise ValueError(f"max_seq must be >= 1, got {self.max_seq}")
        if self.rope_mode not in ROPE_MODES:
            raise ValueError(f"rope_mode must be one of {ROPE_MODES}, got {self.rope_mode!r}")

    @property
    def d_model(self) -> int:
        return self.heads * self.head_dim

    @property
    def d_mlp(self) -> int:
        return max(1, int(round(self.mlp_ratio * self.d_model)))


@dataclass
class Model:
    config: ModelConfig
    embedding: np.ndarray
    layers: list[dict[str, np.ndarray]]
    final_norm: np.ndarray


@dataclass
class StepOutput:
    logits: np.ndarray
    attn: list[np.ndarray] | None = None
    kept: list[np.ndarray | None] = field(default_factory=list)


def init_model(config: ModelConfig) -> Model:
    """Draw every weight from N(0, 0.02) with a Philox stream keyed by ``config.seed``.

    Order: the embedding table, then for each layer ascending the parameters
    in :data:`LAYER_PARAMS` order (lexicographic).
    """
    rng = np.random.Generator(np.random.Philox(config.seed))
    d, m = config.d_model, config.d_mlp
    shapes = {"w_in": (d, m), "w_out": (m, d), "wk": (d, d), "wo": (d, d), "wq": (d, d), "wv": (d, d)}

    def draw(shape):
        return (rng.standard_normal(shape) * INIT_STD).astype(np.float32)

    embedding = draw((config.vocab, d))
    layers = []
    for _ in range(config.layers):
        params = {name: draw(shapes[name]) for name in LAYER_PARAMS}
        params["attn_norm"] = np.ones(d, dtype=np.float32)
        params["mlp_norm"] = np.ones(d, dtype=np.float32)
        layers.append(params)
    return Model(config, embedding, layers, np.ones(d, dtype=np.float32))


def _rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    ms = np.mean(np.square(x), axis=-1, keepdims=True)
    return (x / np.sqrt(ms + np.float32(_EPS))) * gain


def _gelu(x: np.ndarray) -> np.ndarray:
    c = np.float32(math.sqrt(2.0 / math.pi))
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(c * (x + np.float32(0.044715) * x**3)))


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, n, hd = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * hd)


def _mlp(p: dict, h: np.ndarray) -> np.ndarray:
    return _gelu(_rms_norm(h, p["mlp_norm"]) @ p["w_in"]) @ p["w_out"]


def _logits(model: Model, h: np.ndarray) -> np.ndarray:
    return _rms_norm(h, model.final_norm) @ model.embedding.T


def _check_tokens(model: Model, tokens) -> np.ndarray:
    toks = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if toks.size and (toks.min() < 0 or toks.max() >= model.config.vocab):
        bad = toks[(toks < 0) | (toks >= model.config.vocab)][0]
        raise ValueError(f"token id {int(bad)} out of range for vocab {model.config.vocab}")
    return toks


def _causal_cells(n: int) -> int:
    return n * (n + 1) // 2


def prefill(
    model: Model,
    tokens,
    policy: CachePolicy | None = None,
    keep_attn: bool = False,
) -> tuple[StepOutput, CacheSet]:
    """Run the prompt through every layer and build the compressed cache.

    After each layer's attention the policy sees that layer's full K/V and
    attention weights. A policy with ``prunes_prefill`` also drops the hidden
    states of evicted tokens, so deeper layers only compute K/V for survivors.
    Returns logits for the last prompt position.
    """
    cfg = model.config
    policy = policy or FullCachePolicy()
    toks = _check_tokens(model, tokens)
    n = toks.shape[0]
    if not 1 <= n <= cfg.max_seq:
        raise ValueError(f"prompt length {n} outside [1, {cfg.max_seq}]")

    caches = CacheSet([LayerKvCache.empty(cfg.heads, cfg.head_dim) for _ in range(cfg.layers)])
    policy.begin(caches, n)
    h = model.embedding[toks]
    positions = np.arange(n, dtype=np.int64)
    attn_out, kept_out = [], []
    for li, p in enumerate(model.layers):
        x = _rms_norm(h, p["attn_norm"])
        q = _split_heads(x @ p["wq"], cfg.heads)
        k = _split_heads(x @ p["wk"], cfg.heads)
        v = _split_heads(x @ p["wv"], cfg.heads)
        rope_pos = positions if cfg.rope_mode == "gather" else np.arange(len(positions))
        k_rot = rotary_encode(k, rope_pos)
        out, weights = attention_forward(rotary_encode(q, rope_pos), k_rot, v, 0)
        caches.attn_cells += cfg.heads * _causal_cells(len(positions))
        h = h + _merge_heads(out) @ p["wo"]

        cache = LayerKvCache(k_rot if cfg.rope_mode == "gather" else k, v, positions)
        kept = policy.prefill_layer(caches, li, cache, weights)
        if kept is not None:
            cache = gather(cache, kept)
            if policy.prunes_prefill:
                h = h[kept]
                positions = positions[kept]
        caches.layers[li] = cache
        kept_out.append(kept)
        if keep_attn:
            attn_out.append(weights)
        h = h + _mlp(p, h)

    caches.seen = n
    logits = _logits(model, h[-1:])[0]
    return StepOutput(logits, attn_out if keep_attn else None, kept_out), caches


def decode_step(
    model: Model,
    token: int,
    caches: CacheSet,
    policy: CachePolicy | None = None,
    keep_attn: bool = False,
) -> tuple[StepOutput, CacheSet]:
    """Feed one token, append its K/V at every layer and let the policy compress."""
    cfg = model.config
    policy = policy or FullCachePolicy()
    tok = _check_tokens(model, [token])
    if len(caches) != cfg.layers:
        raise ValueError(f"cache set has {len(caches)} layers, model has {cfg.layers}")
    pos = caches.seen
    caches.seen = pos + 1
    h = model.embedding[tok]
    attn_out, kept_out = [], []
    for li, p in enumerate(model.layers):
        cache = caches.layers[li]
        if cache.heads != cfg.heads or cache.head_dim != cfg.head_dim:
            raise ValueError(
                f"layer {li} cache shape {cache.keys.shape} does not match model "
                f"({cfg.heads} heads, head_dim {cfg.head_dim})"
            )
        x = _rms_norm(h, p["attn_norm"])
        q = _split_heads(x @ p["wq"], cfg.heads)
        k = _split_heads(x @ p["wk"], cfg.heads)
        v = _split_heads(x @ p["wv"], cfg.heads)
        if cfg.rope_mode == "gather":
            cache = append(cache, rotary_encode(k, [pos]), v, pos)
            m = len(cache)
            q_rot, k_rot = rotary_encode(q, [pos]), cache.keys
        else:
            cache = append(cache, k, v, pos)
            m = len(cache)
            q_rot, k_rot = rotary_encode(q, [m - 1]), rotary_encode(cache.keys, np.arange(m))
        out, weights = attention_forward(q_rot, k_rot, cache.values, m - 1)
        caches.attn_cells += cfg.heads * m
        h = h + _merge_heads(out) @ p["wo"]
        kept = policy.decode_layer(caches, li, cache, weights)
        if kept is not None:
            cache = gather(cache, kept)
        caches.layers[li] = cache
        kept_out.append(kept)
        if keep_attn:
            attn_out.append(weights)
        h = h + _mlp(p, h)
    logits = _logits(model, h)[0]
    return StepOutput(logits, attn_out if keep_attn else None, kept_out), caches


def full_logits(model: Model, tokens) -> np.ndarray:
    """Logits at every position of an uncompressed causal forward pass."""
    cfg = model.config
    toks = _check_tokens(model, tokens)
    h = model.embedding[toks]
    pos = np.arange(toks.shape[0])
    for p in model.layers:
        x = _rms_norm(h, p["attn_norm"])
        q = rotary_encode(_split_heads(x @ p["wq"], cfg.heads), pos)
        k = rotary_encode(_split_heads(x @ p["wk"], cfg.heads), pos)
        v = _split_heads(x @ p["wv"], cfg.heads)
        out, _ = attention_forward(q, k, v, 0)
        h = h + _merge_heads(out) @ p["wo"]
        h = h + _mlp(p, h)
    return _logits(model, h)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def perplexity(model: Model, tokens, policy: CachePolicy | None = None, prompt_len: int = 1) -> float:
    """Teacher-forced perplexity with a policy-compressed cache.

    ``tokens[:prompt_len]`` are prefilled under the policy and every later
    token is fed through :func:`decode_step`, so each prediction only sees the
    context the policy kept. The scored tokens are ``tokens[prompt_len:]``;
    with the default ``prompt_len=1`` that is every token but the first.
    """
    toks = _check_tokens(model, tokens)
    if toks.shape[0] < 2:
        raise ValueError("perplexity needs at least 2 tokens")
    if not 1 <= prompt_len < toks.shape[0]:
        raise ValueError(f"prompt_len must be in [1, {toks.shape[0] - 1}], got {prompt_len}")
    policy = policy or FullCachePolicy()
    out, caches = prefill(model, toks[:prompt_len], policy)
    nll = 0.0
    for i in range(prompt_len, toks.shape[0]):
        nll -= _log_softmax(out.logits)[toks[i]]
        if i + 1 < toks.shape[0]:
            out, caches = decode_step(model, int(toks[i]), caches, policy)
    return float(math.exp(nll / (toks.shape[0] - prompt_len)))


def generate(
    model: Model,
    prompt,
    steps: int,
    policy: CachePolicy | None = None,
    on_step=None,
) -> tuple[list[int], CacheSet]:
    """Greedy decoding; ``on_step(step, token, caches)`` is called after each token."""
    policy = policy or FullCachePolicy()
    out, caches = prefill(model, prompt, policy)
    produced: list[int] = []
    for step in range(steps):
        tok = int(np.argmax(out.logits))
        produced.append(tok)
        out, caches = decode_step(model, tok, caches, policy)
        if on_step is not None:
            on_step(step, tok, caches)
    return produced, caches


def sample_tokens(model: Model, n: int, seed: int, temperature: float = 1.0, first: int | None = None) -> np.ndarray:
    """Sample ``n`` tokens from the full-cache model itself.

    Model-generated text is what an untrained model "knows", so losing
    context raises its perplexity systematically instead of at random.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    rng = np.random.default_rng(seed)
    toks = [int(rng.integers(model.config.vocab)) if first is None else int(first)]
    out, caches = prefill(model, toks)
    while len(toks) < n:
        z = out.logits.astype(np.float64) / temperature
        p = np.exp(z - z.max())
        tok = int(rng.choice(p.shape[0], p=p / p.sum()))
        toks.append(tok)
        if len(toks) < n:
            out, caches = decode_step(model, tok, caches)
    return np.asarray(toks, dtype=np.int64)
