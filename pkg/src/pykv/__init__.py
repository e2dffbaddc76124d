"""Toy transformer inference engine with pluggable KV-cache compression."""

from .kv_store import CacheSet, LayerKvCache, kv_bytes, kv_entry_count
from .model import ModelConfig, decode_step, init_model, perplexity, prefill
from .policies import (
    FullCachePolicy,
    HeavyHitterPolicy,
    LocalPolicy,
    PyramidPolicy,
    PyramidPolicyConfig,
)

__version__ = "0.1.0"
