"""Per-layer KV containers with original-position bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class LayerKvCache:
    """Retained keys/values of one layer plus the token positions they came from.

    ``keys`` and ``values`` are ``(heads, seq, head_dim)`` float32 arrays.
    Whether keys are stored rotary-encoded depends on the model's rope mode.
    """

    keys: np.ndarray
    values: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        if self.keys.shape != self.values.shape:
            raise ValueError(f"keys {self.keys.shape} vs values {self.values.shape}")
        if self.keys.shape[1] != self.positions.shape[0]:
            raise ValueError(
                f"{self.positions.shape[0]} positions for {self.keys.shape[1]} entries"
            )
        if np.any(np.diff(self.positions) <= 0):
            raise ValueError("positions must be strictly increasing")

    @classmethod
    def empty(cls, heads: int, head_dim: int) -> LayerKvCache:
        z = np.zeros((heads, 0, head_dim), dtype=np.float32)
        return cls(z, z.copy(), np.zeros(0, dtype=np.int64))

    @property
    def heads(self) -> int:
        return self.keys.shape[0]

    @property
    def head_dim(self) -> int:
        return self.keys.shape[2]

    def __len__(self) -> int:
        return self.positions.shape[0]


def append(cache: LayerKvCache, k: np.ndarray, v: np.ndarray, pos) -> LayerKvCache:
    """Append ``k.seq`` new entries.

    ``pos`` is either the position of the first new entry (the rest follow
    consecutively) or one position per new entry.
    """
    k = np.asarray(k, dtype=np.float32)
    v = np.asarray(v, dtype=np.float32)
    if k.ndim != 3 or k.shape != v.shape:
        raise ValueError(f"k {k.shape} / v {v.shape} must match as (heads, seq, head_dim)")
    if k.shape[0] != cache.heads or k.shape[2] != cache.head_dim:
        raise ValueError(f"new entries {k.shape} do not fit cache {cache.keys.shape}")
    n = k.shape[1]
    if np.ndim(pos) == 0:
        new_pos = int(pos) + np.arange(n, dtype=np.int64)
    else:
        new_pos = np.asarray(pos, dtype=np.int64).reshape(-1)
        if new_pos.shape[0] != n:
            raise ValueError(f"{new_pos.shape[0]} positions for {n} entries")
    if n and len(cache) and new_pos[0] <= cache.positions[-1]:
        raise ValueError(
            f"position {int(new_pos[0])} not after last stored position {int(cache.positions[-1])}"
        )
    if n and new_pos[0] < 0:
        raise ValueError("positions must be non-negative")
    return LayerKvCache(
        np.concatenate([cache.keys, k], axis=1),
        np.concatenate([cache.values, v], axis=1),
        np.concatenate([cache.positions, new_pos]),
    )


def check_indices(indices, n: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx[0] < 0 or idx[-1] >= n):
        raise ValueError(f"indices out of range for length {n}")
    if np.any(np.diff(idx) <= 0):
        raise ValueError("indices must be strictly ascending")
    return idx


def gather(cache: LayerKvCache, indices) -> LayerKvCache:
    """Keep the entries at ``indices`` (strictly ascending), preserving order."""
    idx = check_indices(indices, len(cache))
    return LayerKvCache(
        cache.keys[:, idx, :], cache.values[:, idx, :], cache.positions[idx]
    )


@dataclass
class CacheSet:
    """All layer caches of one in-flight sequence, plus its bookkeeping.

    ``state`` belongs to the cache policy; ``attn_cells`` and ``sort_ops`` are
    work counters filled in by the model and policy.
    """

    layers: list[LayerKvCache]
    seen: int = 0
    state: dict = field(default_factory=dict)
    attn_cells: int = 0
    sort_ops: int = 0

    def __len__(self) -> int:
        return len(self.layers)

    def lengths(self) -> list[int]:
        return [len(c) for c in self.layers]


def kv_entry_count(caches) -> int:
    layers = caches.layers if isinstance(caches, CacheSet) else caches
    return sum(len(c) for c in layers)


def kv_bytes(caches, heads: int, head_dim: int, bytes_per_element: int = 4) -> int:
    """Bytes needed for K and V of every retained entry."""
    if bytes_per_element not in (2, 4):
        raise ValueError(f"bytes_per_element must be 2 or 4, got {bytes_per_element}")
    return 2 * kv_entry_count(caches) * heads * head_dim * bytes_per_element
