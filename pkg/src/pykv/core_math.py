"""Dense float32 kernels used by the engine.

Matrices are plain ``numpy`` arrays. A "head tensor" is a 3-d array shaped
``(heads, seq, head_dim)``.
"""

from __future__ import annotations

import numpy as np

ROPE_BASE = 10000.0


def _as_f32(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float32)


def softmax_rows(m, mask: np.ndarray | None = None) -> np.ndarray:
    """Row-wise softmax over the last axis.

    ``mask`` (same shape, boolean) marks allowed cells. Disallowed cells are
    left out of the normalization and come back as exact zeros.
    """
    m = _as_f32(m)
    if not np.all(np.isfinite(m)):
        raise ValueError("non-finite logits")
    if mask is None:
        shifted = m - m.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise ValueError("softmax row with no allowed cells")
        row_max = np.where(mask, m, -np.inf).max(axis=-1, keepdims=True)
        e = np.exp(np.where(mask, m - row_max, 0.0).astype(np.float32))
        e = np.where(mask, e, np.float32(0.0))
    return (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)


def _rope_angles(positions: np.ndarray, head_dim: int) -> np.ndarray:
    j = np.arange(head_dim // 2, dtype=np.float64)
    inv_freq = ROPE_BASE ** (-2.0 * j / head_dim)
    return np.outer(positions.astype(np.float64), inv_freq)


def rotary_encode(vecs, positions) -> np.ndarray:
    """Rotate consecutive dimension pairs of ``vecs`` by position-dependent angles.

    Pair ``j`` of a vector at position ``pos`` is rotated by
    ``pos * 10000 ** (-2j / head_dim)``.
    """
    vecs = _as_f32(vecs)
    if vecs.ndim != 3:
        raise ValueError(f"expected (heads, seq, head_dim), got shape {vecs.shape}")
    _, seq, head_dim = vecs.shape
    if head_dim % 2:
        raise ValueError(f"head_dim must be even, got {head_dim}")
    positions = np.asarray(positions, dtype=np.int64).reshape(-1)
    if positions.shape[0] != seq:
        raise ValueError(f"{positions.shape[0]} positions for seq length {seq}")
    if seq and positions[0] < 0:
        raise ValueError("positions must be non-negative")
    if np.any(np.diff(positions) <= 0):
        raise ValueError("positions must be strictly increasing")

    ang = _rope_angles(positions, head_dim)
    cos = np.cos(ang).astype(np.float32)
    sin = np.sin(ang).astype(np.float32)
    even = vecs[..., 0::2]
    odd = vecs[..., 1::2]
    out = np.empty_like(vecs)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def causal_mask(q_len: int, k_len: int, causal_offset: int) -> np.ndarray:
    """Boolean ``(q_len, k_len)`` mask; query i sees key j iff j <= i + offset."""
    return np.arange(k_len)[None, :] <= (np.arange(q_len)[:, None] + causal_offset)


def attention_forward(q, k, v, causal_offset: int):
    """Masked scaled dot-product attention over all heads.

    Returns ``(out, weights)`` where ``weights`` has shape
    ``(heads, q_seq, k_seq)`` and masked cells are exactly zero.
    """
    q, k, v = _as_f32(q), _as_f32(k), _as_f32(v)
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ValueError("q, k, v must be (heads, seq, head_dim)")
    if not (q.shape[0] == k.shape[0] == v.shape[0]):
        raise ValueError(f"head count mismatch: {q.shape[0]}, {k.shape[0]}, {v.shape[0]}")
    if q.shape[2] != k.shape[2]:
        raise ValueError(f"head_dim mismatch: q {q.shape[2]} vs k {k.shape[2]}")
    if k.shape[1] != v.shape[1]:
        raise ValueError(f"k.seq {k.shape[1]} != v.seq {v.shape[1]}")
    if k.shape[1] < q.shape[1]:
        raise ValueError(f"k.seq {k.shape[1]} < q.seq {q.shape[1]}")
    if causal_offset != k.shape[1] - q.shape[1]:
        raise ValueError(
            f"causal_offset {causal_offset} != k.seq - q.seq = {k.shape[1] - q.shape[1]}"
        )

    scale = np.float32(1.0 / np.sqrt(q.shape[2]))
    scores = np.matmul(q, k.transpose(0, 2, 1)) * scale
    mask = causal_mask(q.shape[1], k.shape[1], causal_offset)
    weights = softmax_rows(scores, np.broadcast_to(mask, scores.shape))
    out = np.matmul(weights, v)
    return out, weights
