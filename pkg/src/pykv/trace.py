"""Binary attention-trace files (``ATRC``).

Layout, little-endian: magic ``b"ATRC"``, then u32 version (1), layers,
heads and seq_len, followed by ``layers * heads`` float32 matrices of
``seq_len x seq_len``, row-major, layer-major then head-major.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"ATRC"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")
# refuse to allocate more than this many payload bytes from a header
MAX_PAYLOAD = 1 << 34


class TraceError(ValueError):
    """Malformed trace file; ``code`` is one of the ``*`` constants below."""

    BAD_MAGIC = "bad_magic"
    BAD_VERSION = "bad_version"
    TRUNCATED = "truncated"
    DIMENSION_OVERFLOW = "dimension_overflow"
    TRAILING_DATA = "trailing_data"

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class AttentionTrace:
    """Causal attention weights shaped ``(layers, heads, seq_len, seq_len)``."""

    attn: np.ndarray

    def __post_init__(self):
        self.attn = np.ascontiguousarray(self.attn, dtype=np.float32)
        if self.attn.ndim != 4 or self.attn.shape[2] != self.attn.shape[3]:
            raise ValueError(f"trace must be (layers, heads, seq, seq), got {self.attn.shape}")

    @property
    def layers(self) -> int:
        return self.attn.shape[0]

    @property
    def heads(self) -> int:
        return self.attn.shape[1]

    @property
    def seq_len(self) -> int:
        return self.attn.shape[2]

    def validate(self, tol: float = 1e-3) -> None:
        """Check causal zeros above the diagonal and unit row sums."""
        n = self.seq_len
        upper = np.triu(np.ones((n, n), dtype=bool), k=1)
        if np.any(self.attn[..., upper] != 0):
            raise ValueError("trace has non-zero weights above the causal diagonal")
        sums = self.attn.sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > tol):
            raise ValueError(f"trace rows do not sum to 1 within {tol}")

    def head_mean(self, layer: int) -> np.ndarray:
        return self.attn[layer].mean(axis=0)


def save_trace(trace: AttentionTrace, path) -> None:
    header = _HEADER.pack(MAGIC, VERSION, trace.layers, trace.heads, trace.seq_len)
    with open(path, "wb") as f:
        f.write(header)
        f.write(trace.attn.astype("<f4", copy=False).tobytes(order="C"))


def load_trace(path) -> AttentionTrace:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise TraceError(TraceError.BAD_MAGIC, f"{path}: bad magic")
    if len(data) < _HEADER.size:
        raise TraceError(TraceError.TRUNCATED, f"{path}: truncated header")
    _, version, layers, heads, seq = _HEADER.unpack_from(data)
    if version != VERSION:
        raise TraceError(TraceError.BAD_VERSION, f"{path}: unsupported version {version}")
    if min(layers, heads, seq) == 0:
        raise TraceError(TraceError.DIMENSION_OVERFLOW, f"{path}: zero dimension in header")
    count = layers * heads * seq * seq
    if count * 4 > MAX_PAYLOAD:
        raise TraceError(
            TraceError.DIMENSION_OVERFLOW,
            f"{path}: dimension overflow ({layers}x{heads}x{seq}x{seq} floats)",
        )
    payload = len(data) - _HEADER.size
    if payload < count * 4:
        raise TraceError(
            TraceError.TRUNCATED, f"{path}: truncated payload ({payload} of {count * 4} bytes)"
        )
    if payload > count * 4:
        raise TraceError(TraceError.TRAILING_DATA, f"{path}: {payload - count * 4} trailing bytes")
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=_HEADER.size)
    return AttentionTrace(arr.reshape(layers, heads, seq, seq).astype(np.float32))
