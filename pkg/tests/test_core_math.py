import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pykv.core_math import attention_forward, causal_mask, rotary_encode, softmax_rows


def test_softmax_symmetric():
    np.testing.assert_allclose(softmax_rows([[0.0, 0.0]]), [[0.5, 0.5]], atol=1e-7)


def test_softmax_large_logits_stable():
    np.testing.assert_allclose(softmax_rows([[1000.0] * 3]), [[1 / 3] * 3], atol=1e-7)


def test_softmax_hand_value():
    np.testing.assert_allclose(softmax_rows([[0.0, math.log(3.0)]]), [[0.25, 0.75]], atol=1e-7)


def test_softmax_rejects_non_finite():
    with pytest.raises(ValueError, match="non-finite logits"):
        softmax_rows([[0.0, np.nan]])


def test_softmax_masked_cells_are_zero(rng):
    m = rng.normal(size=(4, 4))
    out = softmax_rows(m, causal_mask(4, 4, 0))
    assert np.all(out[np.triu_indices(4, 1)] == 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-5)


def test_rotary_position_zero_is_identity(rng):
    v = rng.normal(size=(2, 1, 8)).astype(np.float32)
    np.testing.assert_array_equal(rotary_encode(v, [0]), v)


def test_rotary_hand_value():
    out = rotary_encode(np.array([[[1.0, 0.0]]]), [1])
    np.testing.assert_allclose(out[0, 0], [math.cos(1.0), math.sin(1.0)], atol=1e-6)


@pytest.mark.parametrize("shape,pos", [((1, 1, 3), [0]), ((1, 2, 4), [3, 3]), ((1, 2, 4), [2, 1])])
def test_rotary_rejects_bad_input(shape, pos):
    with pytest.raises(ValueError):
        rotary_encode(np.zeros(shape), pos)


@settings(max_examples=50, deadline=None)
@given(
    seq=st.integers(1, 6),
    half=st.integers(1, 8),
    start=st.integers(0, 5000),
    seed=st.integers(0, 2**31),
)
def test_rotary_preserves_pair_norms(seq, half, start, seed):
    v = np.random.default_rng(seed).normal(size=(2, seq, 2 * half)).astype(np.float32)
    out = rotary_encode(v, list(range(start, start + seq)))
    n_in = np.hypot(v[..., 0::2], v[..., 1::2])
    n_out = np.hypot(out[..., 0::2], out[..., 1::2])
    np.testing.assert_allclose(n_out, n_in, atol=1e-5)


def test_attention_single_key(rng):
    q, k, v = (rng.normal(size=(2, 1, 4)) for _ in range(3))
    out, w = attention_forward(q, k, v, 0)
    np.testing.assert_array_equal(w, np.ones((2, 1, 1)))
    np.testing.assert_allclose(out, v, atol=1e-6)


def test_attention_causal_upper_zero(rng):
    q, k, v = (rng.normal(size=(1, 3, 4)) for _ in range(3))
    _, w = attention_forward(q, k, v, 0)
    assert np.all(w[0][np.triu_indices(3, 1)] == 0)


def test_attention_identical_keys_average_values(rng):
    q = rng.normal(size=(1, 1, 4))
    k = np.repeat(rng.normal(size=(1, 1, 4)), 2, axis=1)
    v = rng.normal(size=(1, 2, 4))
    out, w = attention_forward(q, k, v, 1)
    np.testing.assert_allclose(w[0, 0], [0.5, 0.5], atol=1e-6)
    np.testing.assert_allclose(out[0, 0], v[0].mean(axis=0), atol=1e-6)


def test_attention_matches_loop_oracle(rng):
    h, qs, ks, d = 2, 3, 5, 4
    q, k, v = rng.normal(size=(h, qs, d)), rng.normal(size=(h, ks, d)), rng.normal(size=(h, ks, d))
    out, w = attention_forward(q, k, v, ks - qs)
    for a in range(h):
        for i in range(qs):
            visible = ks - qs + i + 1
            s = np.array([q[a, i] @ k[a, j] / math.sqrt(d) for j in range(visible)])
            p = np.exp(s - s.max())
            p /= p.sum()
            np.testing.assert_allclose(w[a, i, :visible], p, atol=1e-5)
            np.testing.assert_allclose(out[a, i], p @ v[a, :visible], atol=1e-5)


def test_attention_dimension_mismatch():
    with pytest.raises(ValueError):
        attention_forward(np.zeros((1, 1, 4)), np.zeros((1, 2, 3)), np.zeros((1, 2, 3)), 1)
