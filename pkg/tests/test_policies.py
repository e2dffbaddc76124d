import math

import numpy as np
import pytest

from pykv.kv_store import LayerKvCache, append
from pykv.policies import (
    PyramidPolicyConfig,
    ensemble_weights,
    heavy_hitter_update,
    layer_retention_schedule,
    local_policy_update,
    preset_schedule,
    pyramid_update_layer,
    select_pvc,
)


def sort_oracle(w, retention, min_len=0):
    n = len(w)
    k = min(n, max(min_len, math.ceil(round(retention * n, 9))))
    order = sorted(range(n), key=lambda i: (-w[i], -i))
    return sorted(order[:k])


def _cache(n):
    z = np.zeros((1, n, 2))
    return append(LayerKvCache.empty(1, 2), z, z, 0)


def test_ensemble_single_row():
    a = np.random.default_rng(0).random((5, 5))
    np.testing.assert_allclose(ensemble_weights(a, 1, context=3), a[-1, :3], rtol=1e-6)


def test_ensemble_hand_value():
    a = np.array([[0.2, 0.3, 0.5], [0.6, 0.3, 0.1]])
    np.testing.assert_allclose(ensemble_weights(a, 2), [0.4667, 0.3, 0.2333], atol=1e-4)


@pytest.mark.parametrize("ramp", ["linear", "exp", "uniform"])
def test_ensemble_identical_rows(ramp):
    a = np.tile([0.1, 0.2, 0.7], (4, 1))
    np.testing.assert_allclose(ensemble_weights(a, 4, ramp), [0.1, 0.2, 0.7], atol=1e-6)


def test_ensemble_window_too_large():
    with pytest.raises(ValueError):
        ensemble_weights(np.ones((2, 2)), 3)


def test_select_examples():
    assert select_pvc([0.1, 0.4, 0.2, 0.3], 0.5).tolist() == [1, 3]
    assert select_pvc([0.25] * 4, 0.5).tolist() == [2, 3]
    assert select_pvc([0.3, 0.1, 0.6], 1.0).tolist() == [0, 1, 2]


def test_select_matches_sort_oracle(rng):
    for _ in range(500):
        n = int(rng.integers(1, 200))
        w = rng.integers(0, 6, n) / 5.0 if rng.random() < 0.5 else rng.random(n)
        r = float(rng.uniform(0.01, 1.0))
        m = int(rng.integers(0, 10))
        assert select_pvc(w, r, m).tolist() == sort_oracle(list(w), r, m)


def test_select_scale_invariant(rng):
    w = rng.random(50)
    assert select_pvc(w, 0.3).tolist() == select_pvc(w * 7.5, 0.3).tolist()


def test_schedule_examples():
    np.testing.assert_allclose(layer_retention_schedule(1.0, 0.9, 4), [1.0, 0.9, 0.81, 0.729])
    assert layer_retention_schedule(0.7, 1.0, 3) == [0.7, 0.7, 0.7]
    s = layer_retention_schedule(0.95, 0.8, 12)
    assert all(a >= b for a, b in zip(s, s[1:]))


def test_preset_uniform_mean():
    s = preset_schedule("reduce_uniform", 8, 0.6)
    assert sum(s) / 8 == pytest.approx(0.4)


def test_preset_ordering_and_totals():
    layers, n = 8, 200
    first = {name: preset_schedule(name, layers, 0.4)[0] for name in ("reduce_more", "reduce_uniform", "reduce_less")}
    assert first["reduce_less"] >= first["reduce_uniform"] >= first["reduce_more"]
    for name in first:
        kept = sum(math.ceil(r * n) for r in preset_schedule(name, layers, 0.4))
        assert abs(kept - 0.6 * n * layers) <= layers


def test_preset_infeasible():
    with pytest.raises(ValueError):
        preset_schedule("reduce_more", 8, 0.95)


def test_pyramid_update_guards():
    cfg = PyramidPolicyConfig(schedule=(0.5,), min_pvc_lens=200)
    c = _cache(100)
    assert pyramid_update_layer(c, np.ones((100, 100)) / 100, cfg, 0) is c
    lossless = PyramidPolicyConfig(schedule=(1.0,), min_pvc_lens=0)
    assert pyramid_update_layer(c, np.ones((100, 100)) / 100, lossless, 0) is c


def test_pyramid_update_length():
    cfg = PyramidPolicyConfig(schedule=(0.8,), min_pvc_lens=0, recent_ratio=0.01, recent_window_min=20)
    a = np.tril(np.random.default_rng(0).random((100, 100)))
    out = pyramid_update_layer(_cache(100), a / a.sum(1, keepdims=True), cfg, 0)
    assert len(out) == 84
    assert out.positions[-20:].tolist() == list(range(80, 100))


def test_local_examples():
    c = _cache(10)
    assert local_policy_update(c, 0, 16).positions.tolist() == list(range(10))
    out = local_policy_update(_cache(100), 4, 16)
    assert out.positions.tolist() == list(range(4)) + list(range(84, 100))
    assert local_policy_update(out, 4, 16).positions.tolist() == out.positions.tolist()


def test_heavy_hitter_examples():
    c = _cache(10)
    assert heavy_hitter_update(c, np.ones(10), 10, 2).positions.tolist() == list(range(10))
    assert heavy_hitter_update(c, np.ones(10), 5, 2).positions.tolist() == [5, 6, 7, 8, 9]
    scores = [9, 1, 1, 1, 8, 1, 1, 7, 0, 0]
    assert heavy_hitter_update(c, scores, 5, 2).positions.tolist() == [0, 4, 7, 8, 9]
    with pytest.raises(ValueError):
        heavy_hitter_update(c, np.ones(10), 1, 2)
