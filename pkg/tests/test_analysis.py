import numpy as np
import pytest

from pykv.analysis import (
    IcrReport,
    capture_trace,
    icr_report,
    icr_std,
    icr_sweep,
    nonshared_overlap,
    overlap_ratio,
    rac_heatmap,
)
from pykv.model import perplexity
from pykv.trace import AttentionTrace


def _causal(a):
    a = np.tril(a)
    return a / a.sum(axis=-1, keepdims=True)


def _shared_context_trace(n, ctx, context_row, last_row=None, layers=2):
    """Rows past the context all put the same distribution on the context columns."""
    a = np.tril(np.ones((n, n)))
    for i in range(ctx, n):
        row = context_row if last_row is None or i < n - 1 else last_row
        a[i, :ctx] = row * (i - ctx + 1)
    a = a / a.sum(axis=1, keepdims=True)
    return AttentionTrace(np.broadcast_to(a, (layers, 2, n, n)))


def test_overlap_examples():
    assert overlap_ratio([1, 2, 3], [1, 2, 3]) == 1.0
    assert overlap_ratio([1, 2], [3, 4]) == 0.0
    assert overlap_ratio([1, 3, 5], [3, 5, 7, 9]) == 0.5
    with pytest.raises(ValueError):
        overlap_ratio([1], [])


def test_overlap_matches_sets(rng):
    for _ in range(200):
        a = set(rng.integers(0, 30, rng.integers(0, 20)).tolist())
        ref = set(rng.integers(0, 30, rng.integers(1, 20)).tolist())
        assert overlap_ratio(sorted(a), sorted(ref)) == len(a & ref) / len(ref)


def test_rac_d0_is_one(rng):
    trace = AttentionTrace(_causal(rng.random((3, 2, 100, 100))))
    report = rac_heatmap(trace, top_p=0.5)
    assert np.all(report.grid[:, 0] == 1.0)
    assert np.all((report.grid >= 0) & (report.grid <= 1))


@pytest.mark.parametrize("mode", ["separate", "ensemble"])
def test_rac_top_p_one(rng, mode):
    trace = AttentionTrace(_causal(rng.random((2, 2, 100, 100))))
    assert np.all(rac_heatmap(trace, top_p=1.0, mode=mode).grid == 1.0)


def test_rac_uniform_ensemble_equals_separate(rng):
    trace = _shared_context_trace(100, 70, rng.random(70))
    sep = rac_heatmap(trace, top_p=0.4, mode="separate").grid
    ens = rac_heatmap(trace, top_p=0.4, mode="ensemble").grid
    np.testing.assert_array_equal(sep, ens)


def test_rac_empty_bucket(rng):
    trace = AttentionTrace(_causal(rng.random((1, 1, 100, 100))))
    with pytest.raises(ValueError, match="empty bucket d=0.5"):
        rac_heatmap(trace, d_grid=[0.5])


def test_rac_real_trace_shape(tiny_model, rng):
    trace = capture_trace(tiny_model, rng.integers(0, 64, 60))
    trace.validate()
    report = rac_heatmap(trace)
    assert report.grid.shape == (4, 6)
    assert len(list(report.rows())) == 24


def test_nonshared_degenerate_at_full_top_p(rng):
    trace = AttentionTrace(_causal(rng.random((2, 2, 100, 100))))
    report = nonshared_overlap(trace, top_p=1.0)
    assert report.degenerate
    assert np.all(np.isnan(report.nonshared))


def test_nonshared_identical_probes(rng):
    probe = rng.random(80)
    last = rng.random(80)
    trace = _shared_context_trace(100, 80, probe, last)
    report = nonshared_overlap(trace, top_p=0.5)
    assert not report.degenerate
    np.testing.assert_allclose(report.nonshared, 1.0)
    np.testing.assert_allclose(report.nonpvc, 0.0)


def test_nonshared_partition_bound(rng):
    trace = AttentionTrace(_causal(rng.random((2, 1, 120, 120)) ** 4))
    report = nonshared_overlap(trace, top_p=0.5)
    for _, _, a, b in report.per_probe:
        assert a + b <= 1.0 + 1e-12


def test_nonshared_empty_partition(rng):
    trace = AttentionTrace(_causal(rng.random((1, 1, 8, 8))))
    with pytest.raises(ValueError, match="empty partition"):
        nonshared_overlap(trace)


def test_icr_full_retention_matches_baseline(tiny_model, rng):
    toks = rng.integers(0, 64, 40)
    curve = icr_sweep(tiny_model, toks, 1, [0.2, 0.6, 1.0])
    assert len(curve) == 3
    assert abs(curve[-1] - perplexity(tiny_model, toks)) <= 1e-6


def test_icr_report_rows(tiny_model, rng):
    report = icr_report(tiny_model, rng.integers(0, 64, 30), [0.5, 1.0], layers=[0, 3])
    assert [r[:2] for r in report.rows()] == [(0, 0.5), (0, 1.0), (3, 0.5), (3, 1.0)]


def test_icr_std():
    report = IcrReport((0.2, 0.5), (0, 1, 2), np.array([[3.0, 3.0], [2.0, 4.0], [1.0, 1.0]]), 1.0)
    np.testing.assert_allclose(icr_std(report), [0.0, 1.0, 0.0])
