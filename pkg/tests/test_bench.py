import numpy as np
import pytest

from pykv.bench import (
    BENCH_COLUMNS,
    full_attn_cells,
    position_ablation,
    run_bench,
    sweep_batch,
    sweep_recent_ratio,
    write_bench_csv,
)
from pykv.model import ModelConfig, init_model
from pykv.policies import FullCachePolicy, PyramidPolicy, PyramidPolicyConfig, lossless_pyramid


def test_full_closed_form(tiny_model):
    rec = run_bench(tiny_model, FullCachePolicy(), 2, 40, 10)
    per_seq = 4 * 2 * (40 * 41 // 2 + sum(40 + t for t in range(1, 11)))
    assert full_attn_cells(4, 2, 40, 10) == per_seq
    assert rec.attn_cells == 2 * per_seq
    assert rec.kv_entries_peak == 2 * 4 * 50
    assert rec.kv_bytes_peak == 2 * rec.kv_entries_peak * 2 * 16 * 4
    assert rec.sort_ops == 0


def test_lossless_same_cells(tiny_model):
    full = run_bench(tiny_model, FullCachePolicy(), 1, 40, 8)
    pyr = run_bench(tiny_model, lossless_pyramid(), 1, 40, 8)
    assert pyr.attn_cells == full.attn_cells
    assert pyr.kv_entries_peak == full.kv_entries_peak


def test_default_pyramid_compresses(tiny_model):
    full = run_bench(tiny_model, FullCachePolicy(), 1, 256, 8)
    pyr = run_bench(tiny_model, PyramidPolicy(), 1, 256, 8)
    assert pyr.kv_entries_peak <= full.kv_entries_peak
    assert pyr.attn_cells < full.attn_cells


def test_work_columns_repeatable(tiny_model):
    a = run_bench(tiny_model, PyramidPolicy(), 2, 64, 6, seed=4)
    b = run_bench(tiny_model, PyramidPolicy(), 2, 64, 6, seed=4, workers=2)
    assert a.work_row() == b.work_row()


def test_length_violation():
    model = init_model(ModelConfig(layers=1, heads=1, head_dim=4, vocab=8, max_seq=32))
    with pytest.raises(ValueError, match="length violation"):
        run_bench(model, FullCachePolicy(), 1, 30, 5)


def test_csv_columns(tmp_path, tiny_model):
    rec = run_bench(tiny_model, FullCachePolicy(), 1, 8, 2)
    write_bench_csv(tmp_path / "b.csv", [rec])
    header = (tmp_path / "b.csv").read_text().splitlines()[0]
    assert header == ",".join(BENCH_COLUMNS)


def test_recent_ratio_sweep(tiny_model):
    base = PyramidPolicyConfig(recent_window_min=1, min_pvc_lens=0)
    rows = sweep_recent_ratio(tiny_model, [0.1, 0.3, 0.5, 0.7, 0.999], base, prefill_len=128, gen_len=4)
    assert len(rows) == 5
    ratios = [r.kv_ratio for r in rows]
    assert all(a <= b for a, b in zip(ratios, ratios[1:]))
    assert ratios[-1] == pytest.approx(1.0, abs=0.02)


def test_batch_sweep(tiny_model):
    sweep = sweep_batch(tiny_model, FullCachePolicy(), PyramidPolicy(), [1, 2], prefill_len=128, gen_len=4)
    rows = list(sweep.rows())
    assert [r[0] for r in rows] == [1, 2]
    for r in rows:
        assert r[5] < r[4]


def test_position_ablation_rows(rng):
    cfg = ModelConfig(layers=2, heads=2, head_dim=8, vocab=32, seed=1)
    toks = rng.integers(0, 32, 60)
    rows = position_ablation(cfg, lambda: PyramidPolicy(PyramidPolicyConfig(min_pvc_lens=4)), toks, 40)
    assert [r[0] for r in rows] == ["gather", "reencode"]
    assert rows == position_ablation(cfg, lambda: PyramidPolicy(PyramidPolicyConfig(min_pvc_lens=4)), toks, 40)
    assert all(np.isfinite(r[4]) for r in rows)
