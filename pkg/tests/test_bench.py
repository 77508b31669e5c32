import numpy as np
import pytest

from hypformer.bench import (
    CSV_HEADER,
    BenchRow,
    TimerResolutionError,
    bench,
    build_block,
    make_inputs,
    run_once,
    softmax_bytes_estimate,
)


class TestRows:
    def test_csv_format(self):
        assert BenchRow(64, "linear", 1.23456, 2048).csv() == "64,linear,1.2346,2048"
        assert BenchRow(64, "softmax", None, None).csv() == "64,softmax,skipped,skipped"
        assert CSV_HEADER == "n,attention,median_ms,peak_bytes"

    def test_softmax_estimate_is_quadratic(self):
        assert softmax_bytes_estimate(200, np.float32) == 4 * softmax_bytes_estimate(100, np.float32)
        assert softmax_bytes_estimate(100, np.float64) == 2 * softmax_bytes_estimate(100, np.float32)


class TestBench:
    def test_rows_for_each_size_and_kind(self):
        rows = bench(["linear", "softmax"], [64, 128], d=8, reps=2)
        assert [(r.n, r.attention) for r in rows] == [(64, "linear"), (64, "softmax"), (128, "linear"), (128, "softmax")]
        assert all(r.median_ms > 0 and r.peak_bytes > 0 for r in rows)

    def test_memory_cap_skips_softmax_only(self):
        cap = softmax_bytes_estimate(100, np.float32)
        rows = bench(["linear", "softmax"], [64, 128], d=8, reps=1, mem_cap=cap)
        assert not rows[1].skipped and rows[3].skipped and not rows[2].skipped

    def test_softmax_peak_grows_quadratically(self):
        rows = bench(["softmax"], [128, 256], d=8, reps=1)
        assert rows[1].peak_bytes / rows[0].peak_bytes > 3.2

    def test_linear_peak_grows_linearly(self):
        rows = bench(["linear"], [128, 256], d=8, reps=1)
        assert rows[1].peak_bytes / rows[0].peak_bytes < 2.3

    def test_requires_ascending_sizes(self):
        with pytest.raises(ValueError):
            bench(["linear"], [128, 64], d=8)

    def test_requires_positive_reps(self):
        with pytest.raises(ValueError):
            bench(["linear"], [64], d=8, reps=0)

    def test_unresolvable_timer(self, monkeypatch):
        monkeypatch.setattr("hypformer.bench.MIN_RESOLVABLE_S", 1e6)
        with pytest.raises(TimerResolutionError):
            bench(["linear"], [16], d=4, reps=1)

    def test_block_dtype(self, rng):
        block = build_block("linear", 8, np.float32, rng)
        x = make_inputs(32, 8, block, np.float32, rng)
        assert x.data.dtype == np.float32
        seconds, peak = run_once(block, x)
        assert seconds > 0 and peak > 0
        assert block.wq.weight.grad.dtype == np.float32
