"""Forward+backward timing and allocation peaks of one attention block."""
from __future__ import annotations

import ctypes
import ctypes.util
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import Attention
from .autodiff import memory
from .geometry import CurvatureParam, lift_euclidean

# smallest per-rep wall time the timer must resolve to at least 1%
MIN_RESOLVABLE_S = 100 * time.get_clock_info("perf_counter").resolution


class TimerResolutionError(RuntimeError):
    pass


_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def stabilize_allocator() -> bool:
    """Keep freed buffers in the glibc heap instead of returning them to the OS.

    Without this, every multi-megabyte temporary is a fresh mmap whose page
    faults dominate elementwise kernels and make timings scale superlinearly.
    Returns False where glibc's ``mallopt`` is unavailable.
    """
    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        ok = libc.mallopt(_M_MMAP_THRESHOLD, 1 << 30) and libc.mallopt(_M_TRIM_THRESHOLD, 1 << 31)
    except (OSError, AttributeError):
        return False
    return bool(ok)


@dataclass
class BenchRow:
    n: int
    attention: str
    median_ms: float | None
    peak_bytes: int | None

    @property
    def skipped(self) -> bool:
        return self.median_ms is None

    def csv(self) -> str:
        if self.skipped:
            return f"{self.n},{self.attention},skipped,skipped"
        return f"{self.n},{self.attention},{self.median_ms:.4f},{self.peak_bytes}"


CSV_HEADER = "n,attention,median_ms,peak_bytes"


def softmax_bytes_estimate(n: int, dtype) -> int:
    """Bytes of the N x N buffers the distance-softmax block holds at its peak."""
    return 5 * n * n * np.dtype(dtype).itemsize


def build_block(kind: str, d: int, dtype, rng: np.random.Generator) -> Attention:
    k = CurvatureParam(1.0, trainable=False, dtype=dtype)
    return Attention(d, d, k, kind=kind, rng=rng, dtype=dtype)


def make_inputs(n: int, d: int, block: Attention, dtype, rng: np.random.Generator):
    feats = (0.5 * rng.standard_normal((n, d))).astype(dtype)
    with ad.no_grad():
        return lift_euclidean(feats, block.k1)


def run_once(block: Attention, x) -> tuple[float, int]:
    """One forward+backward pass; returns (seconds, peak accounted bytes)."""
    block.zero_grad()
    memory.reset_peak()
    base = memory.live
    t0 = time.perf_counter()
    out = block(x)
    loss = ad.sum(out.space)
    ad.backward(loss)
    elapsed = time.perf_counter() - t0
    peak = memory.peak - base
    del out, loss
    return elapsed, int(peak)


def bench(
    kinds,
    n_list,
    d: int = 64,
    reps: int = 5,
    dtype=np.float32,
    mem_cap: int = 2 * 1024 ** 3,
    seed: int = 0,
) -> list[BenchRow]:
    n_list = list(n_list)
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("n-list must be strictly ascending")
    if reps < 1:
        raise ValueError("reps must be >= 1")
    stabilize_allocator()
    rows = []
    for n in n_list:
        for kind in kinds:
            if kind == "softmax" and softmax_bytes_estimate(n, dtype) > mem_cap:
                rows.append(BenchRow(n, kind, None, None))
                continue
            rng = np.random.default_rng([seed, n])
            block = build_block(kind, d, dtype, rng)
            x = make_inputs(n, d, block, dtype, rng)
            run_once(block, x)  # warmup
            times, peaks = [], []
            for _ in range(reps):
                t, p = run_once(block, x)
                times.append(t)
                peaks.append(p)
            median = float(np.median(times))
            if n == n_list[0] and median < MIN_RESOLVABLE_S:
                raise TimerResolutionError(
                    f"median {median:.3e}s at n={n} is below the resolvable {MIN_RESOLVABLE_S:.3e}s"
                )
            rows.append(BenchRow(n, kind, 1000.0 * median, max(peaks)))
    return rows
