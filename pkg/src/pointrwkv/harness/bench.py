"""Sequence-length scaling of spatial mixing against softmax attention."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..mixing import SpatialMixing, spatial_mixing_flops
from ..numerics import Tensor, no_grad, precision


def full_attention_flops(t: int, c: int, h: int) -> int:
    """Multi-head softmax attention with Q/K/V/O projections and an input layer norm.

    Scores and the weighted sum cost 2*T*T*C each; the softmax spends 6 ops per
    score (scale, max, subtract, exp, sum, divide).
    """
    return 4 * t * t * c + 6 * t * t * h + 8 * t * c * c + 8 * t * c


class FullAttention:
    """Quadratic reference kernel; materializes one T x T score matrix per head."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        self.heads = heads
        s = 1.0 / np.sqrt(width)
        self.wq, self.wk, self.wv, self.wo = (
            rng.uniform(-s, s, size=(width, width)).astype(dtype) for _ in range(4)
        )

    def __call__(self, x: np.ndarray) -> np.ndarray:
        t, c = x.shape
        h, d = self.heads, c // self.heads
        mu = x.mean(axis=-1, keepdims=True)
        xn = (x - mu) / np.sqrt(x.var(axis=-1, keepdims=True) + 1e-5)
        q, k, v = (xn @ w for w in (self.wq, self.wk, self.wv))
        out = np.empty_like(x)
        for i in range(h):
            sl = slice(i * d, (i + 1) * d)
            a = (q[:, sl] @ k[:, sl].T) / np.sqrt(d)
            a -= a.max(axis=-1, keepdims=True)
            np.exp(a, out=a)
            a /= a.sum(axis=-1, keepdims=True)
            out[:, sl] = a @ v[:, sl]
        return out @ self.wo


@dataclass
class BenchRecord:
    t: int
    flops_linear: int
    flops_quadratic: int
    time_linear_ms: float
    time_quadratic_ms: float
    reps: int


def _median_ms(fn, reps: int) -> float:
    times = []
    for _ in range(reps):
        start = time.perf_counter()
        fn()
        times.append((time.perf_counter() - start) * 1e3)
    return float(np.median(times))


def bench_scaling(
    ts: list[int], c: int = 16, h: int = 4, reps: int = 3, seed: int = 0, out: str | Path | None = None,
    timed: bool = True,
) -> list[BenchRecord]:
    """Analytic FLOPs and median forward wall time (32-bit) of both kernels per length."""
    ts = [int(t) for t in ts]
    if any(a >= b for a, b in zip(ts[:-1], ts[1:])):
        raise ValueError(f"sequence lengths must ascend: {ts}")
    rng = np.random.default_rng(seed)
    records = []
    with precision(32), no_grad():
        lin = SpatialMixing(c, h, rng)
        quad = FullAttention(c, h, rng)
        for t in ts:
            x = rng.normal(size=(1, t, c)).astype(np.float32)
            tl = tq = float("nan")
            if timed:
                xt = Tensor(x)
                tl = _median_ms(lambda: lin(xt), reps)
                tq = _median_ms(lambda: quad(x[0]), reps)
            records.append(BenchRecord(t, spatial_mixing_flops(t, c, h), full_attention_flops(t, c, h), tl, tq, reps))
    if out is not None:
        write_scaling_csv(out, records)
    return records


def write_scaling_csv(path: str | Path, records: list[BenchRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["T", "flops_linear", "flops_quadratic", "time_linear_ms", "time_quadratic_ms"])
        for r in records:
            w.writerow([r.t, r.flops_linear, r.flops_quadratic, f"{r.time_linear_ms:.4f}", f"{r.time_quadratic_ms:.4f}"])
