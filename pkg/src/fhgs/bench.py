"""Scaling benchmarks for the cumulative clustering sweep and its backward.

Only fitted log-log exponents and cross-path numerical agreement gate
anything; absolute wall-clock numbers are environment noise and are reported
but never asserted. Measurement is single-threaded on purpose.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .backward import grad_w_lcf, grad_w_lcf_naive


@dataclass
class BenchResult:
    name: str
    sizes: list
    reps: int
    median_ns: list = field(default_factory=list)
    exponent: float = 0.0

    def csv_rows(self):
        for n, ns in zip(self.sizes, self.median_ns):
            yield f"{self.name},{n},{self.reps},{ns},{self.exponent:.4f}"


def fit_exponent(sizes, medians) -> float:
    """Least-squares slope of log(time) against log(size)."""
    x = np.log(np.asarray(sizes, dtype=np.float64))
    y = np.log(np.asarray(medians, dtype=np.float64))
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


def _time_median(fn, reps: int, warmup: int = 2) -> float:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    return float(np.median(samples))


def _random_fragments(n: int, d: int, rng):
    w = rng.uniform(0.0, 1.0, n)
    w *= 0.9 / max(w.sum(), 1e-9)
    sigma = rng.uniform(0.0, 1.0, n)
    f = rng.normal(size=(n, d))
    f /= np.linalg.norm(f, axis=1, keepdims=True)
    return w, sigma, f


def _lcf_cumulative(w, sigma, f):
    """Vectorized far-to-near cumulative evaluation, O(N * d)."""
    W_far = np.concatenate([[0.0], np.cumsum(w)[:-1]])
    F_far = np.vstack([np.zeros((1, f.shape[1])), np.cumsum(w[:, None] * f, axis=0)[:-1]])
    return float(np.sum(sigma * w * (W_far - np.sum(F_far * f, axis=1))))


def _lcf_pairwise(w, sigma, f):
    """Materialized double sum, O(N^2); the brute-force comparison path."""
    gram = f @ f.T
    ww = np.outer(w, w)
    tri = np.tril(np.ones_like(gram), k=-1)
    return float(np.sum(sigma[:, None] * ww * (1.0 - gram) * tri))


def bench_lcf(sizes=(64, 256, 1024, 4096), reps: int = 5, d: int = 16, seed: int = 0,
              check_agreement: bool = True):
    """Time the linear and brute-force clustering paths on identical inputs.

    Returns (linear BenchResult, brute BenchResult, max relative disagreement).
    """
    if len(sizes) < 4 or list(sizes) != sorted(set(sizes)):
        raise ValueError("need >= 4 strictly increasing sizes")
    rng = np.random.default_rng(seed)
    lin = BenchResult("lcf_cumulative", list(sizes), reps)
    brute = BenchResult("lcf_pairwise", list(sizes), reps)
    worst = 0.0
    for n in sizes:
        w, sigma, f = _random_fragments(n, d, rng)
        lin.median_ns.append(_time_median(lambda: _lcf_cumulative(w, sigma, f), reps))
        brute.median_ns.append(_time_median(lambda: _lcf_pairwise(w, sigma, f), reps))
        if check_agreement:
            a, b = _lcf_cumulative(w, sigma, f), _lcf_pairwise(w, sigma, f)
            worst = max(worst, abs(a - b) / max(abs(a), abs(b), 1e-30))
    lin.exponent = fit_exponent(sizes, lin.median_ns)
    brute.exponent = fit_exponent(sizes, brute.median_ns)
    return lin, brute, worst


def bench_backward(sizes=(64, 256, 1024, 4096), reps: int = 5, d: int = 16, seed: int = 0):
    """Time the reverse-sweep weight gradient; returns (backward, forward) results."""
    if len(sizes) < 4 or list(sizes) != sorted(set(sizes)):
        raise ValueError("need >= 4 strictly increasing sizes")
    rng = np.random.default_rng(seed)
    back = BenchResult("lcf_backward", list(sizes), reps)
    fwd = BenchResult("lcf_forward", list(sizes), reps)
    for n in sizes:
        w, sigma, f = _random_fragments(n, d, rng)
        back.median_ns.append(_time_median(lambda: grad_w_lcf(w, sigma, f), reps))
        fwd.median_ns.append(_time_median(lambda: _lcf_cumulative(w, sigma, f), reps))
    back.exponent = fit_exponent(sizes, back.median_ns)
    fwd.exponent = fit_exponent(sizes, fwd.median_ns)
    return back, fwd


def bench_backward_naive(sizes=(64, 256, 1024), reps: int = 3, d: int = 16, seed: int = 0):
    """O(N^2) two-term gradient timing, for the scaling contrast."""
    rng = np.random.default_rng(seed)
    res = BenchResult("lcf_backward_naive", list(sizes), reps)
    for n in sizes:
        w, sigma, f = _random_fragments(n, d, rng)
        res.median_ns.append(_time_median(lambda: grad_w_lcf_naive(w, sigma, f), reps, warmup=1))
    res.exponent = fit_exponent(sizes, res.median_ns)
    return res


def write_csv(results, path):
    lines = ["name,n,reps,median_ns,exponent"]
    for res in results:
        lines.extend(res.csv_rows())
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
