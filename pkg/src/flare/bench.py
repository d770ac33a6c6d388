"""Wall-clock scaling of the bare token mixers (forward + backward)."""

import time

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ConfigError
from .mixer import flare_mix_fused, vanilla_attention
from .tensor import Tensor

MIXERS = ("flare", "vanilla")
BENCH_HEADER = ["n", "mixer", "m", "seconds_mean", "seconds_std"]


def _inputs(mixer, n, m, c, h, rng, dtype):
    d = c // h
    kv_shape = (h, n, d)
    q_shape = (h, m, d) if mixer == "flare" else kv_shape
    q = Tensor(rng.standard_normal(q_shape), requires_grad=True, dtype=dtype)
    k = Tensor(rng.standard_normal(kv_shape), requires_grad=True, dtype=dtype)
    v = Tensor(rng.standard_normal(kv_shape), requires_grad=True, dtype=dtype)
    g = rng.standard_normal(kv_shape).astype(dtype)
    return q, k, v, g


def _step(mixer, q, k, v, g, d):
    for t in (q, k, v):
        t.grad = None
    y = flare_mix_fused(q, k, v) if mixer == "flare" else vanilla_attention(q, k, v, np.sqrt(d))
    y.backward(g)


def time_mixer(mixer, n, m=64, c=64, h=8, reps=3, *, dtype=np.float32, seed=0, threads=1):
    """Seconds per forward+backward pass, one warm-up call then ``reps`` timed calls."""
    if mixer not in MIXERS:
        raise ConfigError(f"unknown mixer {mixer!r}; choose from {MIXERS}")
    if c % h:
        raise ConfigError(f"C={c} not divisible by H={h}")
    if reps < 1 or n < 1 or m < 1:
        raise ConfigError("n, m and reps must be positive")
    rng = np.random.default_rng(seed)
    q, k, v, g = _inputs(mixer, n, m, c, h, rng, dtype)
    times = []
    with threadpool_limits(limits=threads):
        _step(mixer, q, k, v, g, c // h)
        for _ in range(reps):
            t0 = time.perf_counter()
            _step(mixer, q, k, v, g, c // h)
            times.append(time.perf_counter() - t0)
    return times


def run_bench(mixer, ns, m=64, c=64, h=8, reps=3, threads=1):
    """Rows ``(n, mixer, m, mean, std, median)`` for each sequence length."""
    rows = []
    for n in ns:
        t = np.asarray(time_mixer(mixer, n, m, c, h, reps, threads=threads))
        rows.append((n, mixer, m, float(t.mean()), float(t.std()), float(np.median(t))))
    return rows


def loglog_slope(ns, seconds):
    """Least-squares slope of log(time) against log(N)."""
    slope, _ = np.polyfit(np.log(np.asarray(ns, dtype=float)),
                          np.log(np.asarray(seconds, dtype=float)), 1)
    return float(slope)
