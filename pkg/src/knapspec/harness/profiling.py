"""Sub-layer latency micro-benchmark feeding the linear attention / flat MLP fit."""

from __future__ import annotations

import time
from dataclasses import replace
from typing import Callable, Sequence

import numpy as np

from ..errors import FitError
from ..latency import LatencyProfile, fit_profile
from ..model import ToyModel

# timer(fn, kind, n) -> milliseconds; kind is "attn" or "mlp".
Timer = Callable[[Callable[[], object], str, int], float]

# Medians closer than this many clock ticks are considered unreliable.
RESOLUTION_FACTOR = 100.0


def median_timer(reps: int = 30, warmup: int = 5, clock=time.perf_counter) -> Timer:
    if reps < 1 or warmup < 0:
        raise ValueError("reps must be >= 1 and warmup >= 0")

    def timer(fn, kind, n):
        for _ in range(warmup):
            fn()
        samples = np.empty(reps)
        for k in range(reps):
            t0 = clock()
            fn()
            samples[k] = (clock() - t0) * 1e3
        return float(np.median(samples))

    return timer


def clock_resolution_ms() -> float:
    return time.get_clock_info("perf_counter").resolution * 1e3


def benchmark_sublayers(model: ToyModel, lengths: Sequence[int], timer: Timer | None = None,
                        *, reps: int = 30, warmup: int = 5, resolution_ms: float | None = None,
                        seed: int = 0) -> tuple[list[tuple[int, float, float]], list[str]]:
    """Time one decode-row attention and MLP call at each cached context length.

    Returns ``(samples, warnings)`` with samples as ``(n, t_attn_ms, t_mlp_ms)``.
    """
    lengths = [int(n) for n in lengths]
    if len(set(lengths)) < 2:
        raise FitError("profiling needs at least two distinct context lengths")
    if min(lengths) < 1:
        raise FitError("context lengths must be positive")
    if timer is None:
        timer = median_timer(reps, warmup)
        if resolution_ms is None:
            resolution_ms = clock_resolution_ms()
    rng = np.random.default_rng(seed)
    d = model.config.d
    samples = []
    for n in lengths:
        cache = model.new_cache(n + 1)
        cache.keys[:, :n] = rng.standard_normal((model.L, n, d)).astype(np.float32)
        cache.values[:, :n] = rng.standard_normal((model.L, n, d)).astype(np.float32)
        cache.length = n
        x = rng.standard_normal((1, d)).astype(np.float32)
        t_attn = timer(lambda: model.forward_layer(1, x, cache), "attn", n)
        t_mlp = timer(lambda: model.forward_layer(2, x), "mlp", n)
        samples.append((n, float(t_attn), float(t_mlp)))
    warnings = []
    if resolution_ms:
        smallest = min(min(t_a, t_m) for _, t_a, t_m in samples)
        if smallest < RESOLUTION_FACTOR * resolution_ms:
            warnings.append(f"timer resolution {resolution_ms:.3g} ms is coarse next to median {smallest:.3g} ms")
    return samples, warnings


def profile_model(model: ToyModel, lengths: Sequence[int], timer: Timer | None = None, **kwargs) -> LatencyProfile:
    samples, warnings = benchmark_sublayers(model, lengths, timer, **kwargs)
    prof = fit_profile(samples)
    return replace(prof, warnings=prof.warnings + tuple(warnings))
