"""Desk-scale ablations: estimate/throughput correlation, skip ratio vs context,
pruning threshold and re-optimisation interval sweeps.

Every sweep point is an independent decoding stream, so points run in a
thread pool; results come back in axis order regardless of completion order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from ..engine import EngineConfig, SpeculativeDecoder, greedy_autoregressive
from ..latency import LatencyProfile, normalize_weights
from ..model import LayerSet, ToyModel
from ..optimizer import (Candidate, ReferenceStates, dp_forward, estimate_acceptance,
                         select_config, select_from_candidates, subnet_final)


def parallel_map(fn: Callable, items: Iterable, jobs: int = 1) -> list:
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def warm_references(model: ToyModel, prompt: Sequence[int], warm_tokens: int, rows: int) -> tuple[list[int], ReferenceStates]:
    """Greedy-extend the prompt and keep the last ``rows`` target states as history."""
    seq = greedy_autoregressive(model, prompt, warm_tokens)
    return seq, ReferenceStates.from_forward(model, seq, min(rows, len(seq)))


# -- estimate vs realised throughput --------------------------------------------


@dataclass(frozen=True)
class ConfigPoint:
    mask: int
    n_exec: int
    gamma: int
    alpha_hat: float
    tpt_est: float
    throughput: float
    acceptance: float


def sample_layer_sets(L: int, count: int, seed: int) -> list[LayerSet]:
    """``count`` distinct non-empty executed sets, always including the full set."""
    rng = np.random.default_rng(seed)
    total = (1 << (2 * L)) - 1
    if count > total:
        raise ValueError(f"only {total} non-empty layer sets exist for L={L}")
    masks = {total}
    while len(masks) < count:
        masks.add(int(rng.integers(1, total + 1)))
    return [LayerSet.from_mask(m, L) for m in sorted(masks)]


def correlation_sweep(model: ToyModel, profile: LatencyProfile, prompt: Sequence[int], engine: EngineConfig,
                      max_new: int, count: int = 32, seed: int = 0, warm_tokens: int = 32,
                      rows: int = 32, jobs: int = 1) -> list[ConfigPoint]:
    """Score fixed draft configurations offline, then decode with each one.

    The estimate uses the history of a warm-up continuation; the realised
    throughput comes from decoding the next ``max_new`` tokens with the
    configuration pinned (simulated clock, dynamic exit on, ``D = gamma*``).
    """
    L = model.L
    seq, refs = warm_references(model, prompt, warm_tokens, rows)
    n = len(seq) + engine.context_offset
    final = refs[2 * L]

    def run(S: LayerSet) -> ConfigPoint:
        alpha = estimate_acceptance(model, subnet_final(model, refs, S), final)
        cfg = select_from_candidates([Candidate(-1, S, alpha)], profile, n, L, engine.D)
        e = replace(engine, method="fixed", D=cfg.gamma)
        dec = SpeculativeDecoder(model, e, profile, fixed=cfg)
        _, st = dec.generate(seq, max_new)
        return ConfigPoint(S.mask, len(S), cfg.gamma, alpha, cfg.tpt_score, st.tpt, st.acceptance_rate)

    return parallel_map(run, sample_layer_sets(L, count, seed), jobs)


# -- skip ratio vs context length -------------------------------------------------


@dataclass(frozen=True)
class SkipPoint:
    n: int
    w_attn: int
    w_mlp: int
    mask: int
    skipped_attn: int
    skipped_mlp: int
    gamma: int
    tpt_est: float

    @property
    def attn_share(self) -> float:
        total = self.skipped_attn + self.skipped_mlp
        return self.skipped_attn / total if total else float("nan")


def skip_ratio_sweep(model: ToyModel, profile: LatencyProfile, refs: ReferenceStates,
                     lengths: Sequence[int], tau: float = 0.5, prune: bool = True, D: int = 10,
                     jobs: int = 1) -> list[SkipPoint]:
    """Optimal configuration per context length on one fixed history."""
    L = model.L

    def run(n: int) -> SkipPoint:
        w = normalize_weights(profile, n)
        table = dp_forward(model, refs, w, tau, prune, check_refs=False)
        cfg = select_config(model, table, refs, profile, n, D)
        S = cfg.S
        return SkipPoint(int(n), w.w_attn, w.w_mlp, S.mask, L - S.n_attn, L - S.n_mlp, cfg.gamma, cfg.tpt_score)

    return parallel_map(run, lengths, jobs)


# -- engine-level sweeps ------------------------------------------------------------


@dataclass(frozen=True)
class RunPoint:
    label: str
    value: float
    throughput: float
    speedup: float
    acceptance: float
    optimizer_ms: float
    elapsed_ms: float
    optimizations: int
    peak_dp_cells: int
    populated_dp_cells: int

    @property
    def optimizer_overhead_pct(self) -> float:
        return 100.0 * self.optimizer_ms / self.elapsed_ms if self.elapsed_ms > 0 else float("nan")


def _run(model, profile, prompt, max_new, engine: EngineConfig, label: str, value: float) -> RunPoint:
    dec = SpeculativeDecoder(model, engine, profile)
    _, st = dec.generate(prompt, max_new)
    return RunPoint(label, float(value), st.tpt, st.speedup, st.acceptance_rate, st.optimizer_ms,
                    st.elapsed_ms, st.optimizations, st.dp_peak_cells, st.dp_populated_cells)


def threshold_sweep(model: ToyModel, profile: LatencyProfile, prompt: Sequence[int], engine: EngineConfig,
                    max_new: int, taus: Sequence[float], jobs: int = 1) -> list[RunPoint]:
    """Decode once per pruning threshold; a negative threshold disables pruning."""
    def run(tau: float) -> RunPoint:
        e = replace(engine, tau=float(tau), prune=tau >= 0)
        return _run(model, profile, prompt, max_new, e, "tau", tau)

    return parallel_map(run, taus, jobs)


def interval_sweep(model: ToyModel, profile: LatencyProfile, prompt: Sequence[int], engine: EngineConfig,
                   max_new: int, intervals: Sequence[int], jobs: int = 1) -> list[RunPoint]:
    def run(T: int) -> RunPoint:
        e = replace(engine, T=int(T))
        return _run(model, profile, prompt, max_new, e, "T", T)

    return parallel_map(run, intervals, jobs)


# -- config-driven entry points -------------------------------------------------------


def run_correlation(cfg) -> list[ConfigPoint]:
    model = cfg.build_model()
    return correlation_sweep(model, cfg.build_profile(), cfg.prompt_tokens(), cfg.engine("fixed"),
                             cfg.max_new_tokens, cfg.num_configs, cfg.seed, cfg.warm_tokens,
                             cfg.history_rows, cfg.jobs)


def run_context(cfg) -> list[SkipPoint]:
    model = cfg.build_model()
    _, refs = warm_references(model, cfg.prompt_tokens(), cfg.warm_tokens, cfg.history_rows)
    return skip_ratio_sweep(model, cfg.build_profile(), refs, cfg.require_axis("context_lengths_tokens"),
                            cfg.tau, cfg.prune, cfg.max_draft_tokens, cfg.jobs)


def run_threshold(cfg) -> list[RunPoint]:
    return threshold_sweep(cfg.build_model(), cfg.build_profile(), cfg.prompt_tokens(), cfg.engine(),
                           cfg.max_new_tokens, cfg.require_axis("thresholds"), cfg.jobs)


def run_interval(cfg) -> list[RunPoint]:
    return interval_sweep(cfg.build_model(), cfg.build_profile(), cfg.prompt_tokens(), cfg.engine(),
                          cfg.max_new_tokens, cfg.require_axis("intervals_tokens"), cfg.jobs)


SWEEPS = {
    "correlation": run_correlation,
    "context": run_context,
    "threshold": run_threshold,
    "interval": run_interval,
}
