"""Greedy draft-verify generation with dynamic exit and periodic re-selection."""

from __future__ import annotations

import json
import time
from collections import deque
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConsistencyError, ContractError, InputError, SelectionError
from .latency import LatencyProfile, eval_latency, normalize_weights
from .model import KVCache, LayerSet, TargetContext, ToyModel, top1
from .optimizer import DraftConfig, ReferenceStates, dp_forward, expected_tokens, select_config
from .theory import del_select, tpl

__all__ = [
    "EngineConfig", "HistoryBuffer", "StepRecord", "SpecDecodeStats", "SpeculativeDecoder",
    "draft_step", "verify_step", "generate", "greedy_autoregressive", "expected_tokens",
    "update_history",
]

METHODS = ("knapspec", "del", "fixed", "autoregressive")


@dataclass(frozen=True)
class EngineConfig:
    D: int = 10
    tau_conf: float = 0.7
    tau: float = 0.5
    prune: bool = True
    m: int = 5
    T: int = 64
    clock: str = "simulated"
    # None charges K * t_mlp per re-optimisation in simulated mode.
    optimizer_charge_ms: float | None = None
    method: str = "knapspec"
    # Added to the live context length wherever latency is modelled, to
    # emulate long-context serving on a short toy sequence.
    context_offset: int = 0

    def __post_init__(self):
        if self.D < 1:
            raise ContractError(f"D must be >= 1, got {self.D}")
        if not 0 < self.tau_conf <= 1:
            raise ContractError(f"tau_conf must lie in (0, 1], got {self.tau_conf}")
        if self.T < 1 or self.m < 1:
            raise ContractError("T and m must be >= 1")
        if self.clock not in ("simulated", "wall"):
            raise ContractError(f"unknown clock {self.clock!r}")
        if self.method not in METHODS:
            raise ContractError(f"unknown method {self.method!r}")
        if self.context_offset < 0:
            raise ContractError("context_offset must be >= 0")


@dataclass(frozen=True)
class StepRecord:
    """Target states ``(2L + 1, rows, d)`` for one step's accepted + bonus rows."""

    tokens: tuple[int, ...]
    positions: np.ndarray
    states: np.ndarray


class HistoryBuffer:
    def __init__(self, m: int, L: int):
        self.m = m
        self.L = L
        self.records: deque[StepRecord] = deque(maxlen=m)

    @property
    def r(self) -> int:
        return sum(len(rec.tokens) for rec in self.records)

    def __len__(self) -> int:
        return len(self.records)

    def push(self, record: StepRecord) -> None:
        s = record.states
        if s.ndim != 3 or s.shape[0] != 2 * self.L + 1 or s.shape[1] != len(record.tokens):
            raise ContractError("step record must hold states for every index 0..2L and every row")
        if len(record.positions) != len(record.tokens) or not record.tokens:
            raise ContractError("step record needs one position per token and at least one row")
        self.records.append(record)

    def matrices(self) -> tuple[np.ndarray, np.ndarray]:
        """Chronologically concatenated ``(2L + 1, r, d)`` states and positions."""
        if not self.records:
            raise ContractError("history is empty")
        states = np.concatenate([rec.states for rec in self.records], axis=1)
        positions = np.concatenate([rec.positions for rec in self.records])
        return states, positions

    def references(self, cache: KVCache) -> ReferenceStates:
        states, positions = self.matrices()
        return ReferenceStates(states, TargetContext.from_cache(cache, positions))


def update_history(buffer: HistoryBuffer, record: StepRecord) -> HistoryBuffer:
    buffer.push(record)
    return buffer


@dataclass
class SpecDecodeStats:
    tokens_generated: int = 0
    speculation_steps: int = 0
    drafted: int = 0
    accepted: int = 0
    elapsed_ms: float = 0.0
    optimizer_ms: float = 0.0
    optimizations: int = 0
    selection_failures: int = 0
    baseline_ms: float | None = None
    # Largest number of live DP states seen in any re-optimisation.
    dp_peak_cells: int = 0
    dp_populated_cells: int = 0

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.drafted if self.drafted else float("nan")

    @property
    def tpt(self) -> float:
        """Realised tokens per ms including optimiser time."""
        return self.tokens_generated / self.elapsed_ms if self.elapsed_ms > 0 else float("nan")

    @property
    def tpt_exclusive(self) -> float:
        t = self.elapsed_ms - self.optimizer_ms
        return self.tokens_generated / t if t > 0 else float("nan")

    @property
    def speedup(self) -> float:
        if self.baseline_ms is None or self.elapsed_ms <= 0:
            return float("nan")
        return self.baseline_ms / self.elapsed_ms

    def as_dict(self) -> dict:
        d = asdict(self)
        d.update(acceptance_rate=self.acceptance_rate, tpt=self.tpt,
                 tpt_exclusive=self.tpt_exclusive, speedup=self.speedup)
        return d


def draft_step(model: ToyModel, S: LayerSet, last_token: int, target_cache: KVCache,
               engine: EngineConfig, max_tokens: int | None = None) -> list[tuple[int, float]]:
    """Greedy drafting through ``S`` until confidence drops below ``tau_conf``.

    The draft cache is a view on the target cache: committed keys/values are
    shared, the speculative tail is scratch that verification overwrites.
    The exit test runs after each emission, so the low-confidence token is
    still proposed.
    """
    limit = engine.D if max_tokens is None else min(engine.D, max_tokens)
    view = target_cache.view(S)
    out = []
    tok = last_token
    for _ in range(limit):
        h = model.forward_subnet(S, model.embed([tok]), view)
        tok, p = top1(model.logits(h[-1]))
        out.append((tok, p))
        if p < engine.tau_conf:
            break
    return out


def verify_step(model: ToyModel, draft_tokens: Sequence[int], last_token: int,
                target_cache: KVCache, committed_len: int) -> tuple[int, int, StepRecord]:
    """One parallel target pass over ``[last_token] + draft``; greedy prefix match.

    Returns ``(n_accepted, bonus_token, record)`` and leaves the target cache
    holding exactly the committed prefix (everything but the newest token).
    """
    start = target_cache.length
    if start != committed_len - 1:
        raise ConsistencyError(f"target cache length {start} != committed length - 1 = {committed_len - 1}")
    chunk = [int(last_token), *map(int, draft_tokens)]
    h, states = model.forward(chunk, target_cache, capture=True)
    target = np.argmax(model.logits(h), axis=-1)
    n_acc = 0
    while n_acc < len(draft_tokens) and int(draft_tokens[n_acc]) == int(target[n_acc]):
        n_acc += 1
    bonus = int(target[n_acc])
    target_cache.rollback(start + n_acc + 1)
    rows = n_acc + 1
    record = StepRecord(tuple(chunk[:rows]), start + np.arange(rows), states[:, :rows].copy())
    return n_acc, bonus, record


Selector = Callable[[ReferenceStates, float], "DraftConfig | None"]


class SpeculativeDecoder:
    """One decoding stream: owns its cache, history, clock and step log."""

    def __init__(self, model: ToyModel, engine: EngineConfig, profile: LatencyProfile,
                 selector: Selector | None = None, fixed: DraftConfig | LayerSet | None = None):
        self.model = model
        self.engine = engine
        self.profile = profile
        self.selector = selector
        if isinstance(fixed, LayerSet):
            fixed = DraftConfig(fixed, engine.D, float("nan"), float("nan"))
        self.fixed = fixed
        if engine.method == "fixed" and fixed is None and selector is None:
            raise ContractError("method 'fixed' needs a fixed draft config or a selector")
        self.step_log: list[dict] = []
        self.last_table = None
        self.history: HistoryBuffer | None = None
        self.cache: KVCache | None = None

    # -- selection ----------------------------------------------------------

    def _select(self, refs: ReferenceStates, n: float) -> DraftConfig | None:
        e = self.engine
        if self.selector is not None:
            return self.selector(refs, n)
        if e.method == "knapspec":
            weights = normalize_weights(self.profile, n)
            table = dp_forward(self.model, refs, weights, e.tau, e.prune, check_refs=False)
            self.last_table = table
            return select_config(self.model, table, refs, self.profile, n, e.D)
        if e.method == "del":
            L = self.model.L
            ell, gamma, alpha = del_select(self.model, refs, e.D)
            S = LayerSet.prefix(ell, L)
            t_draft, t_target = eval_latency(self.profile, S, n, L)
            return DraftConfig(S, gamma, alpha, tpl(ell, gamma, alpha, L), n, t_draft, t_target)
        return self.fixed

    def _optimizer_charge(self, n: float) -> float:
        if self.engine.optimizer_charge_ms is not None:
            return self.engine.optimizer_charge_ms
        w = normalize_weights(self.profile, n)
        return w.capacity(self.model.L) * self.profile.t_mlp(n)

    # -- main loop ------------------------------------------------------------

    def generate(self, prompt: Sequence[int], max_new: int) -> tuple[list[int], SpecDecodeStats]:
        model, e = self.model, self.engine
        L = model.L
        prompt = [int(t) for t in prompt]
        if not prompt:
            raise InputError("prompt must hold at least one token")
        if max_new < 0:
            raise InputError("max_new must be >= 0")
        if len(prompt) + max_new > model.config.max_seq:
            raise InputError(f"prompt + max_new exceeds max_seq={model.config.max_seq}")
        simulated = e.clock == "simulated"
        stats = SpecDecodeStats(baseline_ms=0.0 if simulated else None)
        self.step_log = []
        committed = list(prompt)
        if max_new == 0:
            return committed, stats

        cache = model.new_cache(len(prompt) + max_new + e.D + 1)
        if len(prompt) > 1:
            model.forward(prompt[:-1], cache)
        history = HistoryBuffer(e.m, L)
        self.history, self.cache = history, cache
        full = LayerSet.full(L)
        if e.method == "fixed" and self.selector is None:
            config = self.fixed
        elif e.method == "autoregressive":
            config = None
        else:
            config = DraftConfig(full, e.D, 1.0, float("nan"))
        since_opt = 0
        step = 0

        while stats.tokens_generated < max_new:
            n = len(committed) + e.context_offset
            opt_ms = 0.0
            if (e.method not in ("autoregressive",) and (e.method != "fixed" or self.selector is not None)
                    and since_opt >= e.T and len(history)):
                t0 = time.perf_counter()
                self.last_table = None
                try:
                    config = self._select(history.references(cache), n)
                except SelectionError:
                    config = None
                    stats.selection_failures += 1
                if self.last_table is not None:
                    st = self.last_table.stats
                    stats.dp_peak_cells = max(stats.dp_peak_cells, st.peak_live_cells)
                    stats.dp_populated_cells = max(stats.dp_populated_cells, st.populated_cells)
                wall = (time.perf_counter() - t0) * 1e3
                opt_ms = self._optimizer_charge(n) if simulated else wall
                stats.optimizations += 1
                stats.optimizer_ms += opt_ms
                since_opt = 0

            remaining = max_new - stats.tokens_generated
            S = config.S if config is not None else None
            t_draft, t_target = eval_latency(self.profile, S or LayerSet.empty(L), n, L)

            t0 = time.perf_counter()
            drafts = []
            if S is not None and remaining > 1:
                drafts = draft_step(model, S, committed[-1], cache, e, remaining - 1)
            t1 = time.perf_counter()
            draft_tokens = [t for t, _ in drafts]
            n_acc, bonus, record = verify_step(model, draft_tokens, committed[-1], cache, len(committed))
            t2 = time.perf_counter()

            if simulated:
                draft_ms = len(drafts) * t_draft
                verify_ms = t_target
                stats.baseline_ms += sum(self.profile.t_attn(n + k) + self.profile.t_mlp(n + k)
                                         for k in range(n_acc + 1)) * L
            else:
                draft_ms, verify_ms = (t1 - t0) * 1e3, (t2 - t1) * 1e3
            stats.elapsed_ms += draft_ms + verify_ms + opt_ms

            new = draft_tokens[:n_acc] + [bonus]
            committed.extend(new)
            update_history(history, record)
            stats.tokens_generated += len(new)
            stats.speculation_steps += 1
            stats.drafted += len(drafts)
            stats.accepted += n_acc
            since_opt += len(new)
            self.step_log.append({
                "step": step,
                "n": n,
                "L": L,
                "mask": S.mask if S is not None else None,
                "drafted": len(drafts),
                "accepted": n_acc,
                "t_draft_ms": t_draft,
                "t_target_ms": t_target,
                "draft_ms": draft_ms,
                "verify_ms": verify_ms,
                "optimizer_ms": opt_ms,
                "alpha_hat": None if config is None else _finite_or_none(config.alpha_hat),
                "tpt_est": None if config is None else _finite_or_none(config.tpt_score),
                "gamma_star": None if config is None else config.gamma,
            })
            step += 1
        return committed, stats

    def write_step_log(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.step_log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _finite_or_none(x: float):
    return float(x) if np.isfinite(x) else None


def generate(model: ToyModel, prompt: Sequence[int], max_new: int, engine: EngineConfig | None = None,
             profile: LatencyProfile | None = None, **kwargs) -> tuple[list[int], SpecDecodeStats]:
    engine = engine or EngineConfig()
    profile = profile or LatencyProfile(0.001, 0.05, 0.1)
    return SpeculativeDecoder(model, engine, profile, **kwargs).generate(prompt, max_new)


def greedy_autoregressive(model: ToyModel, prompt: Sequence[int], max_new: int) -> list[int]:
    """Plain one-token-at-a-time greedy decoding, used as the losslessness oracle."""
    seq = [int(t) for t in prompt]
    cache = model.new_cache(len(seq) + max_new + 1)
    h = model.forward(seq, cache)
    for _ in range(max_new):
        tok = int(np.argmax(model.logits(h[-1])))
        seq.append(tok)
        h = model.forward([tok], cache)
    return seq
