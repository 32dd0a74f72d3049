"""Knapsack layer selection: DP over (sub-layer, skipped weight) and TPT grid search."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .errors import ConsistencyError, ContractError, RefusalError, SelectionError, TableLookupError
from .kernels import EMPTY, EXECUTE, SKIP
from .latency import LatencyProfile, WeightPair, eval_latency
from .model import F32, LayerSet, TargetContext, ToyModel
from .tensorio import load_tensors, save_tensors

# Relative width inside which two TPT values count as tied.
TPT_TIE_RTOL = 1e-12


@dataclass(frozen=True)
class ReferenceStates:
    """Target hidden states ``X^(0..2L)`` of the ``r`` most recent history rows."""

    states: np.ndarray  # (2L + 1, r, d)
    context: TargetContext

    def __post_init__(self):
        s = np.ascontiguousarray(self.states, dtype=F32)
        if s.ndim != 3 or s.shape[0] < 3 or s.shape[0] % 2 != 1 or s.shape[1] < 1:
            raise ContractError(f"reference states must be (2L+1, r>=1, d), got {s.shape}")
        if self.context.positions.shape != (s.shape[1],):
            raise ContractError("one context position per reference row required")
        object.__setattr__(self, "states", s)

    @property
    def L(self) -> int:
        return (self.states.shape[0] - 1) // 2

    @property
    def r(self) -> int:
        return self.states.shape[1]

    def __getitem__(self, i: int) -> np.ndarray:
        return self.states[i]

    @classmethod
    def from_forward(cls, model: ToyModel, tokens: Sequence[int], r: int) -> "ReferenceStates":
        """Run the target over ``tokens`` and keep the last ``r`` rows."""
        if not 1 <= r <= len(tokens):
            raise ContractError(f"need 1 <= r <= {len(tokens)}, got {r}")
        cache = model.new_cache(max(len(tokens), 1))
        _, states = model.forward(tokens, cache, capture=True)
        positions = np.arange(len(tokens) - r, len(tokens))
        return cls(states[:, -r:], TargetContext.from_cache(cache, positions))

    def check(self, model: ToyModel, atol: float = 1e-4) -> None:
        """Verify ``X^(i) == f^(i)(X^(i-1))`` up to ``atol`` relative to row scale."""
        if self.L != model.L or self.states.shape[2] != model.config.d:
            raise ContractError("reference states do not match the model shape")
        for i in range(1, 2 * self.L + 1):
            got = model.sublayer_batch(i, self.states[i - 1][None], self.context)[0]
            scale = max(1.0, float(np.abs(self.states[i]).max()))
            err = float(np.abs(got - self.states[i]).max())
            if err > atol * scale:
                raise ContractError(f"reference chain broken at sub-layer {i}: max error {err:.3g}")

    def save(self, path) -> None:
        c = self.context
        save_tensors(
            path,
            {"states": self.states, "positions": c.positions.astype(np.float32),
             "context_keys": c.keys, "context_values": c.values},
            {"kind": "reference-trace", "L": self.L, "r": self.r},
        )

    @classmethod
    def load(cls, path) -> "ReferenceStates":
        t, meta = load_tensors(path)
        if meta.get("kind") != "reference-trace":
            raise ContractError(f"{path}: not a reference trace")
        ctx = TargetContext(t["context_keys"], t["context_values"], t["positions"].astype(np.int64))
        return cls(t["states"], ctx)


@dataclass
class DPStats:
    cell_updates: int = 0
    layer_calls: int = 0
    populated_cells: int = 0
    peak_live_rows: int = 0
    peak_live_cells: int = 0


@dataclass
class DPTable:
    """Scores and compact backpointers for every cell, states for the last row only."""

    weights: WeightPair
    L: int
    tau: float
    prune: bool
    scores: np.ndarray  # (2L + 1, K + 1), NaN where empty
    back: np.ndarray  # (2L + 1, K + 1) of EMPTY / EXECUTE / SKIP
    terminal: dict[int, np.ndarray]
    stats: DPStats = field(default_factory=DPStats)
    # Only filled when built with keep_states=True.
    cells: dict[tuple[int, int], np.ndarray] | None = None

    @property
    def K(self) -> int:
        return self.weights.capacity(self.L)

    @property
    def budget_cap(self) -> int:
        return self.K // 2 if self.prune else self.K

    def populated(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.back[i] != EMPTY)

    def terminal_budgets(self) -> list[int]:
        return [int(j) for j in self.populated(2 * self.L)]

    def state(self, j: int) -> np.ndarray:
        if j not in self.terminal:
            raise TableLookupError(f"terminal cell (2L, {j}) is empty")
        return self.terminal[j]


def cos_rows(A, B) -> float:
    """Mean over rows of the per-row cosine similarity."""
    A = np.asarray(A, dtype=F32)
    B = np.asarray(B, dtype=F32)
    if A.shape != B.shape or A.ndim != 2:
        raise ContractError(f"cos_rows needs equal (r, d) shapes, got {A.shape} and {B.shape}")
    return float(kernels.cos_rows_batch(A[None], B)[0])


def _prepare(model: ToyModel, refs: ReferenceStates, weights: WeightPair, tau: float):
    if refs.L != model.L or refs.states.shape[2] != model.config.d:
        raise ContractError("reference states do not match the model shape")
    if not -1.0 <= tau <= 1.0:
        raise ContractError(f"tau must lie in [-1, 1], got {tau}")
    if weights.w_attn < 1 or weights.w_mlp < 1:
        raise ContractError("knapsack weights must be positive integers")


def dp_forward(model: ToyModel, refs: ReferenceStates, weights: WeightPair, tau: float = 0.5,
               prune: bool = True, *, keep_states: bool = False, check_refs: bool = True,
               impl=None) -> DPTable:
    """Fill the knapsack table one sub-layer at a time.

    All populated cells of row ``i - 1`` go through ``f^(i)`` as one batch;
    only rows ``i - 1`` and ``i`` are alive at once.
    """
    _prepare(model, refs, weights, tau)
    if check_refs:
        refs.check(model)
    L = model.L
    K = weights.capacity(L)
    cap = K // 2 if prune else K
    tau_eff = tau if prune else -math.inf
    scores = np.full((2 * L + 1, K + 1), np.nan)
    back = np.zeros((2 * L + 1, K + 1), dtype=np.int8)
    scores[0, 0] = 1.0
    back[0, 0] = EXECUTE
    stats = DPStats(populated_cells=1)
    cells = {(0, 0): refs[0]} if keep_states else None

    live = [refs[0][None]]
    stats.peak_live_rows = 1
    prev_idx = np.array([0])
    stats.peak_live_cells = 1
    slot = np.full(K + 1, -1)
    for i in range(1, 2 * L + 1):
        prev = live[-1]
        w = weights.of(i)
        target = refs[i]
        h_exec = model.sublayer_batch(i, prev, refs.context)
        stats.layer_calls += len(prev_idx)
        exec_score = np.full(K + 1, np.nan)
        skip_score = np.full(K + 1, np.nan)
        exec_score[prev_idx] = kernels.cos_rows_batch(h_exec, target, impl)
        skip_score[prev_idx] = kernels.cos_rows_batch(prev, target, impl)
        considered = np.zeros(K + 1, dtype=bool)
        considered[prev_idx] = True
        considered[prev_idx[prev_idx + w <= K] + w] = True
        stats.cell_updates += int(considered.sum())

        choice, score = kernels.relax_row(exec_score, skip_score, w, tau_eff, cap, impl)
        choice[0], score[0] = EXECUTE, 1.0  # execute-all path seeded with X^(i)
        idx = np.flatnonzero(choice)

        slot[:] = -1
        slot[prev_idx] = np.arange(len(prev_idx))
        src = np.where(choice[idx] == EXECUTE, slot[idx], slot[np.maximum(idx - w, 0)])
        if np.any(src < 0):
            raise ConsistencyError(f"row {i}: populated cell without a populated source")
        cur = np.where((choice[idx] == EXECUTE)[:, None, None], h_exec[src], prev[src])
        cur[0] = target
        live.append(cur)
        stats.peak_live_rows = max(stats.peak_live_rows, len(live))
        stats.peak_live_cells = max(stats.peak_live_cells, len(prev_idx) + len(idx))
        live.pop(0)

        scores[i], back[i] = score, choice
        stats.populated_cells += len(idx)
        if keep_states:
            cells.update({(i, int(j)): cur[k] for k, j in enumerate(idx)})
        prev_idx = idx

    terminal = {int(j): live[-1][k] for k, j in enumerate(prev_idx)}
    return DPTable(weights, L, tau, prune, scores, back, terminal, stats, cells)


def dp_forward_reference(model: ToyModel, refs: ReferenceStates, weights: WeightPair,
                         tau: float = 0.5, prune: bool = True) -> DPTable:
    """Cell-by-cell evaluation of the same recurrence, keeping every state.

    Written as a plain double loop for use as an oracle against
    :func:`dp_forward`; it shares only the sub-layer and cosine primitives.
    """
    _prepare(model, refs, weights, tau)
    L = model.L
    K = weights.capacity(L)
    cap = K // 2 if prune else K
    g: dict[tuple[int, int], np.ndarray] = {(0, 0): refs[0]}
    sc: dict[tuple[int, int], float] = {(0, 0): 1.0}
    bk: dict[tuple[int, int], int] = {(0, 0): EXECUTE}
    updates = 0
    for i in range(1, 2 * L + 1):
        w = weights.of(i)
        for j in range(K + 1):
            cand = []
            if (i - 1, j) in g:
                h_e = model.sublayer_batch(i, g[i - 1, j][None], refs.context)[0]
                cand.append((EXECUTE, h_e, cos_rows(h_e, refs[i])))
            if j >= w and (i - 1, j - w) in g:
                h_s = g[i - 1, j - w]
                cand.append((SKIP, h_s, cos_rows(h_s, refs[i])))
            if cand:
                updates += 1
            if j == 0:
                g[i, 0], sc[i, 0], bk[i, 0] = refs[i], 1.0, EXECUTE
                continue
            if not cand:
                continue
            if len(cand) == 2:
                best = cand[0] if cand[0][2] >= cand[1][2] else cand[1]
            else:
                best = cand[0]
            if prune and (best[2] < tau or j > cap):
                continue
            bk[i, j], g[i, j], sc[i, j] = best
    scores = np.full((2 * L + 1, K + 1), np.nan)
    back = np.zeros((2 * L + 1, K + 1), dtype=np.int8)
    for (i, j), s in sc.items():
        scores[i, j] = s
        back[i, j] = bk[i, j]
    terminal = {j: g[2 * L, j] for (i, j) in g if i == 2 * L}
    stats = DPStats(cell_updates=updates, populated_cells=len(g), peak_live_rows=2 * L + 1)
    return DPTable(weights, L, tau, prune, scores, back, dict(sorted(terminal.items())), stats, dict(g))


def backtrack(table: DPTable, j: int) -> LayerSet:
    """Recover the executed sub-layers behind terminal cell ``(2L, j)``."""
    L = table.L
    if not 0 <= j <= table.K or table.back[2 * L, j] == EMPTY:
        raise TableLookupError(f"terminal cell (2L, {j}) is empty")
    members = []
    jj = j
    for i in range(2 * L, 0, -1):
        step = table.back[i, jj]
        if step == EXECUTE:
            members.append(i)
        elif step == SKIP:
            jj -= table.weights.of(i)
        else:
            raise ConsistencyError(f"broken backpointer chain at ({i}, {jj})")
    if jj != 0:
        raise ConsistencyError(f"backtrack from budget {j} ended at {jj}")
    return LayerSet(tuple(reversed(members)), L)


def estimate_acceptance(model: ToyModel, h_final, x_target) -> float:
    """Fraction of history rows whose draft and target greedy tokens agree."""
    h = np.asarray(h_final, dtype=F32)
    x = np.asarray(x_target, dtype=F32)
    if h.shape != x.shape or h.ndim != 2:
        raise ContractError(f"shape mismatch {h.shape} vs {x.shape}")
    if h.shape[0] == 0:
        raise ContractError("no history rows to estimate acceptance from")
    draft = kernels.argmax_rows(model.logits(h))
    target = kernels.argmax_rows(model.logits(x))
    return float(np.count_nonzero(draft == target)) / h.shape[0]


def expected_tokens(alpha: float, gamma: int) -> float:
    """Expected tokens per speculation step for a truncated-geometric acceptance."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
    if gamma < 0:
        raise ContractError(f"gamma must be >= 0, got {gamma}")
    if alpha == 1.0:
        return float(gamma + 1)
    return (1.0 - alpha ** (gamma + 1)) / (1.0 - alpha)


def compute_tpt(alpha: float, gamma: int, t_draft: float, t_target: float) -> float:
    """Expected tokens per step over the step latency (tokens per ms)."""
    if gamma < 1:
        raise ContractError(f"gamma must be >= 1, got {gamma}")
    if t_draft < 0 or not t_target > 0:
        raise ContractError("latencies must satisfy t_draft >= 0 and t_target > 0")
    return expected_tokens(alpha, gamma) / (gamma * t_draft + t_target)


@dataclass(frozen=True)
class Candidate:
    budget: int
    S: LayerSet
    alpha_hat: float
    score: float = float("nan")


@dataclass(frozen=True)
class DraftConfig:
    S: LayerSet
    gamma: int
    alpha_hat: float
    tpt_score: float
    n: float = 0.0
    t_draft: float = 0.0
    t_target: float = 0.0
    budget: int = -1

    def recompute_tpt(self) -> float:
        return compute_tpt(self.alpha_hat, self.gamma, self.t_draft, self.t_target)


def candidate_set(model: ToyModel, table: DPTable, refs: ReferenceStates) -> dict[int, Candidate]:
    """Backtrack every populated terminal cell and estimate its acceptance."""
    out = {}
    final = refs[2 * model.L]
    for j in table.terminal_budgets():
        S = backtrack(table, j)
        alpha = estimate_acceptance(model, table.state(j), final)
        out[j] = Candidate(j, S, alpha, float(table.scores[2 * model.L, j]))
    return out


def _better(a: tuple[float, float, int], b: tuple[float, float, int] | None) -> bool:
    """Order on (tpt, t_draft, gamma): higher TPT, then cheaper draft, then shorter."""
    if b is None:
        return True
    if abs(a[0] - b[0]) > TPT_TIE_RTOL * max(abs(a[0]), abs(b[0])):
        return a[0] > b[0]
    if a[1] != b[1]:
        return a[1] < b[1]
    return a[2] < b[2]


def select_from_candidates(candidates, profile: LatencyProfile, n: float, L: int, D: int) -> DraftConfig:
    """Grid search over candidates x [1, D] maximising TPT at context ``n``."""
    if D < 1:
        raise ContractError(f"D must be >= 1, got {D}")
    best = None
    best_key = None
    for cand in candidates:
        t_draft, t_target = eval_latency(profile, cand.S, n, L)
        for gamma in range(1, D + 1):
            tpt = compute_tpt(cand.alpha_hat, gamma, t_draft, t_target)
            key = (tpt, t_draft, gamma)
            if _better(key, best_key):
                best_key = key
                best = DraftConfig(cand.S, gamma, cand.alpha_hat, tpt, n, t_draft, t_target, cand.budget)
    if best is None:
        raise SelectionError("no populated terminal cells to select from")
    return best


def select_config(model: ToyModel, table: DPTable, refs: ReferenceStates, profile: LatencyProfile,
                  n: float, D: int = 10) -> DraftConfig:
    cands = candidate_set(model, table, refs)
    return select_from_candidates(cands.values(), profile, n, model.L, D)


BRUTE_FORCE_MAX_SUBLAYERS = 12


def _subset_finals(model: ToyModel, refs: ReferenceStates, masks: np.ndarray) -> np.ndarray:
    """Final states of ``f^(S)(X^(0))`` for every executed-set bitmask, batched."""
    H = np.repeat(refs[0][None], len(masks), axis=0)
    for i in range(1, 2 * model.L + 1):
        sel = np.flatnonzero(masks >> (i - 1) & 1)
        if sel.size:
            H[sel] = model.sublayer_batch(i, H[sel], refs.context)
    return H


def brute_force_all(model: ToyModel, refs: ReferenceStates, weights: WeightPair) -> dict[int, tuple[LayerSet, float]]:
    """Best executed set per exact skipped weight, by exhaustive enumeration.

    Ties keep the set with the smallest executed-set bitmask.
    """
    L = model.L
    if 2 * L > BRUTE_FORCE_MAX_SUBLAYERS:
        raise RefusalError(f"2L={2 * L} exceeds the enumeration bound {BRUTE_FORCE_MAX_SUBLAYERS}")
    masks = np.arange(1 << (2 * L), dtype=np.int64)
    finals = _subset_finals(model, refs, masks)
    scores = kernels.cos_rows_batch(finals, refs[2 * L])
    best: dict[int, tuple[LayerSet, float]] = {}
    for mask, s in zip(masks.tolist(), scores.tolist()):
        S = LayerSet.from_mask(mask, L)
        j = S.skipped_weight(weights.w_attn, weights.w_mlp)
        if j not in best or s > best[j][1]:
            best[j] = (S, s)
    return dict(sorted(best.items()))


def brute_force_select(model: ToyModel, refs: ReferenceStates, weights: WeightPair, budget: int) -> LayerSet:
    """Executed set with skipped weight exactly ``budget`` maximising final cosine."""
    table = brute_force_all(model, refs, weights)
    if budget not in table:
        raise SelectionError(f"no layer set has skipped weight {budget}")
    return table[budget][0]


def subnet_final(model: ToyModel, refs: ReferenceStates, S: LayerSet) -> np.ndarray:
    """Replay ``f^(S)`` on ``X^(0)`` against the reference context."""
    return _subset_finals(model, refs, np.array([S.mask]))[0]
