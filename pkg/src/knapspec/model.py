"""Toy decoder-only transformer whose sub-layers run (or skip) independently.

Sub-layers are addressed by flattened index ``i`` in ``[1, 2L]``: odd indices
are attention, even indices are the gated MLP of block ``(i + 1) // 2``.
Each sub-layer computes ``x + scale_i * F_i(RMSNorm(x))``; skipping it leaves
the residual stream untouched.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ContractError, InputError, NumericError

F32 = np.float32

# Set KNAPSPEC_DEBUG=1 to assert strictly positive row norms after every sub-layer.
DEBUG_CHECKS = os.environ.get("KNAPSPEC_DEBUG", "") not in ("", "0")


def is_attention(i: int) -> bool:
    return i % 2 == 1


def layer_kind(i: int) -> str:
    return "attn" if i % 2 == 1 else "mlp"


def block_of(i: int) -> int:
    """Zero-based transformer block that owns flattened sub-layer ``i``."""
    return (i - 1) // 2


@dataclass(frozen=True)
class ModelConfig:
    L: int
    d: int
    n_heads: int
    d_ff: int
    V: int
    max_seq: int = 512
    eps: float = 1e-6

    def __post_init__(self):
        if self.L < 1:
            raise ContractError(f"L must be >= 1, got {self.L}")
        if self.n_heads < 1 or self.d % self.n_heads:
            raise ContractError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.V < 2:
            raise ContractError(f"V must be >= 2, got {self.V}")
        if self.d_ff < 1 or self.max_seq < 1:
            raise ContractError("d_ff and max_seq must be positive")
        if not self.eps > 0:
            raise ContractError(f"eps must be > 0, got {self.eps}")

    @property
    def n_sublayers(self) -> int:
        return 2 * self.L

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads


@dataclass(frozen=True)
class LayerSet:
    """Strictly increasing subset of flattened sub-layer indices in ``[1, 2L]``."""

    members: tuple[int, ...]
    L: int

    def __post_init__(self):
        m = tuple(int(i) for i in self.members)
        object.__setattr__(self, "members", m)
        if any(b <= a for a, b in zip(m, m[1:])):
            raise ContractError(f"layer set must be strictly increasing: {m}")
        if m and (m[0] < 1 or m[-1] > 2 * self.L):
            raise ContractError(f"layer indices must lie in [1, {2 * self.L}]: {m}")

    @classmethod
    def of(cls, members: Iterable[int], L: int) -> "LayerSet":
        return cls(tuple(sorted(set(int(i) for i in members))), L)

    @classmethod
    def full(cls, L: int) -> "LayerSet":
        return cls(tuple(range(1, 2 * L + 1)), L)

    @classmethod
    def empty(cls, L: int) -> "LayerSet":
        return cls((), L)

    @classmethod
    def prefix(cls, ell: int, L: int) -> "LayerSet":
        """The early-exit draft made of the first ``ell`` whole blocks."""
        return cls(tuple(range(1, 2 * ell + 1)), L)

    @classmethod
    def from_mask(cls, mask: int, L: int) -> "LayerSet":
        return cls(tuple(i for i in range(1, 2 * L + 1) if mask >> (i - 1) & 1), L)

    @property
    def mask(self) -> int:
        out = 0
        for i in self.members:
            out |= 1 << (i - 1)
        return out

    @property
    def n_attn(self) -> int:
        return sum(1 for i in self.members if i % 2 == 1)

    @property
    def n_mlp(self) -> int:
        return len(self.members) - self.n_attn

    @property
    def attention_blocks(self) -> frozenset[int]:
        return frozenset(block_of(i) for i in self.members if i % 2 == 1)

    def skipped(self) -> tuple[int, ...]:
        present = set(self.members)
        return tuple(i for i in range(1, 2 * self.L + 1) if i not in present)

    def skipped_weight(self, w_attn: int, w_mlp: int) -> int:
        return (self.L - self.n_attn) * w_attn + (self.L - self.n_mlp) * w_mlp

    def __iter__(self) -> Iterator[int]:
        return iter(self.members)

    def __len__(self) -> int:
        return len(self.members)

    def __contains__(self, i) -> bool:
        return i in self.members

    def __str__(self) -> str:
        return "{" + ",".join(map(str, self.members)) + "}"


_MATRICES = {
    "embed": lambda c: (c.V, c.d),
    "wq": lambda c: (c.L, c.d, c.d),
    "wk": lambda c: (c.L, c.d, c.d),
    "wv": lambda c: (c.L, c.d, c.d),
    "wo": lambda c: (c.L, c.d, c.d),
    "attn_gain": lambda c: (c.L, c.d),
    "mlp_gain": lambda c: (c.L, c.d),
    "w_gate": lambda c: (c.L, c.d, c.d_ff),
    "w_up": lambda c: (c.L, c.d, c.d_ff),
    "w_down": lambda c: (c.L, c.d_ff, c.d),
    "final_gain": lambda c: (c.d,),
    "head": lambda c: (c.V, c.d),
    "branch_scale": lambda c: (2 * c.L,),
}


@dataclass(frozen=True)
class ModelWeights:
    embed: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    attn_gain: np.ndarray
    mlp_gain: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    final_gain: np.ndarray
    head: np.ndarray
    # Redundancy knob per flattened sub-layer, each in [0, 1].
    branch_scale: np.ndarray

    @staticmethod
    def names() -> tuple[str, ...]:
        return tuple(_MATRICES)

    @staticmethod
    def expected_shape(name: str, config: ModelConfig) -> tuple[int, ...]:
        return _MATRICES[name](config)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _MATRICES}

    def validate(self, config: ModelConfig) -> None:
        for name, shape_of in _MATRICES.items():
            arr = getattr(self, name)
            if arr.shape != shape_of(config):
                raise ContractError(f"{name}: shape {arr.shape} != expected {shape_of(config)}")
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"{name}: non-finite entries")
        s = self.branch_scale
        if np.any(s < 0) or np.any(s > 1):
            raise ContractError("branch_scale entries must lie in [0, 1]")

    def replace(self, **changes) -> "ModelWeights":
        d = self.as_dict()
        d.update(changes)
        return ModelWeights(**{k: _frozen(v) for k, v in d.items()})


def _frozen(a) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=F32)
    if a.flags.writeable:
        a = a.copy()
        a.setflags(write=False)
    return a


def init_weights(
    config: ModelConfig,
    seed: int = 0,
    *,
    head_gain: float = 1.0,
    branch_scale: Sequence[float] | None = None,
    resid_gain: float | None = None,
) -> ModelWeights:
    """Seeded Gaussian init scaled by 1/sqrt(fan_in); gains start at one.

    Output projections of both branches carry an extra 1/sqrt(2L) so the
    residual stream dominates, as in GPT-2 style pre-norm stacks.
    ``resid_gain`` overrides that factor.
    """
    rng = np.random.default_rng(seed)
    c = config
    resid = 1.0 / math.sqrt(2 * c.L) if resid_gain is None else float(resid_gain)

    def gauss(*shape, fan_in):
        return rng.standard_normal(shape) / math.sqrt(fan_in)

    scale = np.ones(2 * c.L) if branch_scale is None else np.asarray(branch_scale, dtype=float)
    w = ModelWeights(
        embed=_frozen(rng.standard_normal((c.V, c.d))),
        wq=_frozen(gauss(c.L, c.d, c.d, fan_in=c.d)),
        wk=_frozen(gauss(c.L, c.d, c.d, fan_in=c.d)),
        wv=_frozen(gauss(c.L, c.d, c.d, fan_in=c.d)),
        wo=_frozen(resid * gauss(c.L, c.d, c.d, fan_in=c.d)),
        attn_gain=_frozen(np.ones((c.L, c.d))),
        mlp_gain=_frozen(np.ones((c.L, c.d))),
        w_gate=_frozen(gauss(c.L, c.d, c.d_ff, fan_in=c.d)),
        w_up=_frozen(gauss(c.L, c.d, c.d_ff, fan_in=c.d)),
        w_down=_frozen(resid * gauss(c.L, c.d_ff, c.d, fan_in=c.d_ff)),
        final_gain=_frozen(np.ones(c.d)),
        head=_frozen(head_gain * gauss(c.V, c.d, fan_in=c.d)),
        branch_scale=_frozen(scale),
    )
    w.validate(c)
    return w


class KVCache:
    """Per-block key/value storage with one shared length counter.

    A view made with :meth:`view` shares storage with its parent but keeps its
    own length and exposes only the attention blocks of its owning set.  Draft
    views write their speculative tail past the parent's committed length;
    the target's verification pass overwrites those slots before reading them.
    """

    def __init__(self, config: ModelConfig, owner: LayerSet | None = None, capacity: int | None = None,
                 *, _keys=None, _values=None):
        self.config = config
        self.owner = owner if owner is not None else LayerSet.full(config.L)
        self.blocks = self.owner.attention_blocks
        self.capacity = capacity if capacity is not None else config.max_seq
        shape = (config.L, self.capacity, config.d)
        self.keys = _keys if _keys is not None else np.zeros(shape, dtype=F32)
        self.values = _values if _values is not None else np.zeros(shape, dtype=F32)
        self.length = 0

    def view(self, owner: LayerSet) -> "KVCache":
        missing = owner.attention_blocks - self.blocks
        if missing:
            raise ContractError(f"parent cache lacks attention blocks {sorted(missing)}")
        v = KVCache(self.config, owner, self.capacity, _keys=self.keys, _values=self.values)
        v.length = self.length
        return v

    def covers(self, layer_set: LayerSet) -> bool:
        return layer_set.attention_blocks <= self.blocks

    def rollback(self, length: int) -> None:
        if not 0 <= length <= self.length:
            raise ContractError(f"cannot roll back to {length} from {self.length}")
        self.length = length

    def context(self, block: int, upto: int) -> tuple[np.ndarray, np.ndarray]:
        return self.keys[block, :upto], self.values[block, :upto]


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    ms = np.mean(np.square(x), axis=-1, keepdims=True)
    return (x / np.sqrt(ms + F32(eps))) * gain


def matmul_rows(A: np.ndarray, W: np.ndarray) -> np.ndarray:
    """``A @ W`` evaluated as one vector-matrix product per row.

    BLAS picks different kernels (and summation orders) for different row
    counts; forcing one product per row keeps every row's bits independent of
    batch size, which greedy-token equality across chunked and single-token
    passes relies on.
    """
    return (A[..., None, :] @ W)[..., 0, :]


def _silu(x):
    return x / (F32(1) + np.exp(-x))


def greedy_token(scores) -> int:
    """Smallest index attaining the maximum score."""
    s = np.asarray(scores)
    if s.ndim != 1 or s.size == 0:
        raise ContractError("greedy_token needs a non-empty score vector")
    return int(np.argmax(s))


def top1(scores) -> tuple[int, float]:
    """Greedy token and its softmax probability (computed in float64)."""
    s = np.asarray(scores, dtype=np.float64)
    tok = greedy_token(s)
    e = np.exp(s - s[tok])
    return tok, float(1.0 / e.sum())


class ToyModel:
    """Immutable weights plus the sub-layer forward functions.

    Safe to share across threads; all mutable state lives in :class:`KVCache`.
    """

    def __init__(self, config: ModelConfig, weights: ModelWeights):
        weights.validate(config)
        self.config = config
        self.weights = weights
        self._inv_sqrt_dh = F32(1.0 / math.sqrt(config.head_dim))
        self._head_t = np.ascontiguousarray(weights.head.T)

    @classmethod
    def random(cls, config: ModelConfig, seed: int = 0, **kwargs) -> "ToyModel":
        return cls(config, init_weights(config, seed, **kwargs))

    @property
    def L(self) -> int:
        return self.config.L

    def new_cache(self, capacity: int | None = None) -> KVCache:
        return KVCache(self.config, LayerSet.full(self.L), capacity)

    def embed(self, tokens: Sequence[int]) -> np.ndarray:
        ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
        if ids.size == 0:
            raise InputError("empty token sequence")
        if np.any(ids < 0) or np.any(ids >= self.config.V):
            raise InputError(f"token id out of vocabulary [0, {self.config.V})")
        return self.weights.embed[ids].copy()

    # -- sub-layer kernels (leading batch dims allowed) ----------------------

    def _attn_branch(self, b: int, x: np.ndarray, keys: np.ndarray, values: np.ndarray,
                     positions: np.ndarray) -> np.ndarray:
        c, w = self.config, self.weights
        xn = rms_norm(x, w.attn_gain[b], c.eps)
        *lead, r, _ = x.shape
        h, dh = c.n_heads, c.head_dim
        q = matmul_rows(xn, w.wq[b]).reshape(*lead, r, h, 1, dh)
        o = np.empty((*lead, r, h, 1, dh), dtype=F32)
        # Each row reduces over exactly its causal prefix, so results do not
        # depend on how many rows share the call.
        for k in range(r):
            T = int(positions[k]) + 1
            kt = keys[:T].reshape(T, h, dh).transpose(1, 2, 0)
            vt = values[:T].reshape(T, h, dh).transpose(1, 0, 2)
            s = (q[..., k, :, :, :] @ kt) * self._inv_sqrt_dh
            s = s - s.max(axis=-1, keepdims=True)
            p = np.exp(s)
            p = p / p.sum(axis=-1, keepdims=True)
            o[..., k, :, :, :] = p @ vt
        return matmul_rows(o.reshape(*lead, r, c.d), w.wo[b])

    def _mlp_branch(self, b: int, x: np.ndarray) -> np.ndarray:
        c, w = self.config, self.weights
        xn = rms_norm(x, w.mlp_gain[b], c.eps)
        return matmul_rows(_silu(matmul_rows(xn, w.w_gate[b])) * matmul_rows(xn, w.w_up[b]), w.w_down[b])

    def _kv(self, b: int, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        w = self.weights
        xn = rms_norm(x, w.attn_gain[b], self.config.eps)
        return matmul_rows(xn, w.wk[b]), matmul_rows(xn, w.wv[b])

    def _residual(self, i: int, x: np.ndarray, branch: np.ndarray) -> np.ndarray:
        out = x + self.weights.branch_scale[i - 1] * branch
        if not np.all(np.isfinite(out)):
            raise NumericError(f"non-finite output at sub-layer {i}")
        if DEBUG_CHECKS and np.any(np.linalg.norm(out, axis=-1) <= 0):
            raise NumericError(f"zero-norm hidden row after sub-layer {i}")
        return out

    def _check_index(self, i: int) -> None:
        if not 1 <= i <= 2 * self.L:
            raise ContractError(f"layer index {i} outside [1, {2 * self.L}]")

    def forward_layer(self, i: int, X: np.ndarray, cache: KVCache | None = None) -> np.ndarray:
        """Apply flattened sub-layer ``i`` to rows ``X``.

        Rows sit at positions ``cache.length, cache.length + 1, ...``.  An
        attention sub-layer writes its keys/values at those positions but does
        not advance ``cache.length``; the caller commits (see
        :meth:`forward_subnet`).  Without a cache the rows form their own
        causal context starting at position 0.
        """
        self._check_index(i)
        X = np.asarray(X, dtype=F32)
        if X.ndim != 2 or X.shape[1] != self.config.d:
            raise ContractError(f"expected (r, {self.config.d}) input, got {X.shape}")
        b = block_of(i)
        if i % 2 == 0:
            return self._residual(i, X, self._mlp_branch(b, X))
        r = X.shape[0]
        k, v = self._kv(b, X)
        if cache is None:
            keys, values, start = k, v, 0
        else:
            if b not in cache.blocks:
                raise ContractError(f"cache has no entries for attention block {b}")
            start = cache.length
            if start + r > cache.capacity:
                raise ContractError(f"cache capacity {cache.capacity} exceeded")
            cache.keys[b, start:start + r] = k
            cache.values[b, start:start + r] = v
            keys, values = cache.context(b, start + r)
        positions = start + np.arange(r)
        return self._residual(i, X, self._attn_branch(b, X, keys, values, positions))

    def forward_subnet(self, S: LayerSet, X: np.ndarray, cache: KVCache | None = None,
                       capture: bool = False):
        """Fold :meth:`forward_layer` over ``S`` in increasing order.

        With ``capture=True`` also returns the stacked per-index states
        ``(2L + 1, r, d)``; skipped indices repeat the previous state.
        """
        if S.L != self.L:
            raise ContractError(f"layer set built for L={S.L}, model has L={self.L}")
        if cache is not None and not cache.covers(S):
            raise ContractError("cache does not own the attention blocks of this layer set")
        h = np.asarray(X, dtype=F32)
        states = [h] if capture else None
        present = set(S.members)
        for i in range(1, 2 * self.L + 1):
            if i in present:
                h = self.forward_layer(i, h, cache)
            if capture:
                states.append(h)
        if cache is not None:
            cache.length += h.shape[0]
        if capture:
            return h, np.stack(states)
        return h

    def forward(self, tokens: Sequence[int], cache: KVCache | None = None, capture: bool = False):
        return self.forward_subnet(LayerSet.full(self.L), self.embed(tokens), cache, capture)

    def final_norm(self, x: np.ndarray) -> np.ndarray:
        return rms_norm(np.asarray(x, dtype=F32), self.weights.final_gain, self.config.eps)

    def logits(self, x: np.ndarray, normalize: bool = True) -> np.ndarray:
        """Scores ``<w_j, FinalNorm(x)>`` for one row or a stack of rows."""
        x = np.asarray(x, dtype=F32)
        if x.shape[-1] != self.config.d:
            raise ContractError(f"hidden width {x.shape[-1]} != {self.config.d}")
        h = self.final_norm(x) if normalize else x
        return matmul_rows(h, self._head_t)

    # -- batched evaluation against a fixed target context -------------------

    def sublayer_batch(self, i: int, H: np.ndarray, ctx: "TargetContext") -> np.ndarray:
        """Apply sub-layer ``i`` to a stack of candidate states ``(c, r, d)``.

        Attention queries come from the candidates; keys/values come from the
        target's committed cache, so the reference chain reproduces itself.
        Every candidate is an independent slice, so the result for one
        candidate does not depend on the others in the batch.
        """
        self._check_index(i)
        b = block_of(i)
        if i % 2 == 0:
            return self._residual(i, H, self._mlp_branch(b, H))
        keys, values = ctx.keys[b], ctx.values[b]
        return self._residual(i, H, self._attn_branch(b, H, keys, values, ctx.positions))


@dataclass(frozen=True)
class TargetContext:
    """Frozen copy of the target's per-block keys/values plus row positions."""

    keys: np.ndarray  # (L, T, d)
    values: np.ndarray  # (L, T, d)
    positions: np.ndarray  # (r,) absolute positions of the reference rows

    @classmethod
    def from_cache(cls, cache: KVCache, positions) -> "TargetContext":
        positions = np.asarray(positions, dtype=np.int64)
        T = int(positions.max()) + 1
        if T > cache.length:
            raise ContractError(f"row position {T - 1} beyond committed cache length {cache.length}")
        return cls(_frozen(cache.keys[:, :T]), _frozen(cache.values[:, :T]), positions)
