"""Context-length-aware sub-layer latency model and integer knapsack weights."""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import FitError, FormatError, ProfileError
from .model import LayerSet

PROFILE_SECTION = "latency_profile"


@dataclass(frozen=True)
class LatencyProfile:
    """``t_attn(n) = attn_slope * n + attn_intercept``; ``t_mlp`` is flat in ``n``.

    ``mlp_table`` optionally overrides the flat MLP latency with measured
    ``(n, ms)`` points, linearly interpolated.
    """

    attn_slope: float
    attn_intercept: float
    mlp_const: float
    source: str = "analytic"
    residual_rms: float = 0.0
    mlp_table: tuple[tuple[float, float], ...] = ()
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if not self.attn_slope >= 0:
            raise ProfileError(f"attn_slope must be >= 0, got {self.attn_slope}")
        if not self.attn_intercept > 0:
            raise ProfileError(f"attn_intercept must be > 0, got {self.attn_intercept}")
        if not self.mlp_const > 0:
            raise ProfileError(f"mlp_const must be > 0, got {self.mlp_const}")
        if self.source not in ("analytic", "measured"):
            raise ProfileError(f"unknown profile source {self.source!r}")

    def t_attn(self, n: float) -> float:
        return self.attn_slope * n + self.attn_intercept

    def t_mlp(self, n: float | None = None) -> float:
        if self.mlp_table and n is not None:
            xs, ys = zip(*self.mlp_table)
            return float(np.interp(n, xs, ys))
        return self.mlp_const


@dataclass(frozen=True)
class WeightPair:
    w_attn: int
    w_mlp: int
    delta: float
    context_n: float

    def of(self, i: int) -> int:
        """Weight of flattened sub-layer ``i``."""
        return self.w_attn if i % 2 == 1 else self.w_mlp

    def capacity(self, L: int) -> int:
        return L * (self.w_attn + self.w_mlp)


def fit_profile(samples: Iterable[Sequence[float]]) -> LatencyProfile:
    """Least-squares line for attention latency, mean for MLP latency.

    ``samples`` holds ``(n, t_attn_ms, t_mlp_ms)`` triples.
    """
    arr = np.asarray(list(samples), dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 2 or arr.shape[1] != 3:
        raise FitError("need at least two (n, t_attn, t_mlp) samples")
    n, ta, tm = arr.T
    if np.unique(n).size < 2:
        raise FitError("need at least two distinct context lengths")
    slope, intercept = np.polyfit(n, ta, 1)
    resid = ta - (slope * n + intercept)
    warnings = []
    if slope < 0:
        # Noise can tilt a nearly flat measurement below zero.
        warnings.append(f"negative fitted attn slope {slope:.3g} clamped to 0")
        slope, intercept = 0.0, float(ta.mean())
    if intercept <= 0:
        raise FitError(f"fitted attention intercept {intercept:.3g} ms is not positive")
    return LatencyProfile(
        attn_slope=float(slope),
        attn_intercept=float(intercept),
        mlp_const=float(tm.mean()),
        source="measured",
        residual_rms=float(np.sqrt(np.mean(resid ** 2))),
        warnings=tuple(warnings),
    )


def eval_latency(profile: LatencyProfile, S: LayerSet, n: float, L: int) -> tuple[float, float]:
    """Draft time over ``S`` and full-model verification time at context ``n``."""
    ta, tm = profile.t_attn(n), profile.t_mlp(n)
    return S.n_attn * ta + S.n_mlp * tm, L * (ta + tm)


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def normalize_weights(profile: LatencyProfile, n: float) -> WeightPair:
    ta, tm = profile.t_attn(n), profile.t_mlp(n)
    if not (ta > 0 and tm > 0):
        raise ProfileError(f"latencies must be positive at n={n}: attn={ta}, mlp={tm}")
    delta = min(ta, tm)
    return WeightPair(round_half_away(ta / delta), round_half_away(tm / delta), delta, n)


def save_profile(path, profile: LatencyProfile) -> None:
    cp = configparser.ConfigParser()
    sec = {
        "attn_slope_ms_per_token": repr(profile.attn_slope),
        "attn_intercept_ms": repr(profile.attn_intercept),
        "mlp_const_ms": repr(profile.mlp_const),
        "source": profile.source,
        "residual_rms_ms": repr(profile.residual_rms),
    }
    if profile.mlp_table:
        sec["mlp_table_ms"] = " ".join(f"{n!r}:{t!r}" for n, t in profile.mlp_table)
    if profile.warnings:
        sec["warnings"] = " | ".join(profile.warnings)
    cp[PROFILE_SECTION] = sec
    with open(path, "w") as fh:
        cp.write(fh)


def load_profile(path) -> LatencyProfile:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FormatError(f"cannot read profile file {path}")
    if PROFILE_SECTION not in cp:
        raise FormatError(f"{path}: missing [{PROFILE_SECTION}] section")
    sec = cp[PROFILE_SECTION]
    known = {"attn_slope_ms_per_token", "attn_intercept_ms", "mlp_const_ms", "source",
             "residual_rms_ms", "mlp_table_ms", "warnings"}
    unknown = set(sec) - known
    if unknown:
        raise FormatError(f"{path}: unknown profile keys {sorted(unknown)}")
    try:
        table = ()
        if "mlp_table_ms" in sec:
            table = tuple(tuple(float(v) for v in item.split(":")) for item in sec["mlp_table_ms"].split())
        return LatencyProfile(
            attn_slope=float(sec["attn_slope_ms_per_token"]),
            attn_intercept=float(sec["attn_intercept_ms"]),
            mlp_const=float(sec["mlp_const_ms"]),
            source=sec.get("source", "measured"),
            residual_rms=float(sec.get("residual_rms_ms", "0")),
            mlp_table=table,
            warnings=tuple(w.strip() for w in sec.get("warnings", "").split("|") if w.strip()),
        )
    except KeyError as exc:
        raise FormatError(f"{path}: missing profile key {exc}") from None
