"""Margin lemma checks, the tokens-per-layer early-exit baseline, correlation stats."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, HypothesisError, StatError
from .model import ToyModel
from .optimizer import TPT_TIE_RTOL, ReferenceStates, estimate_acceptance, expected_tokens

NORM_RTOL = 1e-6


@dataclass(frozen=True)
class MarginReport:
    i_star: int
    xi: float
    max_pair_dist: float
    cos_threshold: float
    dist_threshold: float


def margin_and_bound(W, x) -> MarginReport:
    """Top-score margin of ``x`` under head rows ``W`` and the cosine it tolerates.

    A zero margin (tied argmax) gives ``cos_threshold = 1``.
    """
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] < 2:
        raise ContractError("need at least two head rows")
    if x.shape != (W.shape[1],):
        raise ContractError(f"x must have width {W.shape[1]}")
    xx = float(x @ x)
    if xx == 0.0:
        raise ContractError("x must be nonzero")
    scores = W @ x
    i_star = int(np.argmax(scores))
    others = np.delete(np.arange(W.shape[0]), i_star)
    xi = float(scores[i_star] - scores[others].max())
    dist = float(np.sqrt(((W[i_star] - W[others]) ** 2).sum(axis=1)).max())
    if xi <= 0.0 or dist == 0.0:
        return MarginReport(i_star, max(xi, 0.0), dist, 1.0, 0.0)
    cos_threshold = 1.0 - xi ** 2 / (2.0 * xx * dist ** 2)
    return MarginReport(i_star, xi, dist, cos_threshold, xi / dist)


@dataclass(frozen=True)
class LemmaVerdict:
    cosine: float
    cos_threshold: float
    condition_holds: bool
    argmax_equal: bool
    i_star: int
    i_prime: int

    @property
    def consistent(self) -> bool:
        """The lemma only promises condition => agreement."""
        return (not self.condition_holds) or self.argmax_equal


def check_lemma(W, x, x_prime) -> LemmaVerdict:
    x = np.asarray(x, dtype=np.float64)
    xp = np.asarray(x_prime, dtype=np.float64)
    nx, nxp = np.linalg.norm(x), np.linalg.norm(xp)
    if abs(nx - nxp) > NORM_RTOL * nx:
        raise HypothesisError(f"norms differ: |x|={nx:.9g}, |x'|={nxp:.9g}")
    rep = margin_and_bound(W, x)
    cosine = float(x @ xp / (nx * nxp))
    i_prime = int(np.argmax(np.asarray(W, dtype=np.float64) @ xp))
    return LemmaVerdict(cosine, rep.cos_threshold, cosine >= rep.cos_threshold,
                        i_prime == rep.i_star, rep.i_star, i_prime)


def rotate_within(x, max_angle: float, rng: np.random.Generator) -> np.ndarray:
    """Norm-preserving rotation of ``x`` by a random angle in ``[0, max_angle]``."""
    x = np.asarray(x, dtype=np.float64)
    u = rng.standard_normal(x.shape)
    u -= (u @ x) / (x @ x) * x
    u /= np.linalg.norm(u)
    theta = rng.uniform(0.0, max_angle)
    return np.cos(theta) * x + np.sin(theta) * np.linalg.norm(x) * u


def lemma_trials(V: int, d: int, trials: int, seed: int = 0) -> list[LemmaVerdict]:
    """Random heads and states; each ``x'`` is drawn inside the lemma's cone."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(trials):
        W = rng.standard_normal((V, d))
        x = rng.standard_normal(d)
        rep = margin_and_bound(W, x)
        angle = float(np.arccos(np.clip(rep.cos_threshold, -1.0, 1.0)))
        out.append(check_lemma(W, x, rotate_within(x, angle, rng)))
    return out


def tpl(ell: int, gamma: int, alpha: float, L: int) -> float:
    """Expected tokens per step over the number of layers loaded in that step."""
    if not 1 <= ell <= L:
        raise ContractError(f"exit layer {ell} outside [1, {L}]")
    return expected_tokens(alpha, gamma) / (gamma * ell + L)


def del_select(model: ToyModel, refs: ReferenceStates, D: int = 10) -> tuple[int, int, float]:
    """Early-exit baseline: best ``(exit block, draft length)`` by TPL.

    Returns ``(ell, gamma, alpha_ell)``.  Ties go to the shallower exit, then
    the shorter draft.
    """
    L = model.L
    final = refs[2 * L]
    best = None
    for ell in range(1, L + 1):
        # A prefix draft reproduces the target's own state at depth 2*ell.
        alpha = estimate_acceptance(model, refs[2 * ell], final)
        for gamma in range(1, D + 1):
            v = tpl(ell, gamma, alpha, L)
            if best is None or v > best[0] * (1 + TPT_TIE_RTOL):
                best = (v, ell, gamma, alpha)
    return best[1], best[2], best[3]


def correlation_stats(xs, ys) -> tuple[float, float]:
    """Sample Pearson r and the R^2 of the least-squares line."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 3:
        raise StatError("need two equal-length samples of at least 3 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise StatError("zero variance")
    r = float(dx @ dy) / np.sqrt(sxx * syy)
    r = float(np.clip(r, -1.0, 1.0))
    return r, r * r
