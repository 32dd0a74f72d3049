import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import knapspec.theory as theory
from helpers import small_model
from knapspec.errors import ContractError, HypothesisError, StatError
from knapspec.model import ModelConfig, ToyModel, init_weights
from knapspec.optimizer import ReferenceStates, estimate_acceptance
from knapspec.theory import check_lemma, correlation_stats, del_select, lemma_trials, margin_and_bound, rotate_within, tpl


class TestMargin:
    def test_orthonormal(self):
        W = np.eye(4)
        rep = margin_and_bound(W, W[0])
        assert rep.i_star == 0
        assert rep.xi == 1.0
        assert rep.max_pair_dist == math.sqrt(2)
        assert rep.cos_threshold == 0.75

    def test_duplicate_top_rows(self):
        W = np.array([[1.0, 2.0], [1.0, 2.0], [0.0, -1.0]])
        rep = margin_and_bound(W, np.array([1.0, 1.0]))
        assert rep.xi == 0.0 and rep.cos_threshold == 1.0
        assert rep.i_star == 0

    def test_pair_scan_oracle(self, rng):
        W = rng.standard_normal((5, 4))
        x = rng.standard_normal(4)
        rep = margin_and_bound(W, x)
        scores = [sum(W[j, k] * x[k] for k in range(4)) for j in range(5)]
        top = max(range(5), key=lambda j: (scores[j], -j))
        xi = min(scores[top] - scores[j] for j in range(5) if j != top)
        dist = max(math.dist(W[top], W[j]) for j in range(5) if j != top)
        assert rep.i_star == top
        assert rep.xi == pytest.approx(xi, abs=1e-6)
        assert rep.max_pair_dist == pytest.approx(dist, abs=1e-6)
        assert rep.cos_threshold == pytest.approx(1 - xi ** 2 / (2 * float(x @ x) * dist ** 2), abs=1e-6)
        assert rep.dist_threshold == pytest.approx(xi / dist, abs=1e-6)

    def test_bad_inputs(self):
        with pytest.raises(ContractError):
            margin_and_bound(np.ones((1, 3)), np.ones(3))
        with pytest.raises(ContractError):
            margin_and_bound(np.eye(3), np.zeros(3))

    @given(seed=st.integers(0, 2**31), c=st.floats(0.01, 100.0))
    def test_scale_behaviour(self, seed, c):
        g = np.random.default_rng(seed)
        W, x = g.standard_normal((6, 3)), g.standard_normal(3)
        a, b = margin_and_bound(W, x), margin_and_bound(W, c * x)
        assert a.i_star == b.i_star
        assert b.cos_threshold == pytest.approx(a.cos_threshold, rel=1e-9, abs=1e-12)
        assert b.xi == pytest.approx(c * a.xi, rel=1e-9)
        assert b.dist_threshold == pytest.approx(c * a.dist_threshold, rel=1e-9)

    @given(seed=st.integers(0, 2**31), V=st.integers(2, 8), d=st.integers(1, 6))
    def test_invariants(self, seed, V, d):
        g = np.random.default_rng(seed)
        rep = margin_and_bound(g.standard_normal((V, d)), g.standard_normal(d))
        assert rep.xi >= 0 and rep.cos_threshold <= 1
        if rep.xi > 0:
            assert rep.dist_threshold > 0


class TestLemma:
    def test_identical(self, rng):
        W, x = rng.standard_normal((5, 4)), rng.standard_normal(4)
        v = check_lemma(W, x, x)
        assert v.condition_holds and v.argmax_equal and v.consistent

    def test_past_the_bound(self):
        W = np.eye(2)
        x = np.array([1.0, 0.2])
        xp = np.array([0.2, 1.0])
        v = check_lemma(W, x, xp)
        assert not v.condition_holds and not v.argmax_equal
        assert v.consistent  # the lemma is silent here

    def test_norm_mismatch(self):
        with pytest.raises(HypothesisError):
            check_lemma(np.eye(2), [1.0, 0.0], [2.0, 0.0])

    def test_rotation_keeps_norm_and_angle(self, rng):
        x = rng.standard_normal(7)
        y = rotate_within(x, 0.3, rng)
        assert np.linalg.norm(y) == pytest.approx(np.linalg.norm(x))
        assert x @ y / (x @ x) >= math.cos(0.3) - 1e-12

    @given(seed=st.integers(0, 2**31), V=st.integers(2, 12), d=st.integers(2, 8))
    def test_soundness(self, seed, V, d):
        assert all(v.condition_holds and v.argmax_equal for v in lemma_trials(V, d, 20, seed))


class TestTPL:
    def test_examples(self):
        assert tpl(3, 2, 0.0, 8) == pytest.approx(1 / (2 * 3 + 8))
        assert tpl(8, 1, 1.0, 8) == pytest.approx(1 / 8)
        assert tpl(8, 4, 0.8, 32) == pytest.approx(3.3616 / 64)
        assert round(tpl(8, 4, 0.8, 32), 6) == 0.052525

    def test_bad_exit(self):
        with pytest.raises(ContractError):
            tpl(0, 1, 0.5, 4)


class TestDelSelect:
    def test_identity_model_picks_first_block(self):
        c = ModelConfig(L=3, d=8, n_heads=2, d_ff=8, V=16)
        m = ToyModel(c, init_weights(c, 0, branch_scale=[0.0] * 6))
        refs = ReferenceStates.from_forward(m, [1, 2, 3, 4], 4)
        ell, gamma, alpha = del_select(m, refs, 10)
        assert (ell, alpha) == (1, 1.0)
        assert gamma == 10

    def test_only_full_prefix_agrees(self):
        # Strong residual branches make block 2 rewrite the state; seed 7 is one
        # where the one-block exit disagrees with the target on every row.
        m = small_model(L=2, d=16, seed=7, resid_gain=8.0)
        refs = ReferenceStates.from_forward(m, [1, 2, 3, 4, 5, 6, 7, 8], 6)
        assert estimate_acceptance(m, refs[2], refs[4]) == 0.0
        assert del_select(m, refs, 10)[0] == 2

    def test_equal_alpha_picks_shallowest(self, monkeypatch):
        m = small_model(L=3)
        refs = ReferenceStates.from_forward(m, [1, 2, 3, 4], 3)
        monkeypatch.setattr(theory, "estimate_acceptance", lambda *a: 0.6)
        assert del_select(m, refs, 5)[0] == 1


class TestCorrelation:
    def test_exact_lines(self):
        xs = [1.0, 2.0, 4.0, 7.0]
        assert correlation_stats(xs, [2 * x + 3 for x in xs]) == pytest.approx((1.0, 1.0))
        assert correlation_stats(xs, [-x for x in xs])[0] == pytest.approx(-1.0)

    def test_textbook_formula(self):
        xs = [0.3, 1.1, 2.0, 2.2, 3.7, 4.1, 5.0, 6.3, 7.7, 8.8]
        ys = [1.0, 0.7, 2.4, 2.0, 3.3, 5.1, 4.4, 6.0, 8.2, 7.9]
        n = len(xs)
        sx, sy = sum(xs), sum(ys)
        sxy = sum(a * b for a, b in zip(xs, ys))
        sxx, syy = sum(a * a for a in xs), sum(b * b for b in ys)
        r = (n * sxy - sx * sy) / math.sqrt((n * sxx - sx ** 2) * (n * syy - sy ** 2))
        got_r, got_r2 = correlation_stats(xs, ys)
        assert got_r == pytest.approx(r, abs=1e-9)
        assert got_r2 == pytest.approx(r * r, abs=1e-9)

    def test_degenerate(self):
        with pytest.raises(StatError):
            correlation_stats([1, 1, 1], [1, 2, 3])
        with pytest.raises(StatError):
            correlation_stats([1, 2], [1, 2])
        with pytest.raises(StatError):
            correlation_stats([1, 2, 3], [1, 2])


def test_tpt_is_multiple_of_tpl():
    # Equal unit weights and latencies: compute_tpt(a, g, |S|D, 2L D) = tpl(|S|, ...) / D.
    from knapspec.optimizer import compute_tpt
    L, delta = 4, 0.37
    for size, g, a in itertools.product(range(1, 2 * L + 1), (1, 3, 8), (0.0, 0.4, 0.9, 1.0)):
        flat = theory.expected_tokens(a, g) / (g * size + 2 * L)
        assert compute_tpt(a, g, size * delta, 2 * L * delta) == pytest.approx(flat / delta, rel=1e-12)
