import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import small_model, zero_branch
from knapspec.errors import ContractError, FormatError, InputError
from knapspec.model import LayerSet, ModelConfig, ToyModel, greedy_token, init_weights
from knapspec.tensorio import load_tensors, load_weights, save_tensors, save_weights


class TestConfig:
    def test_rejects_bad_shapes(self):
        with pytest.raises(ContractError):
            ModelConfig(L=0, d=8, n_heads=2, d_ff=8, V=4)
        with pytest.raises(ContractError):
            ModelConfig(L=1, d=7, n_heads=2, d_ff=8, V=4)
        with pytest.raises(ContractError):
            ModelConfig(L=1, d=8, n_heads=2, d_ff=8, V=1)
        with pytest.raises(ContractError):
            ModelConfig(L=1, d=8, n_heads=2, d_ff=8, V=4, eps=0.0)

    def test_weights_validate_shapes_and_knobs(self):
        c = ModelConfig(L=2, d=8, n_heads=2, d_ff=8, V=6)
        w = init_weights(c, 0)
        assert w.head.shape == (6, 8)
        with pytest.raises(ContractError):
            w.replace(head=np.zeros((5, 8))).validate(c)
        with pytest.raises(ContractError):
            init_weights(c, 0, branch_scale=[1.0, 1.5, 1.0, 1.0])

    def test_weights_are_read_only(self, model):
        with pytest.raises(ValueError):
            model.weights.wq[0, 0, 0] = 1.0


class TestLayerSet:
    def test_kinds_and_counts(self):
        S = LayerSet.of([1, 2, 4, 5], 3)
        assert S.n_attn == 2 and S.n_mlp == 2
        assert S.attention_blocks == frozenset({0, 2})
        assert S.skipped() == (3, 6)
        assert S.skipped_weight(3, 1) == 1 * 3 + 1 * 1

    def test_rejects_bad_members(self):
        with pytest.raises(ContractError):
            LayerSet((2, 1), 2)
        with pytest.raises(ContractError):
            LayerSet((1, 1), 2)
        with pytest.raises(ContractError):
            LayerSet((0, 1), 2)
        with pytest.raises(ContractError):
            LayerSet((5,), 2)

    @given(st.integers(1, 6).flatmap(lambda L: st.tuples(st.just(L), st.integers(0, (1 << 2 * L) - 1))))
    def test_mask_round_trip(self, case):
        L, mask = case
        S = LayerSet.from_mask(mask, L)
        assert S.mask == mask
        assert S.n_attn + S.n_mlp == len(S)
        assert set(S.members) <= set(range(1, 2 * L + 1))
        assert len(S) + len(S.skipped()) == 2 * L


class TestEmbed:
    def test_empty_rejected(self, model):
        with pytest.raises(InputError):
            model.embed([])

    def test_out_of_vocab_rejected(self, model):
        with pytest.raises(InputError):
            model.embed([model.config.V])
        with pytest.raises(InputError):
            model.embed([-1])

    def test_zero_row(self, model):
        emb = np.array(model.weights.embed)
        emb[5] = 0.0
        m = ToyModel(model.config, model.weights.replace(embed=emb))
        assert np.all(m.embed([5]) == 0.0)

    def test_lookup_is_deterministic(self, model):
        x = model.embed([3, 3])
        assert np.array_equal(x[0], x[1])


class TestForwardLayer:
    def test_zeroed_output_projection_is_identity(self, model):
        x = model.embed([1, 2, 3])
        for i in (1, 2, 3, 4):
            m = zero_branch(model, i)
            assert np.array_equal(m.forward_layer(i, x), x)

    def test_scalar_oracle_single_token(self):
        c = ModelConfig(L=1, d=2, n_heads=1, d_ff=2, V=2, eps=1e-6)
        base = init_weights(c, 0)
        wv = np.array([[[0.5, -1.0], [2.0, 0.25]]])
        wo = np.array([[[1.0, 0.5], [-0.5, 1.5]]])
        gain = np.array([[1.5, 0.5]])
        m = ToyModel(c, base.replace(wv=wv, wo=wo, attn_gain=gain,
                                     branch_scale=np.array([0.75, 1.0])))
        x = [0.3, -1.2]
        # One position: softmax weight 1, so the branch is norm(x) @ Wv @ Wo.
        rms = math.sqrt((x[0] ** 2 + x[1] ** 2) / 2 + 1e-6)
        xn = [x[0] / rms * 1.5, x[1] / rms * 0.5]
        v = [xn[0] * 0.5 + xn[1] * 2.0, xn[0] * -1.0 + xn[1] * 0.25]
        o = [v[0] * 1.0 + v[1] * -0.5, v[0] * 0.5 + v[1] * 1.5]
        want = [x[0] + 0.75 * o[0], x[1] + 0.75 * o[1]]
        got = m.forward_layer(1, np.array([x], dtype=np.float32))
        np.testing.assert_allclose(got[0], want, rtol=1e-5, atol=1e-6)

    def test_mlp_leaves_cache_untouched(self, model):
        cache = model.new_cache()
        model.forward([1, 2, 3], cache)
        keys, length = cache.keys.copy(), cache.length
        model.forward_layer(2, model.embed([4]), cache)
        assert cache.length == length
        assert np.array_equal(cache.keys, keys)

    def test_shape_mismatch(self, model):
        with pytest.raises(ContractError):
            model.forward_layer(1, np.zeros((2, model.config.d + 1), np.float32))
        with pytest.raises(ContractError):
            model.forward_layer(0, model.embed([1]))


class TestForwardSubnet:
    def test_full_set_matches_layer_by_layer(self, model):
        toks = [4, 9, 1, 7]
        c1, c2 = model.new_cache(), model.new_cache()
        got = model.forward_subnet(LayerSet.full(model.L), model.embed(toks), c1)
        h = model.embed(toks)
        for i in range(1, 2 * model.L + 1):
            h = model.forward_layer(i, h, c2)
        assert np.array_equal(got, h)
        assert np.array_equal(got, model.forward(toks))

    def test_empty_set_is_identity(self, model):
        x = model.embed([1, 2])
        assert np.array_equal(model.forward_subnet(LayerSet.empty(model.L), x), x)

    def test_two_layer_composition(self, model):
        x = model.embed([5, 6, 7])
        got = model.forward_subnet(LayerSet.of([1, 2], model.L), x)
        assert np.array_equal(got, model.forward_layer(2, model.forward_layer(1, x)))

    def test_cache_must_own_attention_blocks(self, model):
        view = model.new_cache().view(LayerSet.of([1, 2], model.L))
        with pytest.raises(ContractError):
            model.forward_subnet(LayerSet.of([3], model.L), model.embed([1]), view)

    def test_chunked_equals_token_by_token(self):
        m = small_model(L=3, d=32, seed=4)
        toks = [3, 1, 4, 1, 5, 9, 2, 6]
        whole = m.forward(toks, m.new_cache())
        cache = m.new_cache()
        rows = [m.forward([t], cache)[0] for t in toks]
        assert np.array_equal(whole, np.stack(rows))

    def test_thread_determinism(self):
        m = small_model(L=2, d=32, seed=2)
        toks = list(range(10))
        ref = m.forward(toks, m.new_cache())
        with ThreadPoolExecutor(4) as pool:
            outs = list(pool.map(lambda _: m.forward(toks, m.new_cache()), range(8)))
        assert all(np.array_equal(o, ref) for o in outs)


class TestLogits:
    def test_zero_state_without_norm(self, model):
        s = model.logits(np.zeros(model.config.d, np.float32), normalize=False)
        assert np.all(s == 0.0)

    def test_identity_head(self):
        c = ModelConfig(L=1, d=4, n_heads=2, d_ff=4, V=4)
        m = ToyModel(c, init_weights(c, 0).replace(head=np.eye(4)))
        x = np.array([0.5, -2.0, 1.0, 3.0], np.float32)
        np.testing.assert_allclose(m.logits(x), m.final_norm(x), rtol=1e-6)

    def test_dot_product_oracle(self, rng):
        c = ModelConfig(L=1, d=3, n_heads=1, d_ff=4, V=4)
        m = ToyModel.random(c, 3)
        x = rng.standard_normal(3).astype(np.float32)
        xn = [float(v) for v in m.final_norm(x)]
        want = [sum(float(m.weights.head[j, k]) * xn[k] for k in range(3)) for j in range(4)]
        np.testing.assert_allclose(m.logits(x), want, atol=1e-6)


class TestGreedyToken:
    def test_examples(self):
        assert greedy_token([0.1, 0.9, 0.2]) == 1
        assert greedy_token([0.9, 0.9, 0.1]) == 0
        assert greedy_token([0.3, 0.3, 0.3]) == 0

    def test_empty(self):
        with pytest.raises(ContractError):
            greedy_token([])


class TestKVCache:
    def test_view_shares_storage_but_not_length(self, model):
        cache = model.new_cache()
        model.forward([1, 2], cache)
        view = cache.view(LayerSet.of([1, 2], model.L))
        model.forward_subnet(LayerSet.of([1, 2], model.L), model.embed([3]), view)
        assert view.length == 3 and cache.length == 2
        assert view.blocks == frozenset({0})

    def test_view_needs_parent_blocks(self, model):
        part = model.new_cache().view(LayerSet.of([1], model.L))
        with pytest.raises(ContractError):
            part.view(LayerSet.of([3], model.L))

    def test_rollback_bounds(self, model):
        cache = model.new_cache()
        model.forward([1, 2, 3], cache)
        cache.rollback(1)
        assert cache.length == 1
        with pytest.raises(ContractError):
            cache.rollback(2)


class TestWeightFile:
    def test_round_trip(self, tmp_path, model):
        path = tmp_path / "w.bin"
        save_weights(path, model)
        back = load_weights(path)
        assert back.config == model.config
        for name, arr in model.weights.as_dict().items():
            assert np.array_equal(getattr(back.weights, name), arr)

    def test_config_mismatch(self, tmp_path, model):
        path = tmp_path / "w.bin"
        save_weights(path, model)
        other = ModelConfig(L=model.L, d=model.config.d, n_heads=model.config.n_heads,
                            d_ff=model.config.d_ff, V=model.config.V + 1, max_seq=model.config.max_seq)
        with pytest.raises(ContractError):
            load_weights(path, other)

    def test_shape_mismatch_rejected(self, tmp_path, model):
        path = tmp_path / "w.bin"
        tensors = model.weights.as_dict()
        tensors["wq"] = tensors["wq"][:, :-1]
        c = model.config
        save_tensors(path, tensors, {"L": c.L, "d": c.d, "n_heads": c.n_heads, "d_ff": c.d_ff,
                                     "V": c.V, "max_seq": c.max_seq, "eps": repr(c.eps)})
        with pytest.raises(ContractError):
            load_weights(path)

    def test_truncated_file(self, tmp_path, model):
        path = tmp_path / "w.bin"
        save_weights(path, model)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(FormatError):
            load_weights(path)

    def test_not_a_tensor_file(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"hello\nworld\n")
        with pytest.raises(FormatError):
            load_tensors(path)

    @given(st.lists(st.integers(1, 4), min_size=0, max_size=3), st.integers(0, 2**32 - 1))
    def test_tensor_round_trip(self, tmp_path_factory, shape, seed):
        a = np.random.default_rng(seed).standard_normal(shape).astype(np.float32)
        path = tmp_path_factory.mktemp("t") / "a.bin"
        save_tensors(path, {"a": a}, {"k": "v 1"})
        t, meta = load_tensors(path)
        assert meta == {"k": "v 1"}
        assert t["a"].shape == a.shape and np.array_equal(t["a"], a)
