import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from landfm import autodiff as ad
from landfm.data import VariableGroupSpec
from landfm.embedding import (EmbeddingBank, PositionalTable, add_positions, assemble_sequence,
                              embed_dynamic, embed_static)
from landfm.masking import (MaskVectors, apply_mask, empty_plan, plan_from_groups, sample_groups,
                            sample_plan, sample_window)
from landfm.model import MaskedAutoencoder, ModelConfig
from landfm.synthetic import default_groups


def bank(n, hidden=4, d=8, seed=0):
    store = ad.ParamStore()
    return EmbeddingBank(store, "b", n, hidden, d, np.random.default_rng(seed)), store


@pytest.fixture
def groups():
    return VariableGroupSpec.with_singleton_forcings(
        [("Soil", ["clay", "sand"]), ("Topo", ["slope", "elev"]), ("Veg", ["ndvi"])], ["prcp", "temp"])


class TestDynamicEmbedding:
    def test_zero_weights_give_bias_sum(self):
        b, _ = bank(3)
        b.W1.data[:] = 0
        b.W2.data[:] = 0
        beta = np.arange(24.0).reshape(3, 8)
        b.b2.data[:] = beta
        _, z = embed_dynamic(np.random.default_rng(1).normal(size=(5, 3)), b)
        assert np.array_equal(z.data, np.tile(beta.sum(0), (5, 1)))

    def test_full_scale_shape(self):
        b, _ = bank(6, hidden=64, d=256)
        per, z = embed_dynamic(np.zeros((365, 6)), b)
        assert z.shape == (365, 256)
        assert per.shape == (365, 6, 256)

    def test_sum_of_independent_embeddings(self):
        b, _ = bank(4, seed=3)
        x = np.random.default_rng(2).normal(size=(2, 7, 4))
        _, z = embed_dynamic(x, b)
        total = np.zeros((2, 7, 8))
        for c in range(4):
            one, _ = bank(1)
            for name in ("W1", "b1", "W2", "b2"):
                getattr(one, name).data[:] = getattr(b, name).data[c:c + 1]
            total += embed_dynamic(x[..., c:c + 1], one)[1].data
        np.testing.assert_allclose(z.data, total, atol=1e-12, rtol=0)

    def test_wrong_width(self):
        b, _ = bank(3)
        with pytest.raises(ad.ShapeError):
            embed_dynamic(np.zeros((4, 2)), b)


class TestStaticEmbedding:
    def test_zero_weights_give_bias_sum(self):
        b, _ = bank(3)
        b.W1.data[:] = 0
        b.W2.data[:] = 0
        b.b2.data[:] = [[1.0] * 8, [2.0] * 8, [-0.5] * 8]
        _, tok = embed_static(np.array([3.0, -1.0, 9.0]), b)
        assert np.array_equal(tok.data, np.full(8, 2.5))

    def test_twenty_attributes(self):
        b, _ = bank(20, d=256)
        per, tok = embed_static(np.zeros(20), b)
        assert per.shape == (20, 256)
        assert tok.shape == (256,)

    def test_dead_attribute(self):
        b, _ = bank(5)
        b.W2.data[2] = 0
        s = np.random.default_rng(0).normal(size=5)
        s2 = s.copy()
        s2[2] += 100.0
        assert np.array_equal(embed_static(s, b)[1].data, embed_static(s2, b)[1].data)


class TestSequence:
    @pytest.mark.parametrize("T", [365, 1])
    def test_token_count(self, T):
        seq = assemble_sequence(np.zeros((T, 4)), np.ones(4))
        assert seq.length == T + 1

    def test_static_row_last(self):
        rng = np.random.default_rng(0)
        tok = rng.normal(size=4)
        seq = assemble_sequence(rng.normal(size=(6, 4)), tok)
        assert np.array_equal(seq.Z.data[0, 6], tok)

    def test_zero_positions(self):
        store = ad.ParamStore()
        table = PositionalTable(store, "p", 10, 4, np.random.default_rng(0))
        table.P.data[:] = 0
        seq = assemble_sequence(np.random.default_rng(1).normal(size=(5, 4)), np.ones(4))
        assert np.array_equal(add_positions(seq, table).Z.data, seq.Z.data)

    def test_zero_tokens_give_positions(self):
        store = ad.ParamStore()
        table = PositionalTable(store, "p", 10, 4, np.random.default_rng(0))
        out = add_positions(assemble_sequence(np.zeros((5, 4)), np.zeros(4)), table)
        assert np.array_equal(out.Z.data[0], table.P.data[:6])

    def test_add_twice(self):
        store = ad.ParamStore()
        table = PositionalTable(store, "p", 10, 4, np.random.default_rng(0))
        seq = add_positions(assemble_sequence(np.zeros((5, 4)), np.zeros(4)), table)
        with pytest.raises(ValueError):
            add_positions(seq, table)

    def test_too_long(self):
        store = ad.ParamStore()
        table = PositionalTable(store, "p", 4, 4, np.random.default_rng(0))
        with pytest.raises(ValueError):
            add_positions(assemble_sequence(np.zeros((5, 4)), np.zeros(4)), table)


class TestWindow:
    def test_degenerate(self):
        rng = np.random.default_rng(0)
        assert {sample_window(100, 7, 7, rng)[1] for _ in range(200)} == {7}

    def test_range_and_mean(self):
        rng = np.random.default_rng(0)
        draws = np.array([sample_window(365, 30, 90, rng) for _ in range(100_000)])
        lengths = draws[:, 1]
        assert lengths.min() >= 30 and lengths.max() <= 90
        assert abs(lengths.mean() - 60.0) < 0.5
        assert np.all(draws[:, 0] + lengths <= 365)

    @pytest.mark.parametrize("args", [(10, 0, 5), (10, 6, 5), (10, 5, 11)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            sample_window(*args, np.random.default_rng(0))


class TestGroupDraws:
    def test_all_masked(self):
        rng = np.random.default_rng(0)
        assert all(sum(sample_groups(5, 1.0, rng)) == 5 for _ in range(50))

    def test_zero_probability(self):
        with pytest.raises(ValueError):
            sample_groups(5, 0.0, np.random.default_rng(0))

    def test_conditioned_frequency(self):
        rng = np.random.default_rng(0)
        draws = np.array([sample_groups(5, 0.5, rng) for _ in range(100_000)])
        expect = 0.5 / (1 - 0.5 ** 5)
        assert np.all(np.abs(draws.mean(axis=0) - expect) < 0.01)
        assert draws.sum(axis=1).min() >= 1


class TestPlans:
    def test_all_or_nothing(self):
        g = default_groups()
        rng = np.random.default_rng(0)
        dyn_idx = {v: i for i, v in enumerate(g.dynamic_vars)}
        st_idx = {v: i for i, v in enumerate(g.static_vars)}
        for _ in range(10_000):
            p = sample_plan(g, 365, 30, 90, 0.5, rng)
            dm = set(p.masked_dynamic)
            sm = set(p.masked_static)
            for k, (name, members) in enumerate(g.groups):
                flags = [(dyn_idx[v] in dm) if g.is_dynamic(v) else (st_idx[v] in sm) for v in members]
                assert all(flags) or not any(flags), name
                assert all(flags) == (k in p.masked_groups)

    def test_plan_masks(self, groups):
        p = plan_from_groups(groups, ["Soil", "temp"], 2, 3)
        dm = p.dynamic_mask(8, 2)
        assert dm[:, 1].tolist() == [False, False, True, True, True, False, False, False]
        assert not dm[:, 0].any()
        assert p.static_mask(5).tolist() == [True, True, False, False, False]


class TestApplyMask:
    @pytest.fixture
    def parts(self, groups):
        rng = np.random.default_rng(0)
        store = ad.ParamStore()
        mv = MaskVectors(store, "m", 2, 5, 4, rng)
        return rng.normal(size=(1, 8, 2, 4)), rng.normal(size=(1, 5, 4)), mv

    def test_empty_plan(self, parts):
        dyn, sta, mv = parts
        z, tok = apply_mask(dyn, sta, [empty_plan()], mv)
        assert np.array_equal(z.data, dyn.sum(axis=2))
        assert np.array_equal(tok.data, sta.sum(axis=1))

    def test_full_substitution(self, parts, groups):
        dyn, sta, mv = parts
        plan = plan_from_groups(groups, groups.group_names, 0, 8)
        z, tok = apply_mask(dyn, sta, [plan], mv)
        np.testing.assert_allclose(z.data[0], np.tile(mv.dyn.data.sum(0), (8, 1)), atol=1e-15)
        np.testing.assert_allclose(tok.data[0], mv.static.data.sum(0), atol=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_masked_inputs_do_not_matter(self, seed):
        g = VariableGroupSpec.with_singleton_forcings([("A", ["a", "b"]), ("B", ["c"])], ["p", "q"])
        rng = np.random.default_rng(seed)
        b, _ = bank(2)
        store = ad.ParamStore()
        mv = MaskVectors(store, "m", 2, 3, 8, rng)
        x = rng.normal(size=(1, 12, 2))
        plan = sample_plan(g, 12, 2, 6, 0.5, rng)
        x2 = x.copy()
        dm = plan.dynamic_mask(12, 2)
        x2[0][dm] = rng.normal(size=dm.sum()) * 1e3
        sta = np.zeros((1, 3, 8))
        z1, _ = apply_mask(embed_dynamic(x, b)[0], sta, [plan], mv)
        z2, _ = apply_mask(embed_dynamic(x2, b)[0], sta, [plan], mv)
        assert np.array_equal(z1.data, z2.data)

    def test_window_outside(self, parts, groups):
        dyn, sta, mv = parts
        with pytest.raises(ValueError):
            apply_mask(dyn, sta, [plan_from_groups(groups, ["temp"], 6, 5)], mv)


class TestLossInvariance:
    def test_masked_raw_inputs_do_not_change_loss(self, groups):
        cfg = ModelConfig(2, 5, seq_len=16, d_model=8, n_heads=2, e_layers=1, d_ff=16, dropout=0.1,
                          embed_hidden=4)
        model = MaskedAutoencoder(cfg, seed=4)
        rng = np.random.default_rng(9)
        x = rng.normal(size=(3, 16, 2))
        s = rng.normal(size=(3, 5))
        plans = [sample_plan(groups, 16, 3, 8, 0.5, rng) for _ in range(3)]
        xp, sp = x.copy(), s.copy()
        for i, p in enumerate(plans):
            dm = p.dynamic_mask(16, 2)
            xp[i][dm] = rng.normal(size=dm.sum()) * 50
            sm = p.static_mask(5)
            sp[i][sm] = rng.normal(size=sm.sum()) * 50
        kw = dict(training=True)
        a = model.loss(x, s, plans, rng=np.random.default_rng(1), **kw).item()
        b = model.loss(xp, sp, plans, rng=np.random.default_rng(1), targets=(x, s), **kw).item()
        assert a == b
