import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from landfm import autodiff as ad
from landfm import hybrid as hy
from landfm.data import DataError, SiteRecord
from landfm.model import MaskedAutoencoder, ModelConfig

MID = {n: 0.5 * (lo + hi) for n, (lo, hi) in hy.PARAM_RANGES.items()}


def state(**kw):
    vals = {k: 0.0 for k in hy.STORES}
    vals.update(kw)
    return hy.BucketState(*(ad.Tensor(np.array([[vals[k]]])) for k in hy.STORES))


def params(**kw):
    vals = dict(MID)
    vals.update(kw)
    return {n: ad.Tensor(np.array([[v]])) for n, v in vals.items()}


def random_params(rng, B, U=1):
    out = {}
    for n, (lo, hi) in hy.PARAM_RANGES.items():
        out[n] = ad.Tensor(rng.uniform(lo, hi, (B, 1, U)))
    return out


def random_forcings(rng, B, T):
    P = rng.gamma(0.6, 6.0, (B, T)) * (rng.random((B, T)) < 0.6)
    Ta = rng.normal(3.0, 8.0, (B, T))
    PET = rng.uniform(0.0, 6.0, (B, T))
    return np.stack([P, Ta, PET], axis=-1)


class TestParameterScaling:
    def test_limits(self):
        raw = ad.Tensor(np.array([[-np.inf] * hy.N_PARAMS, [np.inf] * hy.N_PARAMS]))
        scaled, _ = hy.scale_params(raw)
        lo = [r[0] for r in hy.PARAM_RANGES.values()]
        hi = [r[1] for r in hy.PARAM_RANGES.values()]
        np.testing.assert_allclose(scaled.data, [lo, hi], atol=0)

    def test_midpoints(self):
        scaled, _ = hy.scale_params(ad.Tensor(np.zeros(hy.N_PARAMS)))
        np.testing.assert_allclose(scaled.data, list(MID.values()), atol=1e-15)

    def test_sixteen_units(self):
        cfg = hy.HybridConfig(n_units=16, hidden=4, warmup=0)
        model = hy.HybridModel(cfg, 3, 2)
        raw = model.net(np.zeros((1, 5, 3)), np.zeros((1, 2)))
        assert raw.shape == (1, 5, 16, hy.N_PARAMS)
        p = hy.split_params(raw)
        assert p["beta"].shape == (1, 5, 16)
        assert p["fc"].shape == (1, 1, 16)

    def test_static_params_are_time_means(self):
        raw = ad.Tensor(np.random.default_rng(0).normal(size=(2, 6, 3, hy.N_PARAMS)))
        p = hy.split_params(raw, dynamic=())
        lo, hi = hy.PARAM_RANGES["k1"]
        sq = 1 / (1 + np.exp(-raw.data[..., 2]))
        np.testing.assert_allclose(p["k1"].data[:, 0], lo + (hi - lo) * sq.mean(axis=1), atol=1e-14)

    def test_unknown_dynamic(self):
        with pytest.raises(ValueError):
            hy.HybridConfig(dynamic_params=("nope",))


class TestBucket:
    def test_linear_reservoir_decay(self):
        S, k0 = 37.0, 0.23
        st_ = state(fast=S)
        p = params(k0=k0, perc=0.0, ddf=0.0)
        for n in range(40):
            st_, fl = hy.bucket_step(st_, p, 0.0, 5.0, 0.0)
            expect = S * k0 * (1 - k0) ** n
            assert abs(fl["runoff"].item() - expect) < 1e-9 * max(1.0, expect)

    def test_infinite_beta_infiltrates_everything(self):
        st_, fl = hy.bucket_step(state(), params(beta=1e3), 10.0, 15.0, 0.0)
        assert fl["runoff"].item() < 1e-12
        assert abs(st_.soil.item() - 10.0) < 1e-9

    def test_saturated_soil_sheds_excess(self):
        st_, fl = hy.bucket_step(state(soil=100.0), params(fc=100.0, k0=0.5), 20.0, 15.0, 0.0)
        assert abs(st_.soil.item() - 100.0) < 1e-9
        assert fl["runoff"].item() > 9.0

    def test_cold_precip_is_snow(self):
        st_, fl = hy.bucket_step(state(), params(), 10.0, -20.0, 0.0)
        assert st_.snow.item() > 9.99

    def test_et_limited_by_storage(self):
        st_, fl = hy.bucket_step(state(soil=1.0), params(beta_et=0.3, fc=50.0), 0.0, 15.0, 100.0)
        assert fl["et"].item() <= 1.0 + 1e-12
        assert st_.soil.item() >= 0.0

    def test_negative_forcing(self):
        with pytest.raises(ValueError):
            hy.bucket_step(state(), params(), -1.0, 0.0, 0.0)

    def test_balance_on_random_trajectories(self):
        rng = np.random.default_rng(0)
        B, T = 1000, 60
        f = random_forcings(rng, B, T)
        p = random_params(rng, B)
        out = hy.simulate(p, f, keep_states=True)
        totals = np.stack([s.total().data[:, 0] for s in out["states"]], axis=1)
        prev = np.concatenate([np.zeros((B, 1)), totals[:, :-1]], axis=1)
        resid = f[..., 0] - (totals - prev) - out["et"].data[..., 0] - out["runoff"].data[..., 0]
        assert np.abs(resid).max() < 1e-9
        cum = f[..., 0].sum(1) - totals[:, -1] - out["et"].data[..., 0].sum(1) - out["runoff"].data[..., 0].sum(1)
        assert np.abs(cum).max() < 1e-6
        for s in out["states"]:
            for v in s.arrays().values():
                assert v.min() >= 0.0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_balance_property(self, seed):
        rng = np.random.default_rng(seed)
        f = random_forcings(rng, 4, 20)
        out = hy.simulate(random_params(rng, 4, 2), f, keep_states=True)
        final = out["state"].total().data
        cum = f[..., 0].sum(1)[:, None] - final - out["et"].data.sum(1) - out["runoff"].data.sum(1)
        assert np.abs(cum).max() < 1e-9


class TestRouting:
    def test_kernel_normalised(self):
        k = hy.routing_kernel(ad.Tensor(np.random.default_rng(0).normal(size=15))).data
        assert np.all(k > 0) and abs(k.sum() - 1) < 1e-12

    def test_delta_kernel(self):
        q = np.random.default_rng(0).random((2, 30))
        kernel = np.zeros(15)
        kernel[0] = 1.0
        assert np.array_equal(hy.route(q, kernel).data, q)

    def test_matches_convolution(self):
        rng = np.random.default_rng(1)
        q = rng.random((3, 40))
        k = rng.random(15)
        k /= k.sum()
        expect = np.stack([np.convolve(r, k)[:40] for r in q])
        np.testing.assert_allclose(hy.route(q, k).data, expect, atol=1e-13)

    def test_mass_conserved_after_tail(self):
        q = np.zeros((1, 60))
        q[0, 3] = 5.0
        k = hy.routing_kernel(ad.Tensor(np.random.default_rng(2).normal(size=15)))
        assert abs(hy.route(q, k).data.sum() - 5.0) < 1e-12


class TestForward:
    def test_single_unit_matches_manual_loop(self):
        rng = np.random.default_rng(3)
        f = random_forcings(rng, 1, 25)
        p = random_params(rng, 1)
        cfg = hy.HybridConfig(n_units=1, warmup=0, routing=False)
        flow = hy.hybrid_forward(p, f, cfg)["flow"].data[0]
        s = hy.BucketState.zeros((1, 1))
        manual = []
        step_p = {n: v[:, 0] for n, v in p.items()}
        for t in range(25):
            s, fl = hy.bucket_step(s, step_p, f[:, t, 0:1], f[:, t, 1:2], f[:, t, 2:3])
            manual.append(fl["runoff"].item())
        assert np.array_equal(flow, np.array(manual))

    def test_identical_units_average_to_one(self):
        rng = np.random.default_rng(4)
        f = random_forcings(rng, 2, 20)
        p1 = random_params(rng, 2)
        p3 = {n: ad.Tensor(np.repeat(v.data, 3, axis=2)) for n, v in p1.items()}
        cfg = hy.HybridConfig(n_units=1, warmup=0, routing=False)
        np.testing.assert_allclose(hy.hybrid_forward(p3, f, cfg)["flow"].data,
                                   hy.hybrid_forward(p1, f, cfg)["flow"].data, atol=1e-13)

    def test_warmup_too_long(self):
        with pytest.raises(ValueError, match="warmup"):
            hy.hybrid_forward(random_params(np.random.default_rng(0), 1), np.zeros((1, 10, 3)),
                              hy.HybridConfig(warmup=10))

    def test_rmse_skips_nan(self):
        pred = ad.Tensor(np.array([[0.0, 1.0, 2.0, 3.0]]))
        obs = np.array([[9.0, 1.0, np.nan, 5.0]])
        assert abs(hy.rmse_loss(pred, obs, 1).item() - np.sqrt(2.0)) < 1e-9

    def test_physics_inputs(self):
        rng = np.random.default_rng(0)
        site = SiteRecord("a", "r", rng.random((5, 3)), np.zeros(1), np.arange(5).astype("datetime64[D]"))
        phys = hy.physics_inputs(site, ["prcp", "tmax", "pet"], temp="tmax")
        assert np.array_equal(phys, site.forcings)
        with pytest.raises(DataError, match="tmin"):
            hy.physics_inputs(site, ["prcp", "tmax", "pet"])


def micro_model(n_units=2, seed=0, warmup=5):
    cfg = hy.HybridConfig(n_units=n_units, hidden=3, warmup=warmup, routing_length=4, seed=seed)
    return hy.HybridModel(cfg, 2, 2), cfg


class TestGradients:
    def test_finite_differences_through_physics(self):
        model, cfg = micro_model()
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 30, 2))
        s = rng.normal(size=(2, 2))
        phys = random_forcings(rng, 2, 30)
        obs = rng.random((2, 30))

        def f():
            return hy.rmse_loss(model.forward(x, s, phys)["flow"], obs, cfg.warmup)

        ad.backward(f())
        worst = 0.0
        for name, t in model.params:
            worst = max(worst, ad.relative_error(t.grad, ad.numerical_grad(f, t)))
        assert worst < 1e-3

    def test_gradients_finite_on_dry_start(self):
        model, cfg = micro_model()
        phys = np.zeros((1, 12, 3))
        phys[:, :, 1] = 10.0
        out = model.forward(np.zeros((1, 12, 2)), np.zeros((1, 2)), phys)
        loss = hy.rmse_loss(out["flow"], np.ones((1, 12)), cfg.warmup)
        ad.backward(loss)
        for _, t in model.params:
            assert np.all(np.isfinite(t.grad))


def items(rng, n, T=20):
    out = []
    for i in range(n):
        phys = random_forcings(rng, 1, T)[0]
        out.append((rng.normal(size=(T, 2)), rng.normal(size=2), phys, rng.random(T), f"s{i}",
                    np.arange(T).astype("datetime64[D]")))
    return out


class TestTraining:
    def test_zero_learning_rate(self):
        rng = np.random.default_rng(0)
        train, test = items(rng, 4), items(rng, 2)
        cfg = hy.HybridConfig(n_units=2, hidden=3, warmup=5, routing_length=4, learning_rate=0.0,
                              epochs=2, batch_size=2, seed=7)
        res = hy.hybrid_train(train, test, cfg)
        fresh = hy.HybridModel(cfg, 2, 2)
        assert fresh.params.group_bytes(["net", "routing"]) == res.model.params.group_bytes(["net", "routing"])
        flow = fresh.forward(*(np.stack([b[k] for b in test]) for k in range(3)))["flow"].data
        for b, q in zip(test, flow):
            assert np.array_equal(res.predictions[b[4]][1], q[cfg.warmup:])

    def test_loss_decreases(self):
        rng = np.random.default_rng(1)
        train = items(rng, 6, T=40)
        cfg = hy.HybridConfig(n_units=2, hidden=4, warmup=5, routing_length=4, learning_rate=3e-2,
                              epochs=15, batch_size=6, seed=1)
        res = hy.hybrid_train(train, train[:1], cfg)
        assert res.log[-1]["loss"] < res.log[0]["loss"]

    def test_frozen_encoder_unchanged(self):
        rng = np.random.default_rng(2)
        enc = MaskedAutoencoder(ModelConfig(2, 2, seq_len=20, d_model=8, n_heads=2, e_layers=1, d_ff=8,
                                            embed_hidden=4), seed=0)
        cfg = hy.HybridConfig(n_units=2, hidden=3, warmup=5, routing_length=4, net="resconn", epochs=2,
                              batch_size=2)
        res = hy.hybrid_train(items(rng, 3), items(rng, 1), cfg, encoder=enc)
        assert res.encoder_bytes_before == res.encoder_bytes_after
        assert len(res.encoder_bytes_before) > 0

    def test_resconn_needs_encoder(self):
        cfg = hy.HybridConfig(n_units=1, hidden=3, warmup=5, net="resconn")
        with pytest.raises(ValueError):
            hy.hybrid_train(items(np.random.default_rng(0), 2), items(np.random.default_rng(1), 1), cfg)

    def test_empty_fold(self):
        with pytest.raises(DataError):
            hy.hybrid_train([], items(np.random.default_rng(0), 1), hy.HybridConfig(warmup=5))
