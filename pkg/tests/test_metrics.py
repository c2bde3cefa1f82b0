import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from landfm import metrics as mt


def random_series(rng):
    """Positive flow-like pairs with a sprinkling of NaNs in either series."""
    n = int(rng.integers(20, 400))
    o = rng.lognormal(0.0, 1.0, n)
    p = o * rng.lognormal(0.0, 0.4, n) + rng.normal(0.0, 0.2, n)
    p[rng.random(n) < 0.03] = np.nan
    o[rng.random(n) < 0.03] = np.nan
    return p, o


@pytest.fixture(scope="module")
def series():
    rng = np.random.default_rng(2024)
    return [random_series(rng) for _ in range(1000)]


def close(a, b):
    return math.isclose(a, b, rel_tol=1e-10, abs_tol=1e-10)


class TestOracleEquivalence:
    @pytest.mark.parametrize("name", ["rmse", "mae", "bias", "ubrmse", "corr", "nse", "kge", "rmse_fdc"])
    def test_scalar_metric(self, series, name):
        ours, ref = getattr(mt, name), getattr(oracles, name)
        bad = [k for k, (p, o) in enumerate(series)
               if not close(ours(p, o), ref(p.tolist(), o.tolist()))]
        assert not bad, f"{name} disagrees on series {bad[:5]}"

    def test_flow_biases(self, series):
        for p, o in series:
            got = mt.flow_biases(p, o)
            want = oracles.flow_biases(p.tolist(), o.tolist())
            assert all(close(a, b) for a, b in zip(got, want))

    def test_bias_decomposition(self, series):
        for p, o in series:
            assert abs(mt.ubrmse(p, o) ** 2 + mt.bias(p, o) ** 2 - mt.rmse(p, o) ** 2) < 1e-10

    def test_classification(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            n = int(rng.integers(10, 120))
            y = rng.integers(0, 2, n).astype(float)
            y[:2] = [0.0, 1.0]
            s = np.round(rng.random(n), 2)      # rounding creates ties
            s[2], s[3] = 1.0, 0.0               # at least one prediction per side
            y[2], y[3] = 1.0, 0.0
            got = mt.classification_metrics(s, y)
            want = oracles.confusion(s.tolist(), y.tolist())
            want["ROC_AUC"] = oracles.auc(s.tolist(), y.tolist())
            for k, v in want.items():
                assert close(got[k], v), k

    def test_median(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            vals = rng.normal(size=int(rng.integers(1, 12)))
            vals[rng.random(vals.size) < 0.2] = np.nan
            if not np.isfinite(vals).any():
                continue
            per_site = {f"s{i}": {"RMSE": v} for i, v in enumerate(vals)}
            assert close(mt.aggregate(per_site, ["RMSE"])["RMSE"], oracles.median(vals.tolist()))


class TestExamples:
    def test_rmse_mae(self):
        assert mt.rmse([0, 0], [3, 4]) == pytest.approx(math.sqrt(12.5), abs=1e-15)
        assert mt.mae([0, 0], [3, 4]) == 3.5

    def test_identity_is_zero(self):
        o = np.random.default_rng(0).random(50)
        assert mt.rmse(o, o) == 0.0
        assert mt.ubrmse(o, o) == 0.0

    def test_nan_drops_pair(self):
        p = np.array([1.0, 2.0, 3.0, 4.0])
        o = np.array([1.5, np.nan, 2.0, 6.0])
        assert mt.rmse(p, o) == mt.rmse(p[[0, 2, 3]], o[[0, 2, 3]])

    def test_no_valid_pairs(self):
        with pytest.warns(RuntimeWarning):
            assert math.isnan(mt.rmse([np.nan], [1.0]))
        with pytest.warns(RuntimeWarning):
            assert math.isnan(mt.ubrmse([1.0], [1.0]))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            mt.rmse([1, 2], [1, 2, 3])

    def test_constant_bias_removed(self):
        o = np.random.default_rng(1).random(40)
        assert mt.ubrmse(o + 7, o) < 1e-14

    @pytest.mark.parametrize("f,want", [(lambda p: 2 * p + 1, 1.0), (lambda p: -p, -1.0)])
    def test_corr_linear(self, f, want):
        p = np.random.default_rng(2).normal(size=30)
        assert mt.corr(p, f(p)) == pytest.approx(want, abs=1e-12)

    def test_corr_null(self):
        rng = np.random.default_rng(5)
        assert abs(mt.corr(rng.normal(size=10_000), rng.normal(size=10_000))) < 0.05

    def test_corr_constant(self):
        with pytest.warns(RuntimeWarning):
            assert math.isnan(mt.corr([1.0, 2.0, 3.0], [4.0, 4.0, 4.0]))

    def test_nse_anchors(self):
        o = np.random.default_rng(3).random(25)
        assert mt.nse(o, o) == 1.0
        assert abs(mt.nse(np.full_like(o, o.mean()), o)) < 1e-12
        assert mt.nse(o.mean() - 3 * (o - o.mean()), o) < 0
        with pytest.warns(RuntimeWarning):
            assert math.isnan(mt.nse(o, np.ones_like(o)))

    def test_kge(self):
        o = np.random.default_rng(4).random(30) + 0.5
        assert mt.kge(o, o) == pytest.approx(1.0, abs=1e-12)
        assert mt.kge(2 * o, o) == pytest.approx(1 - math.sqrt(2), abs=1e-12)
        with pytest.warns(RuntimeWarning):
            assert math.isnan(mt.kge([1.0, 2.0, 0.5, 3.0], [-1.0, 1.0, -2.0, 2.0]))

    def test_fdc(self):
        rng = np.random.default_rng(6)
        o = rng.random(365)
        assert mt.rmse_fdc(rng.permutation(o), o) == 0.0
        assert mt.rmse_fdc(o - 0.25, o) == pytest.approx(0.25, abs=1e-12)

    def test_flow_biases_anchors(self):
        o = np.random.default_rng(8).random(200) + 0.1
        assert mt.flow_biases(o, o) == (0.0, 0.0, 0.0)
        assert mt.flow_biases(1.1 * o, o)[2] == pytest.approx(10.0, abs=1e-10)

    def test_hand_built_regimes(self):
        # o = 1..100 shuffled: the low regime is the 30 smallest, the high regime the two largest
        rng = np.random.default_rng(9)
        o = rng.permutation(np.arange(1.0, 101.0))
        p = o.copy()
        p[o <= 30] += 1.0          # +30 over a low-regime sum of 465
        p[o >= 99] -= 2.0          # -4 over a high-regime sum of 199
        flv, fhv, pbias = mt.flow_biases(p, o)
        assert flv == pytest.approx(100 * 30 / 465, abs=1e-12)
        assert fhv == pytest.approx(100 * -4 / 199, abs=1e-12)
        assert pbias == pytest.approx(100 * 26 / 5050, abs=1e-12)

    def test_zero_regime_sum(self):
        o = np.r_[np.zeros(40), np.ones(60)]
        with pytest.warns(RuntimeWarning):
            flv, _, _ = mt.flow_biases(o + 1, o)
        assert math.isnan(flv)


class TestInvariances:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(-50, 50), st.floats(0.1, 20))
    def test_translation_and_scale(self, seed, c, a):
        rng = np.random.default_rng(seed)
        p, o = rng.normal(size=60), rng.normal(size=60)
        assert mt.ubrmse(p + c, o) == pytest.approx(mt.ubrmse(p, o), rel=1e-9, abs=1e-9)
        assert mt.corr(a * p + c, o) == pytest.approx(mt.corr(p, o), rel=1e-9, abs=1e-9)
        assert mt.rmse(a * p, a * o) == pytest.approx(a * mt.rmse(p, o), rel=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(0, 59))
    def test_inserted_nan_pair(self, seed, at):
        rng = np.random.default_rng(seed)
        p, o = rng.random(60) + 0.1, rng.random(60) + 0.1
        p2, o2 = np.insert(p, at, np.nan), np.insert(o, at, 5.0)
        assert mt.regression_metrics(p2, o2) == mt.regression_metrics(p, o)


class TestClassification:
    def test_perfect(self):
        y = np.array([0, 1, 1, 0, 1.0])
        assert all(v == 1.0 for v in mt.classification_metrics(y, y).values())

    def test_flipped_auc(self):
        y = np.array([0, 1, 1, 0, 1.0])
        assert mt.roc_auc(1 - y, y) == 0.0

    def test_random_null(self):
        rng = np.random.default_rng(11)
        y = np.repeat([0.0, 1.0], 5000)
        assert abs(mt.roc_auc(rng.random(10_000), y) - 0.5) < 0.02

    def test_single_class(self):
        with pytest.warns(RuntimeWarning):
            assert math.isnan(mt.roc_auc([0.2, 0.7], [1, 1]))

    @pytest.mark.parametrize("probs,labels", [([0.5, 1.2], [0, 1]), ([0.5, 0.4], [0, 2]), ([0.5], [0, 1])])
    def test_invalid(self, probs, labels):
        with pytest.raises(ValueError):
            mt.classification_metrics(probs, labels)


class TestAggregate:
    @pytest.mark.parametrize("vals,want", [([0.1, 0.2, 0.9], 0.2), ([np.nan, 1.0, 3.0], 2.0), ([0.7], 0.7)])
    def test_median(self, vals, want):
        per = {f"s{i}": {"NSE": v} for i, v in enumerate(vals)}
        assert mt.aggregate(per, ["NSE"])["NSE"] == pytest.approx(want, abs=1e-15)

    def test_empty(self):
        with pytest.raises(ValueError):
            mt.aggregate({})

    def test_evaluate_groups_by_site(self):
        rows = [("a", "d1", 1.0, 1.5), ("b", "d1", 2.0, 1.0), ("a", "d2", 3.0, 2.0), ("b", "d2", 0.0, 1.0)]
        rep = mt.evaluate(rows)
        assert list(rep.per_site) == ["a", "b"]
        assert rep.per_site["a"]["RMSE"] == mt.rmse([1.0, 3.0], [1.5, 2.0])
        assert rep.summary["RMSE"] == np.median([rep.per_site[s]["RMSE"] for s in "ab"])


class TestCsv:
    def test_predictions_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        rows = [(f"s{i % 3}", f"2001-01-{i + 1:02d}", rng.normal(), rng.normal()) for i in range(9)]
        mt.write_predictions(tmp_path / "p.csv", rows)
        assert mt.read_predictions(tmp_path / "p.csv") == rows

    def test_bad_header(self, tmp_path):
        (tmp_path / "p.csv").write_text("a,b,c,d\n")
        with pytest.raises(ValueError):
            mt.read_predictions(tmp_path / "p.csv")

    def test_non_numeric(self, tmp_path):
        (tmp_path / "p.csv").write_text("site_id,date,y_pred,y_obs\ns,d,x,1\n")
        with pytest.raises(ValueError, match=":2:"):
            mt.read_predictions(tmp_path / "p.csv")

    def test_reports_column_order(self, tmp_path):
        rep = mt.evaluate([("a", "d", 1.0, 2.0), ("a", "e", 2.0, 2.5), ("a", "f", 0.5, 0.4)])
        per, summ = mt.write_reports(rep, tmp_path)
        assert per.read_text().splitlines()[0] == ",".join(["site_id", *mt.REGRESSION_METRICS])
        assert summ.read_text().splitlines()[1].startswith("median,")

    def test_class_roundtrip(self, tmp_path):
        ids, p, y = ["g0", "g1", "g2"], np.array([0.1, 0.9, 0.5]), np.array([0.0, 1.0, 1.0])
        mt.write_class_predictions(tmp_path / "c.csv", ids, p, y)
        i2, p2, y2 = mt.read_class_predictions(tmp_path / "c.csv")
        assert i2 == ids and np.array_equal(p2, p) and np.array_equal(y2, y)
        out = mt.write_class_report(mt.classification_metrics(p, y), tmp_path)
        assert out.read_text().splitlines()[0] == "statistic," + ",".join(mt.CLASSIFICATION_METRICS)
