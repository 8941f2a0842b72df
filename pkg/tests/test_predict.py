import math
from datetime import datetime, timezone

import numpy as np
import pytest

from leobench.orbital import (
    EARTH_RADIUS_KM,
    MU_EARTH_KM3_S2,
    GroundSite,
    TleRecord,
    gmst_rad,
)
from leobench.predict import (
    Dataset,
    DegenerateDesign,
    EvalReport,
    FeatureVector,
    ZeroActual,
    assemble_features,
    dataset_from_trace,
    evaluate,
    feature_names,
    fit,
    load_model,
    predict,
    predict_batch,
    save_model,
)
from leobench.telemetry import InsufficientHistory, TelemetryWindow
from leobench.terminal_sim import TelemetrySample, TerminalModelConfig, TerminalSim
from leobench.triggers import OrbitalContext

T0 = 1_760_000_000_000
EPOCH = datetime(2026, 1, 10, tzinfo=timezone.utc)


def overhead_catalog():
    """Two satellites above an equatorial site at the epoch, one antipodal."""
    a = EARTH_RADIUS_KM + 550.0
    mm = math.sqrt(MU_EARTH_KM3_S2 / a ** 3) * 86400.0 / (2 * math.pi)
    raan = math.degrees(gmst_rad(EPOCH))  # ascending node over lon 0 now
    mk = lambda name, anomaly: TleRecord(name, 53.0, raan, 0.0, 0.0, anomaly, mm, EPOCH)
    return [mk("UP-A", 0.0), mk("UP-B", 3.0), mk("FAR", 180.0)]


def history_window(values, t0=T0):
    w = TelemetryWindow()
    for i, v in enumerate(values):
        w.push(TelemetrySample(t0 + i * 1000, v, 0.001, 1.0, 65.0, 0, 0, "ACTIVE"))
    return w


def test_feature_dimension_formula():
    for k in (1, 4, 8):
        assert len(feature_names(k)) == 3 + 3 * k + 2 + 5 + 1


def test_padding_and_ordering_with_two_visible():
    ctx = OrbitalContext(GroundSite(0.0, 0.0), overhead_catalog())
    w = history_window([30, 31, 32, 33, 34])
    now = int(EPOCH.timestamp() * 1000)
    fv = assemble_features(w, ctx, now, k=4)
    assert fv.dim == 3 + 12 + 2 + 5 + 1
    assert fv.sat_slot_valid == (True, True, False, False)
    names = fv.names
    el1 = fv.values[names.index("sat1_el")]
    el2 = fv.values[names.index("sat2_el")]
    assert el1 >= el2 > 25.0
    assert fv.values[names.index("sat3_az")] == -1.0
    assert fv.values[names.index("sat4_range_km")] == -1.0
    # h1 is the newest sample
    assert fv.values[names.index("h1")] == 34
    assert fv.values[names.index("h5")] == 30
    assert fv.values[names.index("second_of_day")] == (now // 1000) % 86400


def test_assembly_deterministic():
    ctx = OrbitalContext(GroundSite(0.0, 0.0), overhead_catalog())
    now = int(EPOCH.timestamp() * 1000)
    a = assemble_features(history_window([30, 31, 32, 33, 34]), ctx, now, k=4)
    b = assemble_features(history_window([30, 31, 32, 33, 34]), ctx, now, k=4)
    assert a == b


def test_assembly_needs_history():
    ctx = OrbitalContext(GroundSite(0.0, 0.0), overhead_catalog())
    with pytest.raises(InsufficientHistory):
        assemble_features(history_window([30, 31, 32]), ctx,
                          int(EPOCH.timestamp() * 1000))


# --- datasets ------------------------------------------------------------

def lag_dataset(series, extra=None, t0=T0):
    """Rows with h1..h5 drawn from `series`; target supplied by caller."""
    series = np.asarray(series, dtype=float)
    names = ["h1", "h2", "h3", "h4", "h5"] + (list(extra) if extra else [])
    ts, rows = [], []
    for t in range(5, len(series)):
        ts.append(t0 + t * 1000)
        rows.append([series[t - 1], series[t - 2], series[t - 3],
                     series[t - 4], series[t - 5]] + ([0.0] * (len(names) - 5)))
    return names, np.array(ts, dtype=np.int64), np.array(rows)


def test_dataset_csv_round_trip():
    rng = np.random.default_rng(0)
    series = rng.uniform(20, 60, size=40)
    names, ts, rows = lag_dataset(series)
    ds = Dataset(ts, series[5:], rows, tuple(names))
    back = Dataset.from_csv(ds.to_csv())
    assert back.feature_names == ds.feature_names
    assert np.array_equal(back.ts_ms, ds.ts_ms)
    assert back.targets == pytest.approx(ds.targets, rel=1e-9)
    assert back.features == pytest.approx(ds.features, rel=1e-9)


def test_dataset_requires_chronology():
    with pytest.raises(ValueError):
        Dataset(np.array([2000, 1000]), np.array([1.0, 2.0]),
                np.zeros((2, 1)), ("x",))


def test_temporal_split_19_to_5():
    ds = Dataset(np.arange(24, dtype=np.int64) * 1000, np.ones(24) * 5,
                 np.random.default_rng(1).uniform(1, 2, size=(24, 5)),
                 ("h1", "h2", "h3", "h4", "h5"))
    train, test = ds.temporal_split(19 / 24)
    assert len(train) == 19 and len(test) == 5
    assert train.ts_ms.max() < test.ts_ms.min()


# --- models --------------------------------------------------------------

def test_persistence_predicts_h1():
    rng = np.random.default_rng(2)
    series = rng.uniform(30, 50, size=60)
    names, ts, rows = lag_dataset(series)
    ds = Dataset(ts, series[5:], rows, tuple(names))
    model = fit("persistence", ds)
    preds = predict_batch(model, ds)
    assert preds == pytest.approx(ds.column("h1"))


def test_harmonic_mean_formula():
    rng = np.random.default_rng(3)
    series = rng.uniform(10, 90, size=30)
    names, ts, rows = lag_dataset(series)
    ds = Dataset(ts, series[5:], rows, tuple(names))
    model = fit("harmonic_mean", ds)
    for row in ds.features[:5]:
        lags = row[:5]
        assert predict(model, row) == pytest.approx(5.0 / np.sum(1.0 / lags))


def test_ridge_ar_recovers_ar1_against_ols_oracle():
    rng = np.random.default_rng(4)
    phi = 0.83
    base = rng.uniform(20, 60, size=1200)  # iid lags keep the design full rank
    names, ts, rows = lag_dataset(base)
    targets = phi * rows[:, 0]
    ds = Dataset(ts, targets, rows, tuple(names))
    model = fit("ridge_ar", ds)
    got = model.coefficients
    assert got == pytest.approx([phi, 0, 0, 0, 0], abs=1e-6)
    # closed-form least-squares oracle with intercept
    X = np.column_stack([np.ones(len(rows)), rows])
    beta, *_ = np.linalg.lstsq(X, targets, rcond=None)
    assert got == pytest.approx(beta[1:], abs=1e-6)
    preds = predict_batch(model, ds)
    assert preds == pytest.approx(targets, abs=1e-5)


def test_scale_equivariance_of_persistence_and_ridge():
    rng = np.random.default_rng(5)
    series = rng.uniform(25, 45, size=400)
    target_noise = rng.normal(0, 0.5, size=395)
    c = 12.5
    for kind in ("persistence", "ridge_ar"):
        names, ts, rows = lag_dataset(series)
        y = rows[:, 0] * 0.9 + 3.0 + target_noise
        ds1 = Dataset(ts, y, rows, tuple(names))
        ds2 = Dataset(ts, c * y, c * rows, tuple(names))
        p1 = predict_batch(fit(kind, ds1), ds1)
        p2 = predict_batch(fit(kind, ds2), ds2)
        assert p2 == pytest.approx(c * p1, rel=1e-9), kind


def test_degenerate_designs():
    names = ("h1", "h2", "h3", "h4", "h5")
    ts = np.arange(10, dtype=np.int64) * 1000 + T0
    rows = np.full((10, 5), 7.0)
    ds = Dataset(ts, np.arange(10, dtype=float) + 1, rows, names)
    with pytest.raises(DegenerateDesign):
        fit("ridge_ar", ds)
    with pytest.raises(DegenerateDesign):
        fit("gbrt", ds)


def test_partially_constant_columns_dropped_with_warning(caplog):
    import logging
    rng = np.random.default_rng(6)
    names = ("h1", "h2", "h3", "h4", "h5")
    ts = np.arange(50, dtype=np.int64) * 1000 + T0
    rows = rng.uniform(10, 20, size=(50, 5))
    rows[:, 2] = 4.0  # constant lag
    ds = Dataset(ts, rows[:, 0] * 1.1, rows, names)
    with caplog.at_level(logging.WARNING, logger="leobench.predict"):
        model = fit("ridge_ar", ds)
    assert any("constant" in r.message for r in caplog.records)
    assert model.coefficients[2] == 0.0
    assert model.coefficients[0] == pytest.approx(1.1, abs=1e-4)


def test_gbrt_matches_stump_oracle_and_beats_persistence():
    rng = np.random.default_rng(7)
    n = 600
    x = rng.uniform(0, 1, size=n)
    y = np.where(x > 0.5, 15.0, 5.0) + rng.normal(0, 0.1, size=n)
    ts = np.arange(n, dtype=np.int64) * 1000 + T0
    ds_x = Dataset(ts, y, x.reshape(-1, 1), ("x",))

    # brute-force best stump over every midpoint
    order = np.argsort(x)
    xs, ys = x[order], y[order]
    best_sse, best_thr = np.inf, None
    for i in range(1, n):
        if xs[i] == xs[i - 1]:
            continue
        left, right = ys[:i], ys[i:]
        sse = ((left - left.mean()) ** 2).sum() + ((right - right.mean()) ** 2).sum()
        if sse < best_sse:
            best_sse, best_thr = sse, (xs[i] + xs[i - 1]) / 2
    single = fit("gbrt", ds_x, n_trees=1, max_depth=1, learning_rate=1.0)
    tree = single.trees[0]
    assert tree.threshold == pytest.approx(best_thr, abs=1e-12)
    stump_rmse = math.sqrt(best_sse / n)
    gbrt = fit("gbrt", ds_x, n_trees=50)
    gbrt_rmse = math.sqrt(np.mean((predict_batch(gbrt, ds_x) - y) ** 2))
    assert gbrt_rmse <= stump_rmse + 1e-9

    # persistence on the same series, time-ordered
    names, ts2, rows = lag_dataset(y)
    ds_t = Dataset(ts2, y[5:], rows, tuple(names))
    pers_rmse = math.sqrt(np.mean((predict_batch(fit("persistence", ds_t), ds_t)
                                   - y[5:]) ** 2))
    assert gbrt_rmse < pers_rmse


def test_model_json_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    series = rng.uniform(20, 50, size=300)
    names, ts, rows = lag_dataset(series)
    y = 0.7 * rows[:, 0] + 0.2 * rows[:, 1] + rng.normal(0, 0.3, size=len(rows))
    ds = Dataset(ts, y, rows, tuple(names))
    for kind in ("persistence", "harmonic_mean", "ridge_ar", "gbrt"):
        hyper = {"n_trees": 20} if kind == "gbrt" else {}
        model = fit(kind, ds, **hyper)
        path = tmp_path / f"{kind}.json"
        save_model(model, str(path))
        back = load_model(str(path))
        assert predict_batch(back, ds) == pytest.approx(predict_batch(model, ds),
                                                        rel=1e-12), kind
    bad = tmp_path / "bad.json"
    bad.write_text('{"format_version": 99, "kind": "persistence"}')
    with pytest.raises(ValueError):
        load_model(str(bad))


# --- evaluation metrics --------------------------------------------------

class _FixedModel:
    def __init__(self, preds):
        self.preds = list(preds)
        self._i = 0

    def predict_row(self, x):
        v = self.preds[self._i]
        self._i += 1
        return v


def eval_dataset(actuals):
    n = len(actuals)
    return Dataset(np.arange(n, dtype=np.int64) * 1000 + T0,
                   np.asarray(actuals, dtype=float),
                   np.ones((n, 1)), ("x",))


def test_eval_worked_example():
    rep = evaluate(_FixedModel([90.0, 110.0]), eval_dataset([100.0, 100.0]))
    assert rep.mape_pct == pytest.approx(10.0)
    assert rep.rmse == pytest.approx(10.0)
    assert rep.within10_pct == 100.0
    assert rep.within5_pct == 0.0


def test_eval_perfect_predictions():
    rep = evaluate(_FixedModel([50.0, 60.0]), eval_dataset([50.0, 60.0]))
    assert rep.mape_pct == 0.0 and rep.rmse == 0.0
    assert rep.within5_pct == rep.within10_pct == 100.0


def test_eval_zero_actual_rejected():
    with pytest.raises(ZeroActual):
        evaluate(_FixedModel([1.0]), eval_dataset([0.0]))


def test_eval_matches_naive_oracle():
    rng = np.random.default_rng(9)
    actual = rng.uniform(10, 100, size=1000)
    pred = actual * rng.uniform(0.85, 1.15, size=1000)
    rep = evaluate(_FixedModel(pred), eval_dataset(actual))
    # independent scalar-loop oracle
    errs = [abs(p - a) / a for p, a in zip(pred, actual)]
    mape = 100.0 * sum(errs) / len(errs)
    rmse = math.sqrt(sum((p - a) ** 2 for p, a in zip(pred, actual)) / len(actual))
    w5 = 100.0 * sum(e <= 0.05 for e in errs) / len(errs)
    w10 = 100.0 * sum(e <= 0.10 for e in errs) / len(errs)
    assert rep.mape_pct == pytest.approx(mape, abs=1e-9)
    assert rep.rmse == pytest.approx(rmse, abs=1e-9)
    assert rep.within5_pct == pytest.approx(w5, abs=1e-9)
    assert rep.within10_pct == pytest.approx(w10, abs=1e-9)
    assert rep.within5_pct <= rep.within10_pct


def test_report_rejects_inverted_bands():
    with pytest.raises(ValueError):
        EvalReport(mape_pct=5.0, rmse=1.0, within5_pct=80.0, within10_pct=50.0)


# --- end-to-end on the simulator ----------------------------------------

def test_ridge_ar_beats_persistence_on_sim_trace():
    cfg = TerminalModelConfig(rng_seed=13)
    sim = TerminalSim(cfg)
    samples = [sim.step(T0 + k * 1000) for k in range(2400)]
    ctx = OrbitalContext(sim.site, sim.catalog)
    ds = dataset_from_trace(samples, ctx)
    train, test = ds.temporal_split(19 / 24)
    assert train.ts_ms.max() < test.ts_ms.min()
    ridge_rep = evaluate(fit("ridge_ar", train), test)
    pers_rep = evaluate(fit("persistence", train), test)
    assert ridge_rep.mape_pct <= 10.0
    assert ridge_rep.mape_pct < pers_rep.mape_pct
