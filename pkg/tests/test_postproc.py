from dataclasses import replace

import numpy as np
import pytest

from gridpost.errors import BundleError, ConfigError, DataError, DimensionError, TrainingError
from gridpost.postproc import (
    DrnConfig,
    DrnModel,
    EmosParams,
    FeatureLayout,
    FeatureMatrix,
    aggregate_forecasts,
    assemble_features,
    drn_predict_aggregate,
    drn_train,
    emos_fit,
    emos_predict,
    fit_layout,
    train_one,
)
from gridpost.postproc.drn import worker_count
from gridpost.scoring import GaussianForecast, crps_ensemble, crps_gaussian

SMALL_DRN = dict(hidden=(16, 16), embedding_dim=2, lr=0.01, batch_size=64, max_epochs=30, patience=5,
                 repetitions=1, dtype="float64")


# ---------------------------------------------------------------- EMOS

def _calibrated(n, rng, stations=1):
    mean = rng.normal(scale=3.0, size=(n, stations))
    sd = rng.uniform(0.5, 2.0, size=(n, stations))
    return mean, sd, mean + sd * rng.normal(size=(n, stations))


def test_emos_removes_bias_and_beats_raw_ensemble(rng):
    n, m, beta = 600, 20, 2.0
    truth = rng.normal(scale=3.0, size=n)
    obs = truth + 0.7 * rng.normal(size=n)
    members = truth[:, None] + beta + 0.7 * rng.normal(size=(n, m))
    mean, sd = members.mean(1), members.std(1, ddof=1)
    tr, te = slice(0, 400), slice(400, None)
    params = emos_fit(mean[tr], sd[tr], obs[tr])
    f = emos_predict(params, mean[te][:, None], sd[te][:, None])
    emos = float(np.mean(crps_gaussian(f.mu[:, 0], f.sigma[:, 0], obs[te])))
    raw = float(np.mean(crps_ensemble(members[te], obs[te])))
    assert emos < raw
    # the additive correction undoes the planted bias
    assert params.a[0] + (params.b[0] - 1.0) * beta == pytest.approx(-beta, abs=0.3)


def test_emos_matches_ideal_on_calibrated_ensemble(rng):
    mean, sd, obs = _calibrated(5000, rng)
    params = emos_fit(mean, sd, obs)
    mean2, sd2, obs2 = _calibrated(5000, rng)
    f = emos_predict(params, mean2, sd2)
    emos = np.mean(crps_gaussian(f.mu, f.sigma, obs2))
    ideal = np.mean(crps_gaussian(mean2, sd2, obs2))
    assert emos <= 1.02 * ideal


def test_emos_constant_predictors_match_grid_search(rng):
    obs = rng.normal(1.5, 0.8, size=200)
    params = emos_fit(np.full(200, 4.0), np.full(200, 1.0), obs)
    f = emos_predict(params, np.array([4.0]), np.array([1.0]))

    def grid_min(mus, sigmas):
        crps = crps_gaussian(mus[:, None, None], sigmas[None, :, None], obs[None, None, :]).mean(-1)
        i, j = np.unravel_index(np.argmin(crps), crps.shape)
        return mus[i], sigmas[j]

    mu0, s0 = grid_min(np.arange(0.0, 3.0, 0.01), np.arange(0.3, 1.5, 0.01))
    mu1, s1 = grid_min(np.arange(mu0 - 0.01, mu0 + 0.01, 1e-4), np.arange(s0 - 0.01, s0 + 0.01, 1e-4))
    assert f.mu[0] == pytest.approx(mu1, abs=1e-3)
    assert f.sigma[0] == pytest.approx(s1, abs=1e-3)
    assert params.d[0] == 0.0


def test_emos_degenerate_sd_fixes_d(rng):
    mean = rng.normal(size=100)
    obs = mean + rng.normal(size=100)
    params = emos_fit(mean, np.full(100, 0.7), obs)
    assert params.d[0] == 0.0
    assert np.isfinite(params.c[0])


def test_emos_trace_monotone(rng):
    mean, sd, obs = _calibrated(300, rng, stations=3)
    obs[:, 1] += 1.5
    params, trace = emos_fit(mean, sd, obs, return_trace=True)
    loss = trace.loss
    for s in range(3):
        col = loss[:, s][~np.isnan(loss[:, s])]
        assert len(col) > 1
        assert np.all(np.diff(col) <= 0)
        assert col[-1] == pytest.approx(params.train_crps[s], rel=1e-12)


def test_emos_sample_order_invariant(rng):
    mean, sd, obs = _calibrated(200, rng, stations=2)
    a = emos_fit(mean, sd, obs)
    perm = rng.permutation(200)
    b = emos_fit(mean[perm], sd[perm], obs[perm])
    for k in "abcd":
        assert np.array_equal(getattr(a, k), getattr(b, k))


def test_emos_ignores_missing_obs(rng):
    mean, sd, obs = _calibrated(120, rng)
    holed = obs.copy()
    holed[::4] = np.nan
    keep = ~np.isnan(holed[:, 0])
    a = emos_fit(mean, sd, holed)
    b = emos_fit(mean[keep], sd[keep], obs[keep])
    for k in "abcd":
        np.testing.assert_allclose(getattr(a, k), getattr(b, k), rtol=1e-8, atol=1e-10)


def test_emos_stations_fitted_independently(rng):
    mean, sd, obs = _calibrated(150, rng, stations=3)
    joint = emos_fit(mean, sd, obs)
    alone = emos_fit(mean[:, 1], sd[:, 1], obs[:, 1])
    assert joint.station(1) == pytest.approx(alone.station(0), rel=1e-12, abs=1e-14)


def test_emos_requires_minimum_samples(rng):
    mean, sd, obs = _calibrated(40, rng, stations=2)
    obs[:15, 1] = np.nan
    with pytest.raises(DataError, match="station 1 has 25"):
        emos_fit(mean, sd, obs)


def test_emos_shape_and_finiteness_checks():
    with pytest.raises(DimensionError):
        emos_fit(np.zeros(40), np.ones(41), np.zeros(40))
    with pytest.raises(DataError):
        emos_fit(np.full(40, np.nan), np.ones(40), np.zeros(40))


def test_emos_predict_identity_links():
    params = EmosParams(a=[0.0], b=[1.0], c=[0.3], d=[0.0])
    mean = np.array([[-2.0], [0.5], [7.0]])
    f = emos_predict(params, mean, np.ones_like(mean))
    np.testing.assert_array_equal(f.mu, mean)
    np.testing.assert_allclose(f.sigma, np.log1p(np.exp(0.3)), rtol=1e-15)


def test_emos_predict_sigma_positive_and_monotone():
    params = EmosParams(a=[1.0], b=[0.5], c=[-800.0], d=[2.0])
    sd = np.linspace(0.0, 500.0, 101)[:, None]
    f = emos_predict(params, np.zeros_like(sd), sd)
    assert np.all(f.sigma > 0)
    assert np.all(np.diff(f.sigma[:, 0]) >= 0)
    assert f.sigma[-1, 0] > f.sigma[0, 0]


def test_emos_predict_station_count_checked():
    params = EmosParams(a=[0.0, 0.0], b=[1.0, 1.0], c=[0.0, 0.0], d=[0.0, 0.0])
    with pytest.raises(DimensionError):
        emos_predict(params, np.zeros((4, 3)), np.ones((4, 3)))


# ---------------------------------------------------------------- features

def test_layout_none_is_baseline(small_dataset):
    layout = fit_layout(small_dataset)
    assert layout.names == small_dataset.predictor_names + ["lat", "lon", "altitude", "orography"]
    assert layout.code_names == []
    assert layout.station_ids == [str(s) for s in small_dataset.stations.station_id]


def _codes(d, h, seed):
    return np.random.default_rng(seed).normal(size=(d, h))


def test_two_spatial_variables_add_four_features(small_dataset):
    d = small_dataset.n_dates
    codes = {"t2m": _codes(d, 2, 0), "z500": _codes(d, 2, 1)}
    base = fit_layout(small_dataset)
    layout = fit_layout(small_dataset, "convae", ["t2m", "z500"], 2, codes)
    assert layout.width == base.width + 4
    assert layout.names[-4:] == ["t2m_code0", "t2m_code1", "z500_code0", "z500_code1"]
    fm = assemble_features(small_dataset, layout, codes)
    assert fm.x.shape == (np.sum(~np.isnan(small_dataset.obs)), base.width + 4)
    assert layout.groups()["z500_codes"] == [base.width + 2, base.width + 3]


def test_training_features_standardized(small_dataset):
    codes = {"t2m": _codes(small_dataset.n_dates, 2, 0)}
    layout = fit_layout(small_dataset, "pca", ["t2m"], 2, codes)
    fm = assemble_features(small_dataset, layout, codes, keep_missing=True)
    assert np.max(np.abs(fm.x.mean(axis=0))) < 1e-6
    assert np.max(np.abs(fm.x.std(axis=0) - 1.0)) < 1e-6


def test_feature_order_is_date_major(small_dataset):
    layout = fit_layout(small_dataset)
    fm = assemble_features(small_dataset, layout, keep_missing=True)
    s = len(small_dataset.stations)
    assert fm.date_index[:s].tolist() == [0] * s
    assert fm.station_index[:s].tolist() == list(range(s))
    raw = fm.x[3 * s + 2] * layout.sd + layout.mean
    np.testing.assert_allclose(raw[:len(small_dataset.predictor_names)], small_dataset.predictors[3, 2], rtol=1e-12)


def test_unknown_station_rejected(small_dataset):
    layout = fit_layout(small_dataset)
    ids = small_dataset.stations.station_id.copy().astype(object)
    ids[2] = "NEW1"
    other = replace(small_dataset, stations=replace(small_dataset.stations, station_id=ids))
    with pytest.raises(DataError, match="NEW1"):
        assemble_features(other, layout)


def test_codes_iff_spatial(small_dataset):
    codes = {"t2m": _codes(small_dataset.n_dates, 2, 0)}
    with pytest.raises(ConfigError):
        fit_layout(small_dataset, codes=codes)
    with pytest.raises(ConfigError):
        fit_layout(small_dataset, "convae", ["t2m", "z500"], 2, codes)
    with pytest.raises(DimensionError):
        fit_layout(small_dataset, "convae", ["t2m"], 3, codes)
    with pytest.raises(ConfigError):
        FeatureLayout(["a"], [], "convae", [])


def test_layout_dict_roundtrip(small_dataset):
    layout = fit_layout(small_dataset)
    back = FeatureLayout.from_dict(layout.to_dict())
    assert back.same_structure(layout)
    np.testing.assert_array_equal(back.mean, layout.mean)


# ---------------------------------------------------------------- DRN

def _layout(n_features, stations):
    return FeatureLayout([f"x{k}" for k in range(n_features)], [], station_ids=list(stations),
                         mean=np.zeros(n_features), sd=np.ones(n_features))


def _planted(n, offsets, seed):
    g = np.random.default_rng(seed)
    s = len(offsets)
    x = g.normal(size=(n * s, 1))
    station = np.tile(np.arange(s), n)
    y = 2.0 * x[:, 0] + np.asarray(offsets)[station] + 0.3 * g.normal(size=n * s)
    return FeatureMatrix(x, station, y, np.repeat(np.arange(n), s), station.copy())


def test_embedding_learns_station_offsets():
    train, val = _planted(300, [-2.0, 0.0, 2.0], 1), _planted(60, [-2.0, 0.0, 2.0], 2)
    layout = _layout(1, ["A", "B", "C"])
    (model,) = drn_train(DrnConfig(**SMALL_DRN), layout, train, val)
    probe = FeatureMatrix(np.zeros((3, 1)), np.arange(3), np.zeros(3), np.zeros(3, int), np.arange(3))
    mu = model.predict(probe).mu
    assert mu[0] < mu[1] < mu[2]
    assert mu[2] - mu[0] == pytest.approx(4.0, abs=0.5)


def test_same_seed_same_parameters():
    train, val = _planted(100, [0.0, 1.0], 3), _planted(30, [0.0, 1.0], 4)
    layout = _layout(1, ["A", "B"])
    cfg = DrnConfig(**dict(SMALL_DRN, max_epochs=5))
    a = train_one(cfg, layout, train, val)
    b = train_one(cfg, layout, train, val)
    assert all(np.array_equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    c = train_one(cfg, layout, train, val, repetition=1)
    assert not np.array_equal(a.parameters()[1], c.parameters()[1])


def test_threads_do_not_change_results(monkeypatch):
    train, val = _planted(80, [0.0, 1.0], 5), _planted(20, [0.0, 1.0], 6)
    layout = _layout(1, ["A", "B"])
    cfg = DrnConfig(**dict(SMALL_DRN, max_epochs=3, repetitions=3))
    monkeypatch.setenv("GRIDPOST_THREADS", "1")
    serial = drn_train(cfg, layout, train, val)
    monkeypatch.setenv("GRIDPOST_THREADS", "3")
    assert worker_count(3) == 3
    threaded = drn_train(cfg, layout, train, val)
    for a, b in zip(serial, threaded):
        assert all(np.array_equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("GRIDPOST_THREADS", "2")
    assert worker_count(10) == 2
    assert worker_count(1) == 1
    monkeypatch.setenv("GRIDPOST_THREADS", "many")
    with pytest.raises(ConfigError):
        worker_count(4)


def test_validation_station_absent_from_training():
    train = _planted(50, [0.0, 1.0, 2.0], 7)
    train = train.take(np.flatnonzero(train.station != 2))
    val = _planted(10, [0.0, 1.0, 2.0], 8)
    with pytest.raises(DataError, match="C"):
        drn_train(DrnConfig(**SMALL_DRN), _layout(1, ["A", "B", "C"]), train, val)


def test_non_finite_loss_aborts_with_context():
    train, val = _planted(40, [0.0], 9), _planted(10, [0.0], 10)
    train.x[5, 0] = 1e300
    with pytest.raises(TrainingError, match="repetition 0, epoch 1, batch 0"):
        train_one(DrnConfig(**SMALL_DRN), _layout(1, ["A"]), train, val)


def test_early_stopping_restores_best():
    train, val = _planted(60, [0.0, 1.0], 11), _planted(20, [5.0, -5.0], 12)
    cfg = DrnConfig(**dict(SMALL_DRN, max_epochs=60, patience=3))
    model = train_one(cfg, _layout(1, ["A", "B"]), train, val)
    assert len(model.history) < 60
    best = min(r[2] for r in model.history)
    assert model.history[model.best_epoch - 1][2] == best
    f = model.predict(val)
    assert np.mean(crps_gaussian(f.mu, f.sigma, val.y)) == pytest.approx(best, rel=1e-9)


def test_sigma_positive_for_extreme_inputs():
    layout = _layout(2, ["A"])
    model = DrnModel(DrnConfig(**SMALL_DRN), layout, 0.0, 1.0)
    x = np.array([[1e6, -1e6], [-1e6, 1e6], [0.0, 0.0]])
    f = model.predict(FeatureMatrix(x, np.zeros(3, int), np.zeros(3), np.zeros(3, int), np.zeros(3, int)))
    assert np.all(f.sigma > 0)


def test_aggregate_single_model_identity():
    train, val = _planted(40, [0.0, 1.0], 13), _planted(10, [0.0, 1.0], 14)
    model = train_one(DrnConfig(**dict(SMALL_DRN, max_epochs=2)), _layout(1, ["A", "B"]), train, val)
    f, g = drn_predict_aggregate([model], val), model.predict(val)
    np.testing.assert_array_equal(f.mu, g.mu)
    np.testing.assert_array_equal(f.sigma, g.sigma)


def test_aggregate_parameter_average():
    f = aggregate_forecasts([GaussianForecast(np.array([1.0]), np.array([1.0])),
                             GaussianForecast(np.array([3.0]), np.array([3.0]))])
    assert (f.mu[0], f.sigma[0]) == (2.0, 2.0)
    with pytest.raises(ConfigError):
        aggregate_forecasts([])
    with pytest.raises(ConfigError):
        drn_predict_aggregate([], None)


def test_aggregate_no_worse_than_worst_member():
    train, val = _planted(150, [-1.0, 0.0, 1.0], 15), _planted(40, [-1.0, 0.0, 1.0], 16)
    test = _planted(80, [-1.0, 0.0, 1.0], 17)
    models = drn_train(DrnConfig(**dict(SMALL_DRN, repetitions=3, max_epochs=10)), _layout(1, "ABC"), train, val)
    member = [np.mean(m.predict(test).crps(test.y)) for m in models]
    agg = np.mean(drn_predict_aggregate(models, test).crps(test.y))
    assert agg <= max(member)


def test_aggregate_rejects_layout_mismatch():
    cfg = DrnConfig(**SMALL_DRN)
    a = DrnModel(cfg, _layout(1, ["A", "B"]), 0.0, 1.0)
    b = DrnModel(cfg, _layout(1, ["A", "C"]), 0.0, 1.0)
    with pytest.raises(BundleError):
        drn_predict_aggregate([a, b], _planted(2, [0.0, 0.0], 0))


def test_spatial_variant_shares_architecture():
    base = DrnConfig()
    spatial = DrnConfig(spatial_mode="convae", spatial_vars=("t2m",), latent_dim=2)
    assert base.architecture() == spatial.architecture()
    a = DrnModel(base, _layout(10, ["A"]), 0.0, 1.0)
    codes = FeatureLayout([f"x{k}" for k in range(10)], [], "convae", ["t2m"], 2, ["A"],
                          np.zeros(12), np.ones(12))
    b = DrnModel(spatial, codes, 0.0, 1.0)
    assert b.net.in_shape[0] - a.net.in_shape[0] == 2
    assert [type(layer).__name__ for layer in a.net.layers] == [type(layer).__name__ for layer in b.net.layers]
    assert a.metadata()["architecture"] == b.metadata()["architecture"]


def test_drn_defaults_and_validation():
    cfg = DrnConfig()
    assert (cfg.hidden, cfg.embedding_dim, cfg.lr, cfg.repetitions, cfg.patience) == ((100, 100), 15, 0.002, 10, 10)
    for bad in (dict(embedding_dim=0), dict(repetitions=0), dict(spatial_mode="pca"),
                dict(spatial_vars=("t2m",)), dict(spatial_mode="bogus"),
                dict(spatial_mode="convae", spatial_vars=("t2m",), latent_dim=0), dict(lr=0.0)):
        with pytest.raises(ConfigError):
            DrnConfig(**bad).validate()
