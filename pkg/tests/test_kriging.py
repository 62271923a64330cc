import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone

from nrdz.exceptions import FactorizationFailure, GridMismatch, InsufficientPairs, NoPositiveCorrelation
from nrdz.geometry import EvalGrid, SourceSet, ZoneLayout, build_sensor_ring
from nrdz.kriging import (
    FittedCovariance,
    OrdinaryKrigingREM,
    PathLossBaseline,
    RemEstimate,
    SensorMeasurements,
    baseline_pathloss,
    detrend,
    fit_mle,
    fit_moments,
    krige,
    log_likelihood,
    rmse,
)
from nrdz.propagation import PowerField, ShadowingModel, ShadowingSampler, correlation, mean_power, sample_field

from conftest import random_sources


def _measure(model, positions, sources, seed):
    f = sample_field(model, positions, sources, seed)
    return SensorMeasurements(positions, f.power_db, sources), f


def _ok_oracle(model, sensors, src_pos, resid, g):
    # textbook ordinary Kriging for one source, assembled from scalar correlations
    n = len(sensors)
    s2 = model.sigma_db ** 2
    A = np.zeros((n + 1, n + 1))
    for i in range(n):
        for j in range(n):
            A[i, j] = s2 * correlation(model, sensors[i], sensors[j], src_pos, src_pos)
    A[:n, n] = A[n, :n] = 1.0
    b = np.r_[[s2 * correlation(model, sensors[i], g, src_pos, src_pos) for i in range(n)], 1.0]
    sol = np.linalg.solve(A, b)
    w, mu = sol[:n], sol[n]
    return w @ resid, s2 - w @ b[:n] - mu, w


def test_detrend_examples(sources, ring):
    m0 = ShadowingModel(sigma_db=0.0)
    meas, _ = _measure(m0, ring.positions, sources, 1)
    assert np.all(detrend(meas, m0) == 0)
    m = ShadowingModel()
    meas, f = _measure(m, ring.positions, sources, 2)
    np.testing.assert_allclose(detrend(meas, m), f.shadowing_db, atol=1e-9)
    shifted = SensorMeasurements(ring.positions, mean_power(m, ring.positions, sources) + 5.0, sources)
    np.testing.assert_allclose(detrend(shifted, m), 5.0, atol=1e-12)


def test_krige_matches_oracle(sources, ring, model):
    meas, _ = _measure(model, ring.positions, sources, 3)
    resid = detrend(meas, model)
    pts = np.array([[300.0, 40.0, 0.0], [-510.0, 20.0, 0.0], [10.0, -480.0, 5.0]])
    est = krige(meas, FittedCovariance.from_model(model), pts, model)
    trend = mean_power(model, pts, sources)
    for s in range(len(sources)):
        for k, g in enumerate(pts):
            r, v, _ = _ok_oracle(model, ring.positions, sources.positions[s], resid[:, s], g)
            assert est.pred_dbm[k, s] == pytest.approx(trend[k, s] + r, abs=1e-8)
            assert est.variance_db2[k, s] == pytest.approx(max(v, 0.0), abs=1e-8)


def test_exact_interpolation_at_sensors(sources, ring, model):
    meas, _ = _measure(model, ring.positions, sources, 4)
    est = krige(meas, FittedCovariance.from_model(model), ring.positions, model)
    assert np.max(np.abs(est.pred_dbm - meas.power_dbm)) <= 1e-6
    assert np.max(est.variance_db2) <= 1e-6


def test_single_sensor_weight_one(model):
    src = SourceSet(["s"], [[0.0, 0.0, 10.0]], [30.0], [3.5e9])
    sensor = np.array([[200.0, 0.0, 0.0]])
    meas = SensorMeasurements(sensor, mean_power(model, sensor, src) + 4.0, src)
    pts = np.array([[0.0, 150.0, 0.0], [-90.0, -30.0, 0.0]])
    est, w = krige(meas, FittedCovariance.from_model(model), pts, model, return_weights=True)
    np.testing.assert_allclose(w[0], 1.0)
    np.testing.assert_allclose(est.pred_dbm, mean_power(model, pts, src) + 4.0, atol=1e-9)


def test_symmetric_sensors_equal_weights(model):
    src = SourceSet(["s"], [[0.0, 0.0, 10.0]], [30.0], [3.5e9])
    sensors = np.array([[100.0, 60.0, 0.0], [100.0, -60.0, 0.0]])
    meas = SensorMeasurements(sensors, mean_power(model, sensors, src) + [[1.0], [3.0]], src)
    _, w = krige(meas, FittedCovariance.from_model(model), [[100.0, 0.0, 0.0]], model, return_weights=True)
    np.testing.assert_allclose(w[0][:, 0], [0.5, 0.5], atol=1e-12)


@given(seed=st.integers(0, 10_000), n_src=st.integers(1, 3), cross=st.booleans())
def test_weight_constraints(seed, n_src, cross):
    rng = np.random.default_rng(seed)
    layout = ZoneLayout(300.0, 30.0)
    ring = build_sensor_ring(layout, np.pi / 6)
    src = random_sources(rng, n_src, layout.r_core)
    model = ShadowingModel()
    meas, _ = _measure(model, ring.positions, src, seed)
    pts = np.c_[rng.uniform(-330, 330, (5, 2)), np.zeros(5)]
    est, weights = krige(meas, FittedCovariance.from_model(model), pts, model, cross_source=cross,
                         return_weights=True)
    n = len(ring)
    for s, w in enumerate(weights):
        if cross:
            w = w.reshape(n, n_src, -1)
            for t in range(n_src):
                np.testing.assert_allclose(w[:, t].sum(axis=0), 1.0 if t == s else 0.0, atol=1e-9)
        else:
            np.testing.assert_allclose(w.sum(axis=0), 1.0, atol=1e-9)
    assert np.all(est.variance_db2 >= 0)


@given(seed=st.integers(0, 10_000))
def test_variance_bounded_by_equal_weights(seed):
    """Ordinary Kriging variance never exceeds the MSE of the equal-weight
    unbiased combination of the same sensors (both are unbiased linear
    predictors; Kriging is the minimum-variance one).
    """
    rng = np.random.default_rng(seed)
    model = ShadowingModel()
    ring = build_sensor_ring(ZoneLayout(400.0, 40.0), np.pi / 4)
    src = random_sources(rng, 2, 360.0)
    meas = SensorMeasurements(ring.positions, mean_power(model, ring.positions, src), src)
    pts = np.c_[rng.uniform(-440, 440, (8, 2)), np.zeros(8)]
    est = krige(meas, FittedCovariance.from_model(model), pts, model)
    n = len(ring)
    w = np.full(n, 1.0 / n)
    for s in range(2):
        sp = src.positions[s]
        C = np.array([[64.0 * correlation(model, a, b, sp, sp) for b in ring.positions] for a in ring.positions])
        for k, g in enumerate(pts):
            c0 = np.array([64.0 * correlation(model, a, g, sp, sp) for a in ring.positions])
            mse_eq = 64.0 - 2 * w @ c0 + w @ C @ w
            assert est.variance_db2[k, s] <= mse_eq + 1e-6


def test_variance_can_exceed_sill_far_from_sensors(model):
    # far from every sensor the ordinary Kriging variance tends to sigma^2 (1 + 1/n)
    src = SourceSet(["s"], [[0.0, 0.0, 10.0]], [30.0], [3.5e9])
    ring = build_sensor_ring(ZoneLayout(500.0, 50.0), np.pi / 4)
    meas = SensorMeasurements(ring.positions, mean_power(model, ring.positions, src), src)
    est = krige(meas, FittedCovariance.from_model(model), [[5000.0, 5000.0, 0.0]], model)
    assert est.variance_db2[0, 0] == pytest.approx(64.0 * (1 + 1 / 8), rel=1e-3)


def test_fit_moments_errors(sources):
    pos = np.array([[100.0, 0, 0], [0, 100.0, 0], [-100.0, 0, 0], [0, -100.0, 0]])
    with pytest.raises(InsufficientPairs):
        fit_moments(np.ones((4, 4)), pos, sources)
    ring = build_sensor_ring(ZoneLayout(500.0, 50.0), np.pi / 8)
    with pytest.raises(NoPositiveCorrelation):
        fit_moments(np.zeros((16, 4)), ring.positions, sources)


def test_fit_moments_single_source_flags_theta():
    layout = ZoneLayout(500.0, 50.0)
    ring = build_sensor_ring(layout, 2 * np.pi / 64)
    src = SourceSet(["s"], [[50.0, -30.0, 10.0]], [30.0], [3.5e9])
    model = ShadowingModel()
    for seed in range(20):
        meas, f = _measure(model, ring.positions, src, seed)
        try:
            fit = fit_moments(f.shadowing_db, ring.positions, src, default_theta_corr=0.4)
        except NoPositiveCorrelation:
            continue
        assert fit.theta_corr == 0.4 and fit.diagnostics["theta_default_used"]
        assert fit.sigma_db > 0 and fit.d_corr > 0
        assert fit.method == "moments"
        return
    pytest.fail("no trial produced a fit")


def test_fit_mle_contract(sources, model):
    ring = build_sensor_ring(ZoneLayout(500.0, 50.0), np.pi / 16)
    _, f = _measure(model, ring.positions, sources, 9)
    init = FittedCovariance(6.0, 80.0, 0.7, "moments")
    out = fit_mle(f.shadowing_db, ring.positions, sources, init)
    assert out.method == "mle"
    assert log_likelihood(f.shadowing_db, ring.positions, sources, out) >= \
        log_likelihood(f.shadowing_db, ring.positions, sources, init) - 1e-9


def test_fit_mle_zero_variance(sources):
    ring = build_sensor_ring(ZoneLayout(500.0, 50.0), np.pi / 8)
    with pytest.raises(FactorizationFailure):
        fit_mle(np.zeros((16, 4)), ring.positions, sources, FittedCovariance(8.0, 50.0, 0.5, "moments"))


def test_fit_mle_near_truth():
    # large sample: 64 sensors x 4 sources, started at the true parameters
    layout = ZoneLayout(500.0, 50.0)
    ring = build_sensor_ring(layout, 2 * np.pi / 64)
    src = random_sources(np.random.default_rng(0), 4, layout.r_core)
    model = ShadowingModel()
    smp = ShadowingSampler(model, ring.positions, src)
    est = []
    for t in range(10):
        sh = smp.draw(np.random.default_rng([7, t]))
        out = fit_mle(sh, ring.positions, src, FittedCovariance.from_model(model))
        est.append([out.sigma_db, out.d_corr])
    med = np.median(est, axis=0)
    np.testing.assert_allclose(med, [8.0, 50.0], rtol=0.10)


def test_baseline_independent_of_data(sources, ring, model):
    a, _ = _measure(model, ring.positions, sources, 1)
    b, _ = _measure(model, ring.positions, sources, 2)
    pts = [[0.0, 480.0, 0.0]]
    np.testing.assert_array_equal(baseline_pathloss(a, pts, model).pred_dbm, baseline_pathloss(b, pts, model).pred_dbm)
    est = baseline_pathloss(a, pts, model)
    assert est.method == "pathloss-baseline" and np.all(est.variance_db2 == 64.0)


def test_baseline_rmse_equals_sigma(sources):
    model = ShadowingModel()
    grid = EvalGrid.square(550.0, 20).points
    smp = ShadowingSampler(model, grid, sources)
    trend = mean_power(model, grid, sources)
    meas = SensorMeasurements(grid[:2], trend[:2], sources)
    base = baseline_pathloss(meas, grid, model)
    vals = []
    for t in range(200):
        sh = smp.draw(np.random.default_rng([1, t]))
        vals.append(rmse(base, PowerField(grid, sources, trend + sh, sh)))
    assert abs(np.mean(vals) - 8.0) <= 0.5


def test_sigma_zero_baseline_rmse(sources, ring):
    model = ShadowingModel(sigma_db=0.0)
    meas, _ = _measure(model, ring.positions, sources, 1)
    pts = EvalGrid.square(550.0, 5).points
    assert rmse(baseline_pathloss(meas, pts, model), sample_field(model, pts, sources, 0)) == 0.0


def test_rmse_examples(sources):
    pts = np.array([[400.0, 0.0, 0.0], [0.0, 400.0, 0.0]])
    power = np.arange(8, dtype=float).reshape(2, 4)
    truth = PowerField(pts, sources, power, np.zeros_like(power))
    same = RemEstimate(pts, sources.ids, power, np.zeros_like(power), "kriging")
    assert rmse(same, truth) == 0.0
    off = RemEstimate(pts, sources.ids, power + 3.0, np.zeros_like(power), "kriging")
    assert rmse(off, truth) == pytest.approx(3.0)
    assert rmse(off, truth, region=np.array([True, False])) == pytest.approx(3.0)
    with pytest.raises(GridMismatch):
        rmse(RemEstimate(pts[::-1], sources.ids, power, power, "kriging"), truth)
    with pytest.raises(GridMismatch):
        rmse(off, truth, region=np.array([False, False]))


def test_estimators_sklearn_api(sources, ring, model):
    meas, _ = _measure(model, ring.positions, sources, 5)
    est = OrdinaryKrigingREM(sources=sources, model=model, fit_method="fixed")
    assert clone(est).get_params()["fit_method"] == "fixed"
    est.fit(ring.positions, meas.power_dbm)
    pts = [[10.0, 470.0, 0.0], [-400.0, 0.0, 0.0]]
    pred, std = est.predict(pts, return_std=True)
    assert pred.shape == (2, 4) and std.shape == (2, 4) and np.all(std >= 0)
    np.testing.assert_allclose(est.predict(ring.positions), meas.power_dbm, atol=1e-6)
    base = PathLossBaseline(sources=sources, model=model).fit(ring.positions, meas.power_dbm)
    np.testing.assert_array_equal(base.predict(pts), mean_power(model, pts, sources))
    with pytest.raises(ValueError):
        OrdinaryKrigingREM(sources=sources, fit_method="bogus").fit(ring.positions, meas.power_dbm)


def test_rem_csv(sources, ring, model):
    meas, _ = _measure(model, ring.positions, sources, 5)
    est = krige(meas, FittedCovariance.from_model(model), [[0.0, 480.0, 0.0]], model)
    lines = est.to_csv().splitlines()
    assert lines[0] == "x_m,y_m,z_m,source_id,pred_dbm,krig_var_db2,method"
    assert len(lines) == 5 and lines[1].endswith(",kriging")
