"""Acceptance criteria 1-13, each reported as one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the summary lines are
printed at the end of the session (and inline with ``-s``).
"""

import math
import time
from functools import lru_cache

import numpy as np
import pytest

from nrdz.cli import DEFAULT_TDOA_SENSORS, default_trajectory, main
from nrdz.compliance import LOCAL, BandTable, SweepRecord, calibrate, classify, lookup_bands
from nrdz.config import ExperimentConfig
from nrdz.geometry import SourceSet, ZoneLayout, build_sensor_ring
from nrdz.harness import _Cell, _run_cell, los_range, scenario_sources, shadowing_model, trial_rng
from nrdz.kriging import FittedCovariance, SensorMeasurements, detrend, fit_moments, krige
from nrdz.propagation import ShadowingModel, ShadowingSampler, covariance_matrix, mean_power, sample_field
from nrdz.tdoa import init_track, localize, simulate_tdoa, track

from conftest import random_sources

PI = math.pi
RESULTS: list[str] = []


def report(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"CRITERION {n:2d} {'PASS' if ok else 'FAIL'}: {title} [{detail}]"
    RESULTS.append(line)
    print(line)
    assert ok, line


@lru_cache(maxsize=None)
def cell(phi: float, r0: float, eta: float) -> np.ndarray:
    """(trials, 2) array of kriging and baseline RMSE at the default config."""
    rows = _run_cell(ExperimentConfig(), _Cell(phi, r0, eta))
    assert all(r[7] == "" for r in rows)
    return np.array([r[4:6] for r in rows], dtype=float)


def _se(x):
    return x.std(ddof=1) / math.sqrt(len(x))


def test_c01_kriging_superiority():
    t0 = time.perf_counter()
    x = cell(PI / 8, 500.0, 3.0)
    secs = time.perf_counter() - t0
    k, b = x[:, 0], x[:, 1]
    wins = float(np.mean(k < b))
    ok = k.mean() < b.mean() and wins >= 0.95 and secs < 120 and len(k) == 200
    report(1, "kriging beats path-loss baseline", ok,
           f"kriging {k.mean():.3f} dB, baseline {b.mean():.3f} dB, wins {wins:.1%}, {secs:.1f} s")


def test_c02_density_trend():
    phis = [PI / 16, PI / 8, PI / 4, PI / 2]
    runs = [cell(p, 500.0, 3.0)[:, 0] for p in phis]
    means = [r.mean() for r in runs]
    ok = True
    for a, b in zip(runs, runs[1:]):
        drop = a.mean() - b.mean()
        if drop > 0 and drop > _se(b - a):  # paired trials: SE of the difference
            ok = False
    report(2, "RMSE non-decreasing in angular spacing", ok, ", ".join(f"{m:.3f}" for m in means))


def test_c03_radius_trend():
    small, large = cell(PI / 8, 250.0, 3.0)[:, 0], cell(PI / 8, 1000.0, 3.0)[:, 0]
    report(3, "smaller zone has lower RMSE", small.mean() <= large.mean(),
           f"r0=250: {small.mean():.3f} dB, r0=1000: {large.mean():.3f} dB")


def test_c04_exponent_robustness():
    means = np.array([cell(PI / 8, 500.0, e)[:, 0].mean() for e in (2.0, 3.0, 4.0)])
    spread = (means.max() - means.min()) / means.mean()
    report(4, "RMSE robust to path-loss exponent", spread < 0.15,
           f"means {np.round(means, 3).tolist()}, relative spread {spread:.2%}")


def test_c05_exact_interpolation():
    worst_err = worst_var = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        r0 = rng.uniform(200, 1000)
        layout = ZoneLayout(r0, 0.1 * r0)
        ring = build_sensor_ring(layout, float(rng.choice([PI / 16, PI / 8, PI / 4, PI / 2])))
        src = random_sources(rng, int(rng.integers(1, 5)), layout.r_core)
        model = ShadowingModel(eta=rng.uniform(2, 4), sigma_db=rng.uniform(1, 12), d_corr=rng.uniform(10, 200),
                               theta_corr=rng.uniform(PI / 12, PI / 2))
        f = sample_field(model, ring.positions, src, seed)
        meas = SensorMeasurements(ring.positions, f.power_db, src)
        est = krige(meas, FittedCovariance.from_model(model), ring.positions, model, cross_source=bool(seed % 2))
        worst_err = max(worst_err, float(np.max(np.abs(est.pred_dbm - f.power_db))))
        worst_var = max(worst_var, float(np.max(est.variance_db2)))
    report(5, "exact interpolation at sensors", worst_err <= 1e-6 and worst_var <= 1e-6,
           f"max |error| {worst_err:.2e} dB, max variance {worst_var:.2e} dB^2 over 50 configs")


def test_c06_covariance_fidelity():
    model = ShadowingModel(sigma_db=8.0, d_corr=50.0)
    src = SourceSet(["s"], [[0.0, 0.0, 10.0]], [30.0], [3.5e9])
    # both points on one ray from the source: arrival-angle factor is exactly 1
    u = np.array([3.0, 4.0, -0.1])
    u /= np.linalg.norm(u)
    pts = src.positions[0] + np.outer([100.0, 150.0], u)
    x = ShadowingSampler(model, pts, src).draw(np.random.default_rng(6), size=100_000)[:, :, 0]
    rho = float(np.corrcoef(x.T)[0, 1])
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        m = ShadowingModel(sigma_db=rng.uniform(1, 12), d_corr=rng.uniform(10, 200), theta_corr=rng.uniform(0.1, 1.5))
        p = np.c_[rng.uniform(-500, 500, (30, 2)), rng.uniform(0, 20, 30)]
        s = random_sources(rng, int(rng.integers(1, 5)), 400.0)
        ev = np.linalg.eigvalsh(covariance_matrix(m, p, s)).min() / m.sigma_db ** 2
        worst = min(worst, float(ev))
    ok = abs(rho - math.exp(-1)) <= 0.01 and worst >= -1e-8
    report(6, "covariance fidelity", ok, f"empirical rho {rho:.4f} vs e^-1 {math.exp(-1):.4f}, min eig/sigma^2 {worst:.1e}")


def test_c07_moments_recovery():
    cfg = ExperimentConfig()
    model = shadowing_model(cfg)
    ring = build_sensor_ring(ZoneLayout(cfg.r0, cfg.guard_width()), 2 * PI / 64)
    src = scenario_sources(cfg)
    smp = ShadowingSampler(model, ring.positions, src)
    trend = mean_power(model, ring.positions, src)
    sig, dc, failed = [], [], 0
    for t in range(200):
        meas = SensorMeasurements(ring.positions, trend + smp.draw(trial_rng(cfg.seed, t)), src)
        try:
            f = fit_moments(detrend(meas, model), ring.positions, src, default_theta_corr=model.theta_corr)
        except Exception:
            failed += 1
            continue
        sig.append(f.sigma_db)
        dc.append(f.d_corr)
    es, ed = np.median(sig) / cfg.sigma_db - 1, np.median(dc) / cfg.d_corr - 1
    report(7, "moments fit recovers sigma and d_c", len(ring) == 64 and abs(es) <= 0.2 and abs(ed) <= 0.2,
           f"median sigma {np.median(sig):.2f} ({es:+.1%}), d_c {np.median(dc):.1f} ({ed:+.1%}), "
           f"{failed}/200 unidentifiable")


SQUARE = np.array(DEFAULT_TDOA_SENSORS)


def _median_error(noise, trials=200, seed=0):
    rng = np.random.default_rng(seed)
    err = []
    for _ in range(trials):
        x = np.r_[rng.uniform(0, 500, 2), 0.0]
        fix = localize(simulate_tdoa(x, SQUARE, noise, rng, fixed_altitude=0.0))
        err.append(np.linalg.norm(fix.position - x))
    return float(np.median(err))


def test_c08_tdoa_round_trip():
    worst = 0.0
    rng = np.random.default_rng(8)
    for _ in range(100):
        sensors = np.c_[rng.uniform(0, 500, (5, 2)), rng.uniform(0, 150, 5)]
        x = np.r_[rng.uniform(0, 500, 2), rng.uniform(0, 150)]
        worst = max(worst, float(np.linalg.norm(localize(simulate_tdoa(x, sensors, 0.0)).position - x)))
    noise = [1e-9, 10e-9, 33e-9, 100e-9]
    med = [_median_error(s) for s in noise]
    ok = worst <= 1e-3 and all(a <= b for a, b in zip(med, med[1:])) and med[2] < 10.0
    report(8, "TDOA round trip and noise scaling", ok,
           f"noiseless max error {worst:.1e} m, medians {np.round(med, 2).tolist()} m at 1/10/33/100 ns")


def test_c09_tracking_gain():
    cfg = ExperimentConfig()
    traj = default_trajectory(cfg, 200, 1.0, 1.0, SQUARE, 0.0)
    sets = [simulate_tdoa(p, SQUARE, 33e-9, trial_rng(cfg.seed, k), fixed_altitude=0.0, t_s=t)
            for k, (t, p) in enumerate(traj)]
    fixes = [localize(m) for m in sets]
    states = [init_track(fixes[0])] + track(init_track(fixes[0]), sets[1:], 1.0, 0.05)
    truth = np.array([p for _, p in traj])
    raw = np.median(np.linalg.norm(np.array([f.position for f in fixes]) - truth, axis=1))
    trk = np.median(np.linalg.norm(np.array([s.position for s in states]) - truth, axis=1))
    report(9, "Kalman tracking improves on raw fixes", trk <= raw, f"raw median {raw:.2f} m, tracked {trk:.2f} m")


def test_c10_band_tables():
    table = BandTable.load()
    bad = 0
    for m in table.ranges:
        key = (m.entry.name, m.direction, m.low_hz)
        low = {(x.entry.name, x.direction, x.low_hz) for x in lookup_bands(table, m.low_hz)}
        high = {(x.entry.name, x.direction, x.low_hz) for x in lookup_bands(table, m.high_hz)}
        bad += key not in low or key in high
    at740 = {x.label for x in lookup_bands(table, 740e6)}
    at2450 = {x.label for x in lookup_bands(table, 2450e6)}
    ok = bad == 0 and "band 12 downlink" in at740 and at2450 == {"ISM", "Radiolocation"}
    report(10, "band tables round-trip", ok,
           f"{len(table.ranges)} ranges, {bad} failures; 740 MHz {sorted(at740)}; 2450 MHz {sorted(at2450)}")


def test_c11_compliance_injection():
    rng = np.random.default_rng(11)
    freqs = np.array([740e6, 1935e6, 2450e6, 2560e6, 2600e6])
    means = rng.uniform(-100, -80, (len(freqs), 24))
    stds = rng.uniform(1.0, 5.0, (len(freqs), 24))

    def ambient(n):
        t = rng.uniform(0, 7 * 86400, n)
        fi = rng.integers(0, len(freqs), n)
        h = ((t % 86400) // 3600).astype(int)
        return np.column_stack([t, freqs[fi], rng.normal(means[fi, h], stds[fi, h])]), fi, h

    hist, _, _ = ambient(100_000)
    profile = calibrate(hist, k=3.0, delta_min=10.0)
    test, fi, h = ambient(100_000)
    flags = np.array([classify(SweepRecord(*r), profile) == LOCAL for r in test])
    inj = np.column_stack([test[:2000, :2], np.array([profile.stats[(profile.table.band_key(f), int(hh))].mean_dbm
                                                       for f, hh in zip(test[:2000, 1], h[:2000])]) + 30.0])
    hits = np.array([classify(SweepRecord(*r), profile) == LOCAL for r in inj])
    ok = hits.all() and flags.mean() < 0.01
    report(11, "local transmitter injection", ok, f"recall {hits.mean():.1%}, false flags {flags.mean():.3%}")


def test_c12_los_formula():
    re_m, h = 6_371_000.0, 228.6
    oracle = (2 * re_m * h + h ** 2) ** 0.5
    got = los_range(h)
    ok = los_range(0.0) == 0.0 and abs(got - oracle) <= 1.0 and abs(got - 53970.0) <= 1.5
    report(12, "line-of-sight horizon", ok, f"los(228.6) = {got:.2f} m, oracle {oracle:.2f} m")


def test_c13_manifest_replay(tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("trials: 5\ngrid: {n: 12}\nsweep: {phi_delta: [pi/8, pi/4], r0: [500], eta: [3]}\n"
                   "tdoa: {steps: 30}\n")
    ip = tmp_path / "ip.csv"
    ip.write_text("ipar_id,x_m,y_m,z_m,threshold_dbm\nA,560,0,0,-60\nB,0,-540,0,-90\n")
    runs = {"rmse-sweep": [], "rem": [], "simulate-field": [], "leakage": ["--ipars", str(ip)], "tdoa-sim": []}
    same = []
    for cmd, extra in runs.items():
        a, b = tmp_path / f"{cmd}-a", tmp_path / f"{cmd}-b"
        assert main([cmd, "--config", str(cfg), "--out", str(a), *extra]) == 0
        assert main([cmd, "--config", str(a / "manifest.json"), "--out", str(b), "--workers", "2"]) == 0
        files = sorted(p.name for p in a.iterdir())
        same.append(all((a / n).read_bytes() == (b / n).read_bytes() for n in files)
                    and files == sorted(p.name for p in b.iterdir()))
    report(13, "manifest replay is byte-identical", all(same), f"{sum(same)}/{len(same)} commands reproduced")
