"""Seeded experiment drivers: RMSE sweeps, leakage runs, LoS range, manifests.

Randomness is split into independent substreams of the master seed:
transmitter placement uses ``spawn_key=(0,)`` and trial ``t`` uses
``spawn_key=(1, t)``. Transmitters are drawn once in normalized coordinates
(fraction of the core radius, azimuth) and scaled to each zone radius, so a
row's numbers depend only on its own cell and trial, never on loop order.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from itertools import product
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .exceptions import NegativeHeight, NrdzError
from .geometry import EvalGrid, SourceSet, ZoneLayout, build_sensor_ring
from .kriging import (
    FittedCovariance,
    SensorMeasurements,
    baseline_pathloss,
    detrend,
    fit_mle,
    fit_moments,
    krige,
    rmse,
)
from .leakage import LeakageReport, assess
from .propagation import PowerField, ShadowingModel, ShadowingSampler, mean_power

EARTH_RADIUS_M = 6_371_000.0
SOURCE_STREAM = 0
TRIAL_STREAM = 1
SWEEP_COLUMNS = ["phi_delta_rad", "r0_m", "eta", "trial", "rmse_kriging_db", "rmse_baseline_db", "regime", "error"]


def los_range(height: float, earth_radius: float = EARTH_RADIUS_M) -> float:
    """Geometric line-of-sight horizon distance (m) on a spherical earth, no refraction."""
    if height < 0:
        raise NegativeHeight(f"height must be >= 0, got {height}")
    return math.sqrt(2.0 * earth_radius * height + height * height)


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(TRIAL_STREAM, trial)))


def scenario_sources(cfg: ExperimentConfig, r0: float | None = None) -> SourceSet:
    """Transmitters for a zone of radius ``r0``: explicit list, or seeded draws in the core."""
    if cfg.sources is not None:
        return SourceSet.from_records(cfg.sources)
    r0 = cfg.r0 if r0 is None else r0
    r_core = r0 - cfg.guard_width(r0)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(SOURCE_STREAM,)))
    frac = np.sqrt(rng.uniform(0.0, 1.0, cfg.n_sources))  # uniform over the disk
    az = rng.uniform(0.0, 2.0 * np.pi, cfg.n_sources)
    rad = r_core * frac
    pos = np.column_stack([rad * np.cos(az), rad * np.sin(az), np.full(cfg.n_sources, cfg.source_altitude)])
    return SourceSet([f"tx{i + 1}" for i in range(cfg.n_sources)], pos,
                     np.full(cfg.n_sources, cfg.tx_power_dbm), np.full(cfg.n_sources, cfg.frequency_hz))


def shadowing_model(cfg: ExperimentConfig, eta: float | None = None) -> ShadowingModel:
    return ShadowingModel(eta=cfg.eta if eta is None else eta, sigma_db=cfg.sigma_db, d_corr=cfg.d_corr,
                          theta_corr=cfg.theta_corr, ref_distance=cfg.ref_distance)


def region_mask(layout: ZoneLayout, points: np.ndarray, region: str) -> np.ndarray:
    if region == "band":
        return layout.boundary_band(points)
    if region == "inside":
        return ~layout.outside(points)
    if region == "outside":
        return layout.outside(points)
    return np.ones(len(points), dtype=bool)


def _union(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Stack ``a`` and the rows of ``b`` not already in ``a``; return indices of ``b`` rows."""
    idx = np.empty(len(b), dtype=int)
    seen = {tuple(p): i for i, p in reversed(list(enumerate(a.tolist())))}
    extra = []
    for j, p in enumerate(b):
        key = tuple(p.tolist())
        if key not in seen:
            seen[key] = len(a) + len(extra)
            extra.append(p)
        idx[j] = seen[key]
    return (np.vstack([a] + extra) if extra else a), idx


def fit_covariance(cfg: ExperimentConfig, model: ShadowingModel, meas: SensorMeasurements) -> FittedCovariance:
    """Covariance parameters for one trial according to ``cfg.regime``."""
    if cfg.regime == "true-params":
        if model.sigma_db == 0:
            # ordinary Kriging weights are invariant to sigma; residuals are all zero anyway
            return FittedCovariance.from_model(model.with_params(sigma_db=1.0))
        return FittedCovariance.from_model(model)
    resid = detrend(meas, model)
    fitted = fit_moments(resid, meas.positions, meas.sources, default_theta_corr=model.theta_corr)
    if cfg.regime == "mle":
        fitted = fit_mle(resid, meas.positions, meas.sources, fitted)
    return fitted


@dataclass
class _Cell:
    phi: float
    r0: float
    eta: float


def _run_cell(cfg: ExperimentConfig, cell: _Cell) -> list[list]:
    layout = ZoneLayout(cell.r0, cfg.guard_width(cell.r0))
    ring = build_sensor_ring(layout, cell.phi, cfg.altitudes)
    sources = scenario_sources(cfg, cell.r0)
    model = shadowing_model(cfg, cell.eta)
    grid = EvalGrid.square(cell.r0 + layout.r_guard, cfg.grid_n, cfg.grid_altitude).points
    target = grid[region_mask(layout, grid, cfg.region)]
    # the truth is only needed at sensors and scored points
    pts, tidx = _union(ring.positions, target)
    k = len(ring)
    sampler = ShadowingSampler(model, pts, sources)
    trend = mean_power(model, pts, sources)
    rows = []
    for t in range(cfg.trials):
        shadow = sampler.draw(trial_rng(cfg.seed, t))
        power = trend + shadow
        truth = PowerField(target, sources, power[tidx], shadow[tidx])
        meas = SensorMeasurements(ring.positions, power[:k], sources)
        rb = rmse(baseline_pathloss(meas, target, model), truth)
        rk, err = float("nan"), ""
        try:
            est = krige(meas, fit_covariance(cfg, model, meas), target, model,
                        cross_source=cfg.cross_source, nugget=cfg.nugget)
            rk = rmse(est, truth)
        except (NrdzError, np.linalg.LinAlgError) as exc:
            err = type(exc).__name__
        rows.append([cell.phi, cell.r0, cell.eta, t, rk, rb, cfg.regime, err])
    return rows


def _cells(cfg: ExperimentConfig) -> list[_Cell]:
    return [_Cell(p, r, e) for p, r, e in product(cfg.sweep_phi, cfg.sweep_r0, cfg.sweep_eta)]


def sweep_rows(cfg: ExperimentConfig, workers: int | None = None) -> list[list]:
    """All sweep rows, ordered by (phi, r0, eta, trial) in config order."""
    cells = _cells(cfg)
    workers = cfg.workers if workers is None else workers
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            chunks = list(ex.map(_run_cell, [cfg] * len(cells), cells))  # map keeps input order
    else:
        chunks = [_run_cell(cfg, c) for c in cells]
    return [row for chunk in chunks for row in chunk]


def format_sweep_csv(rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for phi, r0, eta, t, rk, rb, regime, err in rows:
        w.writerow([repr(float(phi)), repr(float(r0)), repr(float(eta)), int(t), repr(float(rk)), repr(float(rb)),
                    regime, err])
    return buf.getvalue()


def read_sweep_results(path_or_text) -> list[dict]:
    text = Path(path_or_text).read_text() if "\n" not in str(path_or_text) else str(path_or_text)
    out = []
    for r in csv.DictReader(io.StringIO(text)):
        out.append({"phi_delta_rad": float(r["phi_delta_rad"]), "r0_m": float(r["r0_m"]), "eta": float(r["eta"]),
                    "trial": int(r["trial"]), "rmse_kriging_db": float(r["rmse_kriging_db"]),
                    "rmse_baseline_db": float(r["rmse_baseline_db"]), "regime": r["regime"], "error": r["error"]})
    return out


def run_rmse_sweep(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> str:
    """Run every (phi, r0, eta, trial) and return the sweep CSV text.

    Per-trial failures (singular systems, unidentifiable fits) are recorded
    in the ``error`` column with a NaN Kriging RMSE; the sweep continues.
    """
    text = format_sweep_csv(sweep_rows(cfg))
    if out_dir is not None:
        write_outputs(out_dir, "rmse-sweep", cfg, {"rmse_sweep.csv": text})
    return text


def simulate_measurements(cfg: ExperimentConfig, extra_points=None, trial: int = 0):
    """One draw of the configured scenario at the sensors (and optional extra points).

    Returns (layout, sensor positions, sources, model, power at all points).
    """
    layout = ZoneLayout(cfg.r0, cfg.guard_width())
    ring = build_sensor_ring(layout, cfg.angular_spacing, cfg.altitudes)
    sources = scenario_sources(cfg)
    model = shadowing_model(cfg)
    pts, idx = (ring.positions, np.empty(0, dtype=int)) if extra_points is None else _union(
        ring.positions, np.asarray(extra_points, dtype=float))
    field = ShadowingSampler(model, pts, sources).field(trial_rng(cfg.seed, trial))
    return layout, ring.positions, sources, model, field, idx


def run_leakage(cfg: ExperimentConfig, ipars, out_dir: str | Path | None = None,
                inputs: dict | None = None) -> tuple[LeakageReport, LeakageReport]:
    """Field, REM and assessment for one seeded draw.

    Returns the (true-field, Kriged-REM) reports for the same IPARs.
    """
    layout = ZoneLayout(cfg.r0, cfg.guard_width())
    for ipar in ipars:
        ipar.check_outside(layout)
    at = np.array([ip.position for ip in ipars], dtype=float).reshape(-1, 3)
    _, sensors, sources, model, field, idx = simulate_measurements(cfg, at)
    k = len(sensors)
    truth = PowerField(at, sources, field.power_db[idx], field.shadowing_db[idx])
    meas = SensorMeasurements(sensors, field.power_db[:k], sources)
    fitted = fit_covariance(cfg, model, meas)
    est = krige(meas, fitted, at, model, cross_source=cfg.cross_source, nugget=cfg.nugget)
    if model.sigma_db == 0:
        est = type(est)(est.points, est.source_ids, est.pred_dbm, np.zeros_like(est.variance_db2), est.method)
    truth_report = assess(truth, ipars, cfg.k_sigma)
    rem_report = assess(est, ipars, cfg.k_sigma)
    if out_dir is not None:
        write_outputs(out_dir, "leakage", cfg, {"leakage_truth.csv": truth_report.to_csv(),
                                                "leakage_rem.csv": rem_report.to_csv()}, inputs)
    return truth_report, rem_report


def sha256_text(text: str | bytes) -> str:
    return hashlib.sha256(text.encode() if isinstance(text, str) else text).hexdigest()


def manifest(command: str, cfg: ExperimentConfig, artifacts: dict[str, str], inputs: dict | None = None) -> dict:
    return {
        "manifest_version": 1,
        "tool": f"nrdz {__version__}",
        "command": command,
        "seed": cfg.seed,
        "inputs": dict(sorted((inputs or {}).items())),
        "config": cfg.to_dict(),
        "artifacts": {name: sha256_text(text) for name, text in sorted(artifacts.items())},
    }


def write_outputs(out_dir: str | Path, command: str, cfg: ExperimentConfig, artifacts: dict[str, str],
                  inputs: dict | None = None) -> Path:
    """Write artifacts and ``manifest.json`` (config echo, seed, sha256 per artifact)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in artifacts.items():
        (out / name).write_text(text)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest(command, cfg, artifacts, inputs), indent=2, sort_keys=True) + "\n")
    return path


def verify_manifest(path: str | Path) -> dict[str, bool]:
    """Check each listed artifact next to the manifest against its recorded hash."""
    path = Path(path)
    doc = json.loads(path.read_text())
    out = {}
    for name, digest in doc["artifacts"].items():
        f = path.parent / name
        out[name] = f.exists() and sha256_text(f.read_bytes()) == digest
    return out


__all__ = [
    "EARTH_RADIUS_M",
    "fit_covariance",
    "los_range",
    "manifest",
    "read_sweep_results",
    "region_mask",
    "run_leakage",
    "run_rmse_sweep",
    "scenario_sources",
    "shadowing_model",
    "simulate_measurements",
    "sweep_rows",
    "trial_rng",
    "verify_manifest",
    "write_outputs",
]
