"""Covariance estimation and ordinary Kriging of per-source received power.

Kriging runs on detrended residuals: the deterministic path-loss trend is
removed at the sensors, the shadowing residual is interpolated, and the
trend is added back at the prediction points.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.optimize import minimize
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import (
    FactorizationFailure,
    GridMismatch,
    InsufficientPairs,
    NoPositiveCorrelation,
    SingularSystem,
)
from .geometry import SourceSet
from .propagation import (
    ShadowingModel,
    correlation_from_features,
    jittered_cholesky,
    mean_power,
    sample_features,
)
from .validation import check_matrix, check_points

MIN_CORRELATION = 0.05
_COND_LIMIT = 1e12


@dataclass(frozen=True)
class SensorMeasurements:
    """Per-(sensor, source) received power with the transmitter metadata."""

    positions: np.ndarray = field(repr=False)
    power_dbm: np.ndarray = field(repr=False)
    sources: SourceSet

    def __post_init__(self):
        pos = check_points(self.positions, "sensor positions")
        power = check_matrix(self.power_dbm, len(pos), len(self.sources), "power_dbm")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "power_dbm", power)

    @property
    def n_sensors(self) -> int:
        return len(self.positions)


@dataclass(frozen=True)
class FittedCovariance:
    sigma_db: float
    d_corr: float
    theta_corr: float
    method: str
    diagnostics: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        for name in ("sigma_db", "d_corr", "theta_corr"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and > 0, got {v}")

    @classmethod
    def from_model(cls, model: ShadowingModel) -> "FittedCovariance":
        return cls(model.sigma_db, model.d_corr, model.theta_corr, "fixed")

    def apply_to(self, model: ShadowingModel) -> ShadowingModel:
        return model.with_params(sigma_db=self.sigma_db, d_corr=self.d_corr, theta_corr=self.theta_corr)


@dataclass(frozen=True)
class RemEstimate:
    points: np.ndarray = field(repr=False)
    source_ids: tuple[str, ...]
    pred_dbm: np.ndarray = field(repr=False)
    variance_db2: np.ndarray = field(repr=False)
    method: str

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x_m", "y_m", "z_m", "source_id", "pred_dbm", "krig_var_db2", "method"])
        for i, p in enumerate(self.points):
            for s, sid in enumerate(self.source_ids):
                w.writerow([repr(float(p[0])), repr(float(p[1])), repr(float(p[2])), sid,
                            repr(float(self.pred_dbm[i, s])), repr(float(self.variance_db2[i, s])), self.method])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def detrend(measurements: SensorMeasurements, model: ShadowingModel) -> np.ndarray:
    """Shadowing residuals: measured power minus the path-loss trend."""
    return measurements.power_dbm - mean_power(model, measurements.positions, measurements.sources)


def _wls_slope(x: np.ndarray, logy: np.ndarray, w: np.ndarray) -> tuple[float, float]:
    # fit logy = -k * x through the origin; returns (k, weighted SSE)
    k = -np.sum(w * x * logy) / np.sum(w * x * x)
    return float(k), float(np.sum(w * (logy + k * x) ** 2))


def _leading_run(corr: np.ndarray) -> np.ndarray:
    # bins from the shortest separation up to the first one at or below the cutoff
    keep = np.zeros(len(corr), dtype=bool)
    for i, c in enumerate(corr):
        if not c > MIN_CORRELATION:
            break
        keep[i] = True
    return keep


def _bin_pairs(sep, prod, edges, min_pairs):
    idx = np.clip(np.digitize(sep, edges) - 1, 0, len(edges) - 2)
    centers, corr, counts = [], [], []
    for b in range(len(edges) - 1):
        sel = idx == b
        n = int(sel.sum())
        if n < min_pairs:
            continue
        centers.append(float(sep[sel].mean()))
        corr.append(float(prod[sel].mean()))
        counts.append(n)
    return np.array(centers), np.array(corr), np.array(counts, dtype=float)


def fit_moments(
    residuals,
    sensor_positions,
    sources: SourceSet,
    *,
    default_theta_corr: float = np.pi / 6,
    n_distance_bins: int = 10,
    n_angle_bins: int = 8,
    min_pairs: int = 4,
    max_lag_fraction: float = 0.5,
) -> FittedCovariance:
    """Method-of-moments estimate of (sigma, d_corr, theta_corr).

    The angular scale comes from cross-source products at a common sensor,
    binned by azimuth separation. Same-source products between sensor pairs
    are divided by their arrival-angle factor, binned by distance, and give
    the decorrelation distance. Both exponential decays are fitted by
    weighted least squares on log-correlation (weights ``count * rho^2``,
    the inverse delta-method variance) over the leading run of bins whose
    mean correlation exceeds 0.05. Distance lags stop at ``max_lag_fraction``
    of the largest sensor separation, where pair counts are still dense.
    """
    pos = check_points(sensor_positions, "sensor_positions")
    n, m = len(pos), len(sources)
    r = check_matrix(residuals, n, m, "residuals")
    if n * (n - 1) // 2 < 8:
        raise InsufficientPairs(f"{n} sensors give fewer than 8 sensor pairs")
    var = float(np.mean(r ** 2))
    if not var > 1e-18:
        raise NoPositiveCorrelation("residuals have zero variance")
    _, dirs = sample_features(pos, sources)
    dirs = dirs.reshape(n, m, 2)
    diag: dict = {"method": "moments"}

    # angular scale: cross-source pairs at the same sensor
    theta_flagged = m < 2
    theta = float(default_theta_corr)
    if m >= 2:
        sa, sb = np.triu_indices(m, k=1)
        u, v = dirs[:, sa], dirs[:, sb]
        ang = np.arctan2(np.abs(u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]),
                         np.sum(u * v, axis=-1)).ravel()
        prod = (r[:, sa] * r[:, sb]).ravel() / var
        centers, corr, counts = _bin_pairs(ang, prod, np.linspace(0.0, np.pi, n_angle_bins + 1), min_pairs)
        keep = _leading_run(corr)
        diag["angle_bins"] = {"center": centers.tolist(), "corr": corr.tolist(), "count": counts.tolist()}
        if keep.any() and np.any(centers[keep] > 0):
            k, sse = _wls_slope(centers[keep], np.log(corr[keep]), counts[keep] * corr[keep] ** 2)
            if k > 0:
                theta = 1.0 / k
                diag["angle_objective"] = sse
            else:
                theta_flagged = True
        else:
            theta_flagged = True
    diag["theta_default_used"] = theta_flagged

    # distance scale: same-source pairs between sensors
    ia, ib = np.triu_indices(n, k=1)
    dist = np.linalg.norm(pos[ia] - pos[ib], axis=1)
    u, v = dirs[ia], dirs[ib]
    ang = np.arctan2(np.abs(u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]), np.sum(u * v, axis=-1))
    prod = (r[ia] * r[ib]) / var * np.exp(ang / theta)
    sep, prod = np.repeat(dist, m), prod.ravel()
    max_lag = max_lag_fraction * dist.max()
    near = sep <= max_lag
    centers, corr, counts = _bin_pairs(sep[near], prod[near], np.linspace(0.0, max_lag, n_distance_bins + 1),
                                       min_pairs)
    diag["distance_bins"] = {"center": centers.tolist(), "corr": corr.tolist(), "count": counts.tolist()}
    keep = _leading_run(corr) & (centers > 0)
    if not keep.any():
        raise NoPositiveCorrelation("no short-range distance bin has correlation above 0.05")
    k, sse = _wls_slope(centers[keep], np.log(corr[keep]), counts[keep] * corr[keep] ** 2)
    if not k > 0:
        raise NoPositiveCorrelation("correlation does not decay with distance; d_corr unidentifiable")
    diag["distance_objective"] = sse
    diag["objective"] = sse + diag.get("angle_objective", 0.0)
    return FittedCovariance(math.sqrt(var), 1.0 / k, theta, "moments", diag)


def log_likelihood(residuals, sensor_positions, sources: SourceSet, params: FittedCovariance,
                   nugget: float = 0.0) -> float:
    """Zero-mean multivariate normal log-likelihood of all residuals jointly."""
    pos = check_points(sensor_positions)
    r = np.asarray(residuals, dtype=float).ravel()
    model = ShadowingModel(sigma_db=params.sigma_db, d_corr=params.d_corr, theta_corr=params.theta_corr)
    feat_pos, feat_dir = sample_features(pos, sources)
    cov = params.sigma_db ** 2 * correlation_from_features(model, feat_pos, feat_dir, feat_pos, feat_dir)
    cov[np.diag_indices_from(cov)] += nugget
    L, _ = jittered_cholesky(cov, params.sigma_db ** 2)
    z = np.linalg.solve(L, r)
    return float(-0.5 * z @ z - np.log(np.diag(L)).sum() - 0.5 * len(r) * math.log(2 * math.pi))


def fit_mle(residuals, sensor_positions, sources: SourceSet, init: FittedCovariance, *,
            max_iter: int = 200, rtol: float = 1e-4) -> FittedCovariance:
    """Refine ``init`` by maximizing the Gaussian log-likelihood.

    Nelder-Mead over log-parameters; the result is never worse than ``init``.
    With a single source the angular scale is not identifiable and stays at
    its initial value.
    """
    pos = check_points(sensor_positions)
    r = check_matrix(residuals, len(pos), len(sources), "residuals")
    if not np.mean(r ** 2) > 1e-18:
        raise FactorizationFailure("degenerate likelihood: residuals have zero variance")
    free_theta = len(sources) > 1

    def unpack(x):
        theta = math.exp(x[2]) if free_theta else init.theta_corr
        return FittedCovariance(math.exp(x[0]), math.exp(x[1]), theta, "mle")

    def objective(x):
        if np.any(np.abs(x) > 50):
            return np.inf
        try:
            return -log_likelihood(r, pos, sources, unpack(x))
        except FactorizationFailure:
            return np.inf

    x0 = np.log([init.sigma_db, init.d_corr] + ([init.theta_corr] if free_theta else []))
    f0 = objective(x0)
    if not np.isfinite(f0):
        raise FactorizationFailure("likelihood could not be evaluated at the initial parameters")
    res = minimize(objective, x0, method="Nelder-Mead",
                   options={"maxiter": max_iter, "xatol": rtol, "fatol": 1e-10})
    best_x, best_f = (res.x, float(res.fun)) if res.fun <= f0 else (x0, f0)
    out = unpack(best_x)
    diag = {"method": "max-likelihood", "objective": -best_f, "init_objective": -f0,
            "iterations": int(res.nit), "converged": bool(res.success),
            "theta_default_used": init.diagnostics.get("theta_default_used", False) if not free_theta else False}
    return FittedCovariance(out.sigma_db, out.d_corr, out.theta_corr, "mle", diag)


def _solve_bordered(C: np.ndarray, F: np.ndarray, rhs: np.ndarray, scale: float) -> np.ndarray:
    n, k = F.shape
    A = np.zeros((n + k, n + k))
    A[:n, n:] = F
    A[n:, :n] = F.T
    for eps in (0.0, 1e-12, 1e-10, 1e-8, 1e-6):
        A[:n, :n] = C + eps * scale * np.eye(n)
        try:
            if np.linalg.cond(A) > _COND_LIMIT:
                continue
            return np.linalg.solve(A, rhs)
        except np.linalg.LinAlgError:
            continue
    raise SingularSystem("ordinary Kriging system is rank-deficient")


def krige(measurements: SensorMeasurements, fitted: FittedCovariance, points, model: ShadowingModel | None = None,
          *, cross_source: bool = False, nugget: float = 0.0, return_weights: bool = False):
    """Ordinary Kriging prediction of every source's power at ``points``.

    With ``cross_source`` the residuals of all sources enter each system
    (ordinary co-Kriging: own-source weights sum to one, other-source
    weights sum to zero). ``model`` supplies the path-loss trend; its
    covariance parameters are replaced by ``fitted``.
    """
    model = ShadowingModel() if model is None else model
    cov_model = fitted.apply_to(model)
    grid = check_points(points, "points")
    sources = measurements.sources
    n, m = measurements.n_sensors, len(sources)
    resid = detrend(measurements, model)
    trend = mean_power(model, grid, sources)
    s2 = fitted.sigma_db ** 2
    sp, sd = sample_features(measurements.positions, sources)
    gp, gd = sample_features(grid, sources)
    sp, sd = sp.reshape(n, m, 3), sd.reshape(n, m, 2)
    gp, gd = gp.reshape(len(grid), m, 3), gd.reshape(len(grid), m, 2)

    pred = np.empty((len(grid), m))
    var = np.empty((len(grid), m))
    weights = []
    if cross_source:
        fp, fd = sp.reshape(-1, 3), sd.reshape(-1, 2)
        C = s2 * correlation_from_features(cov_model, fp, fd, fp, fd)
        C[np.diag_indices_from(C)] += nugget
        F = np.tile(np.eye(m), (n, 1))
        r = resid.ravel()
    for s in range(m):
        if cross_source:
            c0 = s2 * correlation_from_features(cov_model, fp, fd, gp[:, s], gd[:, s])
            rhs = np.vstack([c0, np.tile(np.eye(m)[:, [s]], (1, len(grid)))])
            sol = _solve_bordered(C, F, rhs, s2)
            w, mu = sol[: n * m], sol[n * m + s]
            pred[:, s] = trend[:, s] + w.T @ r
        else:
            Cs = s2 * correlation_from_features(cov_model, sp[:, s], sd[:, s], sp[:, s], sd[:, s])
            Cs[np.diag_indices_from(Cs)] += nugget
            c0 = s2 * correlation_from_features(cov_model, sp[:, s], sd[:, s], gp[:, s], gd[:, s])
            rhs = np.vstack([c0, np.ones((1, len(grid)))])
            sol = _solve_bordered(Cs, np.ones((n, 1)), rhs, s2)
            w, mu = sol[:n], sol[n]
            pred[:, s] = trend[:, s] + w.T @ resid[:, s]
        var[:, s] = np.maximum(s2 - np.sum(w * c0, axis=0) - mu, 0.0)
        weights.append(w)
    est = RemEstimate(grid, sources.ids, pred, var, "kriging")
    return (est, weights) if return_weights else est


def baseline_pathloss(measurements: SensorMeasurements, points, model: ShadowingModel | None = None,
                      sigma_db: float | None = None) -> RemEstimate:
    """Path-loss-only prediction; sensor readings are ignored."""
    model = ShadowingModel() if model is None else model
    grid = check_points(points, "points")
    s = model.sigma_db if sigma_db is None else sigma_db
    pred = mean_power(model, grid, measurements.sources)
    return RemEstimate(grid, measurements.sources.ids, pred, np.full(pred.shape, s ** 2), "pathloss-baseline")


def rmse(estimate: RemEstimate, truth, region: np.ndarray | Callable | None = None) -> float:
    """Root-mean-squared prediction error over the points selected by ``region``.

    ``truth`` is a PowerField (or anything with ``points``, ``power_db`` and
    ``sources``); ``region`` is a boolean mask over points or a callable
    mapping the point array to one.
    """
    if estimate.points.shape != truth.points.shape or not np.allclose(estimate.points, truth.points, rtol=0, atol=1e-9):
        raise GridMismatch("estimate and truth are defined on different points")
    if tuple(estimate.source_ids) != tuple(truth.sources.ids):
        raise GridMismatch("estimate and truth cover different sources")
    err = estimate.pred_dbm - truth.power_db
    if region is not None:
        mask = region(estimate.points) if callable(region) else np.asarray(region, dtype=bool)
        if mask.shape != (len(estimate.points),):
            raise GridMismatch("region mask does not match the point count")
        err = err[mask]
    if err.size == 0:
        raise GridMismatch("region selects no points")
    return float(np.sqrt(np.mean(err ** 2)))


class OrdinaryKrigingREM(RegressorMixin, BaseEstimator):
    """Radio environment map estimator backed by residual ordinary Kriging.

    ``fit(X, y)`` takes sensor positions ``X`` (n, 3) and measured powers
    ``y`` (n, n_sources) in dBm; ``predict(X)`` returns (n_points, n_sources).

    Parameters
    ----------
    sources : SourceSet
        Transmitter positions, powers and carriers (known to the estimator).
    model : ShadowingModel, optional
        Path-loss trend, and the covariance parameters when ``fit_method`` is
        ``"fixed"``.
    fit_method : {"moments", "mle", "fixed"}
        How covariance parameters are obtained.
    cross_source : bool
        Use every source's residuals in each system (co-Kriging).
    nugget : float
        Measurement-noise variance (dB^2) added to the sensor covariance.
    """

    def __init__(self, sources=None, model=None, fit_method="moments", cross_source=False, nugget=0.0):
        self.sources = sources
        self.model = model
        self.fit_method = fit_method
        self.cross_source = cross_source
        self.nugget = nugget

    def _model(self) -> ShadowingModel:
        return ShadowingModel() if self.model is None else self.model

    def fit(self, X, y):
        if self.sources is None:
            raise ValueError("OrdinaryKrigingREM requires sources")
        if self.fit_method not in ("moments", "mle", "fixed"):
            raise ValueError(f"unknown fit_method {self.fit_method!r}")
        X = check_points(X, "X")
        meas = SensorMeasurements(X, y, self.sources)
        model = self._model()
        resid = detrend(meas, model)
        if self.fit_method == "fixed":
            cov = FittedCovariance.from_model(model)
        else:
            cov = fit_moments(resid, X, self.sources, default_theta_corr=model.theta_corr)
            if self.fit_method == "mle":
                cov = fit_mle(resid, X, self.sources, cov)
        self.measurements_ = meas
        self.residuals_ = resid
        self.covariance_ = cov
        self.n_features_in_ = 3
        return self

    def rem(self, X) -> RemEstimate:
        check_is_fitted(self, "covariance_")
        return krige(self.measurements_, self.covariance_, X, self._model(),
                     cross_source=self.cross_source, nugget=self.nugget)

    def predict(self, X, return_std=False):
        est = self.rem(X)
        if return_std:
            return est.pred_dbm, np.sqrt(est.variance_db2)
        return est.pred_dbm


class PathLossBaseline(RegressorMixin, BaseEstimator):
    """Deterministic path-loss predictor with the same interface as the Kriging REM."""

    def __init__(self, sources=None, model=None):
        self.sources = sources
        self.model = model

    def fit(self, X, y=None):
        if self.sources is None:
            raise ValueError("PathLossBaseline requires sources")
        X = check_points(X, "X")
        if y is not None:
            check_matrix(y, len(X), len(self.sources), "y")
        self.measurements_ = SensorMeasurements(X, np.zeros((len(X), len(self.sources))), self.sources)
        self.n_features_in_ = 3
        return self

    def rem(self, X) -> RemEstimate:
        check_is_fitted(self, "measurements_")
        return baseline_pathloss(self.measurements_, X, self.model)

    def predict(self, X):
        return self.rem(X).pred_dbm
