"""TDOA source localization (Gauss-Newton) and constant-velocity tracking.

TDOAs are stored relative to sensor 0. Internally everything is solved in
range-difference units (metres) for conditioning.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from itertools import groupby
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import minimum_filter

from .exceptions import BadGeometry, NoConvergence
from .propagation import SPEED_OF_LIGHT
from .validation import check_point, check_points

C = SPEED_OF_LIGHT
REFERENCE = 0


def _check_geometry(sensors: np.ndarray, planar: bool) -> None:
    pts = sensors[:, :2] if planar else sensors
    need = 3 if planar else 4
    if len(sensors) < need:
        raise BadGeometry(f"need at least {need} sensors, got {len(sensors)}")
    centered = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    scale = max(sv[0], 1e-300)
    if sv[-1] / scale < 1e-9:
        raise BadGeometry("sensors are collinear" if planar else "sensors are coplanar")


@dataclass(frozen=True)
class TdoaMeasurementSet:
    """TDOAs (s) of sensors 1..k-1 relative to sensor 0.

    ``fixed_altitude`` selects the 2D solver (source height known).
    """

    sensors: np.ndarray = field(repr=False)
    tdoa_s: np.ndarray = field(repr=False)
    noise_dev_s: float = 0.0
    fixed_altitude: float | None = None
    t_s: float = 0.0

    def __post_init__(self):
        s = check_points(self.sensors, "sensors")
        tau = np.asarray(self.tdoa_s, dtype=float).reshape(-1)
        if len(tau) != len(s) - 1:
            raise ValueError(f"expected {len(s) - 1} TDOA values, got {len(tau)}")
        if not np.all(np.isfinite(tau)):
            raise ValueError("TDOA values must be finite")
        _check_geometry(s, self.fixed_altitude is not None)
        span = np.max(np.linalg.norm(s[:, None] - s[None], axis=-1))
        if np.any(np.abs(tau) > span / C + 6 * self.noise_dev_s + 1e-15):
            raise BadGeometry("TDOA exceeds the largest sensor separation")
        object.__setattr__(self, "sensors", s)
        object.__setattr__(self, "tdoa_s", tau)

    @property
    def reference(self) -> int:
        return REFERENCE

    @property
    def dims(self) -> int:
        return 2 if self.fixed_altitude is not None else 3


def predicted_range_differences(x: np.ndarray, sensors: np.ndarray) -> np.ndarray:
    d = np.linalg.norm(x[..., None, :] - sensors, axis=-1)
    return d[..., 1:] - d[..., :1]


def simulate_tdoa(source, sensors, noise_dev: float, seed=None, *, fixed_altitude: float | None = None,
                  t_s: float = 0.0) -> TdoaMeasurementSet:
    """Forward model: ``(|x - s_i| - |x - s_0|) / c`` plus Gaussian timing noise."""
    x = check_point(source, "source")
    s = check_points(sensors, "sensors")
    _check_geometry(s, fixed_altitude is not None)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    tau = predicted_range_differences(x, s) / C
    if noise_dev > 0:
        tau = tau + rng.normal(0.0, noise_dev, size=tau.shape)
    return TdoaMeasurementSet(s, tau, float(noise_dev), fixed_altitude, t_s)


@dataclass(frozen=True)
class LocalizationResult:
    position: np.ndarray
    residual_m: float
    converged: bool
    iterations: int
    covariance: np.ndarray = field(repr=False)  # (dims, dims), m^2
    t_s: float = 0.0

    @property
    def dims(self) -> int:
        return len(self.covariance)


def _jacobian(x: np.ndarray, sensors: np.ndarray, dims: int) -> np.ndarray:
    diff = x - sensors
    norm = np.maximum(np.linalg.norm(diff, axis=1), 1e-12)
    u = diff / norm[:, None]
    return (u[1:] - u[:1])[:, :dims]


def _grid_starts(meas: TdoaMeasurementSet, rd: np.ndarray, n_best: int, n2d: int = 61, n3d: int = 21) -> np.ndarray:
    """Start points on a grid over the padded sensor bounding box.

    Local minima of the gridded cost come first (one per basin, best first),
    then the remaining nodes by cost, ``n_best`` in total.
    """
    s = meas.sensors
    lo, hi = s.min(axis=0), s.max(axis=0)
    pad = np.maximum(0.5 * (hi - lo).max(), 10.0)
    if meas.fixed_altitude is not None:
        ax = [np.linspace(lo[i] - pad, hi[i] + pad, n2d) for i in range(2)]
        X, Y = np.meshgrid(*ax, indexing="ij")
        cand = np.column_stack([X.ravel(), Y.ravel(), np.full(X.size, meas.fixed_altitude)])
        shape = X.shape
    else:
        ax = [np.linspace(lo[i] - pad, hi[i] + pad, n3d) for i in range(3)]
        cand = np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1).reshape(-1, 3)
        shape = (n3d,) * 3
    cost = np.sum((predicted_range_differences(cand, s) - rd) ** 2, axis=1)
    order = np.argsort(cost, kind="stable")
    is_min = (cost.reshape(shape) == minimum_filter(cost.reshape(shape), size=3, mode="nearest")).ravel()
    ranked = np.r_[order[is_min[order]], order[~is_min[order]]]
    return cand[ranked[:n_best]]


def _gauss_newton(x: np.ndarray, s: np.ndarray, rd: np.ndarray, dims: int, max_iter: int, rtol: float):
    def cost(p):
        r = predicted_range_differences(p, s) - rd
        return float(r @ r)

    f = cost(x)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        J = _jacobian(x, s, dims)
        r = predicted_range_differences(x, s) - rd
        step = np.zeros(3)
        step[:dims] = -np.linalg.lstsq(J, r, rcond=None)[0]
        t = 1.0
        while t > 1e-6:
            cand = x + t * step
            fc = cost(cand)
            if fc <= f:
                break
            t *= 0.5
        else:
            converged = True  # no descent along the GN direction: stationary point
            break
        moved = np.linalg.norm(cand - x)
        x, f = cand, fc
        if moved <= rtol * max(1.0, np.linalg.norm(x)):
            converged = True
            break
    return x, f, converged, it


def localize(meas: TdoaMeasurementSet, init=None, *, max_iter: int = 50, rtol: float = 1e-9,
             strict: bool = False, n_starts: int = 16) -> LocalizationResult:
    """Least-squares source position from TDOAs by damped Gauss-Newton.

    Starts from ``init`` or, when absent, from the best node of a coarse grid
    over the padded sensor bounding box. If the final residual is larger
    than the timing noise can explain (the cost surface has local minima
    near sensors), the next-best grid nodes are tried as well and the
    lowest-residual solution is kept. Convergence: step below ``rtol``
    relative to the position norm. A non-converged best iterate is returned
    flagged, or raised as NoConvergence when ``strict``.
    """
    s = meas.sensors
    dims = meas.dims
    rd = meas.tdoa_s * C
    sigma_r = C * meas.noise_dev_s
    plausible = (4.0 * sigma_r) ** 2 * len(rd) + 1e-12
    grid = None
    if init is None:
        grid = _grid_starts(meas, rd, n_starts)
        starts = [grid[0].copy()]
    else:
        starts = [check_point(init, "init").copy()]
    best = None
    k = 0
    while True:
        x0 = starts[-1]
        if meas.fixed_altitude is not None:
            x0[2] = meas.fixed_altitude
        out = _gauss_newton(x0, s, rd, dims, max_iter, rtol)
        if best is None or out[1] < best[1]:
            best = out
        if best[1] <= plausible:
            break
        if grid is None:
            grid = _grid_starts(meas, rd, n_starts)
            k = -1
        k += 1
        if k >= len(grid):
            break
        starts.append(grid[k].copy())
    x, f, converged, it = best
    J = _jacobian(x, s, dims)
    cov = sigma_r ** 2 * np.linalg.pinv(J.T @ J)
    if not converged and strict:
        raise NoConvergence(f"Gauss-Newton did not converge in {max_iter} iterations")
    return LocalizationResult(x, float(np.sqrt(f)), converged, it, cov, meas.t_s)


@dataclass(frozen=True)
class TrackState:
    position: np.ndarray
    velocity: np.ndarray
    covariance: np.ndarray = field(repr=False)  # 6x6, [x y z vx vy vz]
    timestamp: float = 0.0


def init_track(fix: LocalizationResult, velocity_var: float = 1e4, position_var: float | None = None) -> TrackState:
    P = np.eye(6) * velocity_var
    P[:3, :3] = np.eye(3) * (position_var if position_var is not None else velocity_var)
    d = fix.dims
    if position_var is None:
        P[:3, :3] = 0.0  # altitude of a 2D fix is known exactly
        P[:d, :d] = fix.covariance
    return TrackState(fix.position.copy(), np.zeros(3), P, fix.t_s)


class ConstantVelocityKalman:
    """Kalman filter with a white-noise-acceleration motion model.

    ``process_noise`` is the acceleration standard deviation (m/s^2).
    """

    def __init__(self, process_noise: float = 1.0):
        self.process_noise = float(process_noise)

    def transition(self, dt: float) -> tuple[np.ndarray, np.ndarray]:
        F = np.eye(6)
        F[:3, 3:] = dt * np.eye(3)
        q = self.process_noise ** 2
        Q = np.zeros((6, 6))
        Q[:3, :3] = q * dt ** 4 / 4 * np.eye(3)
        Q[:3, 3:] = Q[3:, :3] = q * dt ** 3 / 2 * np.eye(3)
        Q[3:, 3:] = q * dt ** 2 * np.eye(3)
        return F, Q

    def predict(self, state: TrackState, dt: float) -> TrackState:
        F, Q = self.transition(dt)
        x = F @ np.concatenate([state.position, state.velocity])
        P = F @ state.covariance @ F.T + Q
        return TrackState(x[:3], x[3:], 0.5 * (P + P.T), state.timestamp + dt)

    def update(self, state: TrackState, fix: LocalizationResult) -> TrackState:
        # a fixed-altitude (2D) fix observes z exactly
        H = np.hstack([np.eye(3), np.zeros((3, 3))])
        R = np.zeros((3, 3))
        R[:fix.dims, :fix.dims] = fix.covariance
        x = np.concatenate([state.position, state.velocity])
        P = state.covariance
        S = H @ P @ H.T + R
        K = P @ H.T @ np.linalg.pinv(S, hermitian=True)
        x = x + K @ (fix.position - H @ x)
        A = np.eye(6) - K @ H
        P = A @ P @ A.T + K @ R @ K.T
        return TrackState(x[:3], x[3:], 0.5 * (P + P.T), fix.t_s if fix.t_s else state.timestamp)


def track(state: TrackState, measurements: Iterable, dt: float, process_noise: float = 1.0) -> list[TrackState]:
    """Run predict/update over a stream of TDOA sets (or ready localization fixes).

    Each TDOA set is localized starting from the predicted position and the
    fix, with its Gauss-Newton covariance, is the pseudo-measurement.
    """
    kf = ConstantVelocityKalman(process_noise)
    out = []
    for meas in measurements:
        pred = kf.predict(state, dt)
        fix = meas if isinstance(meas, LocalizationResult) else localize(meas, init=pred.position)
        state = kf.update(pred, fix)
        out.append(state)
    return out


def read_tdoa_csv(path_or_text, sensors, noise_dev: float = 0.0, fixed_altitude: float | None = None,
                  sensor_ids: Sequence[str] | None = None) -> list[TdoaMeasurementSet]:
    """Parse ``t_s, sensor_id, tdoa_s`` rows into one measurement set per timestamp.

    ``sensor_ids`` orders the sensors (first = reference); rows for the
    reference sensor are ignored.
    """
    text = Path(path_or_text).read_text() if "\n" not in str(path_or_text) else str(path_or_text)
    s = check_points(sensors)
    ids = [str(i) for i in (sensor_ids if sensor_ids is not None else range(len(s)))]
    rows = sorted(csv.DictReader(io.StringIO(text)), key=lambda r: float(r["t_s"]))
    out = []
    for t, grp in groupby(rows, key=lambda r: float(r["t_s"])):
        tau = np.full(len(s) - 1, np.nan)
        for r in grp:
            k = ids.index(str(r["sensor_id"]))
            if k != REFERENCE:
                tau[k - 1] = float(r["tdoa_s"])
        if np.any(np.isnan(tau)):
            raise ValueError(f"incomplete TDOA set at t={t}")
        out.append(TdoaMeasurementSet(s, tau, noise_dev, fixed_altitude, t))
    return out


def write_tdoa_csv(sets: Sequence[TdoaMeasurementSet], sensor_ids: Sequence[str] | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t_s", "sensor_id", "tdoa_s"])
    for m in sets:
        ids = [str(i) for i in (sensor_ids if sensor_ids is not None else range(len(m.sensors)))]
        for k, tau in enumerate(m.tdoa_s, start=1):
            w.writerow([repr(float(m.t_s)), ids[k], repr(float(tau))])
    return buf.getvalue()


def write_fix_csv(fixes: Sequence[LocalizationResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t_s", "x_m", "y_m", "z_m", "residual", "converged"])
    for f in fixes:
        w.writerow([repr(float(f.t_s))] + [repr(float(v)) for v in f.position] + [repr(f.residual_m), int(f.converged)])
    return buf.getvalue()


def write_track_csv(states: Sequence[TrackState]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t_s", "x_m", "y_m", "z_m", "vx_mps", "vy_mps", "vz_mps", "cov_trace"])
    for st in states:
        w.writerow([repr(float(st.timestamp))] + [repr(float(v)) for v in st.position]
                   + [repr(float(v)) for v in st.velocity] + [repr(float(np.trace(st.covariance)))])
    return buf.getvalue()
