"""Log-distance path loss and jointly lognormal shadowing fields.

Every shadowing sample is indexed by a (receive point, source) pair. Two
samples are correlated through the distance between their receive points
and through the angle between their arrival directions:

    rho = exp(-|p - q| / d_corr) * exp(-angle(p -> s, q -> t) / theta_corr)

At a single point this is the usual azimuth-separation cross-correlation
between two sources; for one source observed at two points on a line
through the source it is the plain exponential auto-correlation. The
arrival-angle form keeps every covariance matrix positive semidefinite.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .exceptions import DegenerateGeometry, DuplicateSample, FactorizationFailure, TooClose
from .geometry import SourceSet, arrival_angle
from .validation import check_points

SPEED_OF_LIGHT = 299_792_458.0
JITTER_LADDER = (0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
_CHUNK = 2048


@dataclass(frozen=True)
class ShadowingModel:
    eta: float = 3.0
    sigma_db: float = 8.0
    d_corr: float = 50.0
    theta_corr: float = np.pi / 6
    ref_distance: float = 1.0
    ref_loss_db: float | None = None  # None: free-space loss at ref_distance per carrier

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError(f"eta must be > 0, got {self.eta}")
        if not self.sigma_db >= 0:
            raise ValueError(f"sigma_db must be >= 0, got {self.sigma_db}")
        if not self.d_corr > 0:
            raise ValueError(f"d_corr must be > 0, got {self.d_corr}")
        if not self.theta_corr > 0:
            raise ValueError(f"theta_corr must be > 0, got {self.theta_corr}")
        if not self.ref_distance > 0:
            raise ValueError(f"ref_distance must be > 0, got {self.ref_distance}")
        if self.ref_loss_db is not None and not np.isfinite(self.ref_loss_db):
            raise ValueError("ref_loss_db must be finite")

    def with_params(self, **kw) -> "ShadowingModel":
        params = dict(self.__dict__)
        params.update(kw)
        return ShadowingModel(**params)


def free_space_loss(distance, frequency_hz) -> np.ndarray | float:
    """Friis free-space loss ``20 log10(4 pi d f / c)`` in dB."""
    d = np.asarray(distance, dtype=float)
    f = np.asarray(frequency_hz, dtype=float)
    out = 20.0 * np.log10(4.0 * np.pi * d * f / SPEED_OF_LIGHT)
    return float(out) if out.ndim == 0 else out


def reference_loss(model: ShadowingModel, frequency_hz=None):
    if model.ref_loss_db is not None:
        return model.ref_loss_db
    if frequency_hz is None:
        raise ValueError("frequency_hz is required when the model has no ref_loss_db")
    return free_space_loss(model.ref_distance, frequency_hz)


def path_loss(model: ShadowingModel, distance, frequency_hz=None):
    """Log-distance path loss in dB.

    ``frequency_hz`` only matters when ``model.ref_loss_db`` is None, in
    which case the reference loss is free-space at ``ref_distance``.

    Raises
    ------
    TooClose
        Any distance below ``model.ref_distance``.
    """
    d = np.asarray(distance, dtype=float)
    if np.any(~np.isfinite(d)) or np.any(d < model.ref_distance):
        raise TooClose(f"distance below reference distance {model.ref_distance} m")
    out = reference_loss(model, frequency_hz) + 10.0 * model.eta * np.log10(d / model.ref_distance)
    out = np.asarray(out, dtype=float)
    return float(out) if out.ndim == 0 else out


def mean_power(model: ShadowingModel, points, sources: SourceSet) -> np.ndarray:
    """Deterministic received power (dBm), shape (n_points, n_sources)."""
    pts = check_points(points)
    d = cdist(pts, sources.positions)
    return sources.tx_power_dbm[None, :] - path_loss(model, d, sources.frequency_hz[None, :])


def _resolve_source(src, sources: SourceSet | None):
    if sources is not None and isinstance(src, str):
        return sources.positions[sources.index(src)], src
    pos = np.asarray(src, dtype=float).reshape(-1)
    if pos.size == 2:
        pos = np.append(pos, 0.0)
    return pos, None


def correlation(model: ShadowingModel, point_a, point_b, src_a, src_b, sources: SourceSet | None = None) -> float:
    """Shadowing correlation between (point_a, src_a) and (point_b, src_b).

    Sources are given either as ids (with ``sources``) or as 3D positions.
    """
    pa = check_points(point_a)[0]
    pb = check_points(point_b)[0]
    sa, _ = _resolve_source(src_a, sources)
    sb, _ = _resolve_source(src_b, sources)
    dist = float(np.linalg.norm(pa - pb))
    angle = float(arrival_angle(pa, sa, pb, sb))
    return float(np.exp(-dist / model.d_corr) * np.exp(-angle / model.theta_corr))


def _unit_directions(points: np.ndarray, src_pos: np.ndarray) -> np.ndarray:
    # horizontal unit vectors point -> source; validated non-degenerate
    v = src_pos[None, :2] - points[:, :2]
    n = np.hypot(v[:, 0], v[:, 1])
    if np.any(n <= 1e-12):
        raise DegenerateGeometry("a source coincides with a receive point in the horizontal plane")
    return v / n[:, None]


def sample_features(points, sources: SourceSet) -> tuple[np.ndarray, np.ndarray]:
    """Positions and unit arrival directions for every (point, source) sample.

    Samples are ordered point-major, matching ``power_db.ravel()`` for an
    (n_points, n_sources) matrix.
    """
    pts = check_points(points)
    m = len(sources)
    dirs = np.stack([_unit_directions(pts, sources.positions[s]) for s in range(m)], axis=1)
    return np.repeat(pts, m, axis=0), dirs.reshape(-1, 2)


def correlation_from_features(model: ShadowingModel, pos_a, dir_a, pos_b, dir_b) -> np.ndarray:
    """Correlation matrix between two sample sets described by their features."""
    out = np.empty((len(pos_a), len(pos_b)))
    for lo in range(0, len(pos_a), _CHUNK):
        hi = min(lo + _CHUNK, len(pos_a))
        da = dir_a[lo:hi]
        cross = np.abs(da[:, 0:1] * dir_b[None, :, 1] - da[:, 1:2] * dir_b[None, :, 0])
        dot = da[:, 0:1] * dir_b[None, :, 0] + da[:, 1:2] * dir_b[None, :, 1]
        ang = np.arctan2(cross, dot)
        out[lo:hi] = np.exp(-cdist(pos_a[lo:hi], pos_b) / model.d_corr - ang / model.theta_corr)
    return out


def check_unique_points(points: np.ndarray) -> None:
    if len(np.unique(points, axis=0)) != len(points):
        raise DuplicateSample("repeated (point, source) pairs: duplicate receive points")


def covariance_matrix(model: ShadowingModel, points, sources: SourceSet) -> np.ndarray:
    """Shadowing covariance (dB^2) over all (point, source) samples, point-major.

    The matrix is returned without jitter; ``jittered_cholesky`` applies the
    diagonal-loading policy when it is factorized.
    """
    pts = check_points(points)
    check_unique_points(pts)
    pos, dirs = sample_features(pts, sources)
    cov = model.sigma_db ** 2 * correlation_from_features(model, pos, dirs, pos, dirs)
    return 0.5 * (cov + cov.T)


def jittered_cholesky(cov: np.ndarray, scale: float) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``cov``, loading the diagonal if needed.

    Jitter ``eps * scale`` is tried for eps = 0, 1e-12, ..., 1e-6; the eps
    that succeeded is returned alongside the factor.
    """
    eye = np.eye(len(cov))
    for eps in JITTER_LADDER:
        if eps > 0 and scale <= 0:
            break
        try:
            return np.linalg.cholesky(cov + eps * scale * eye), eps
        except np.linalg.LinAlgError:
            continue
    raise FactorizationFailure("covariance not factorizable with jitter up to 1e-6 * sigma^2")


class ShadowingSampler:
    """Caches the factorized covariance for repeated draws over fixed geometry."""

    def __init__(self, model: ShadowingModel, points, sources: SourceSet):
        self.model = model
        self.points = check_points(points)
        self.sources = sources
        self.shape = (len(self.points), len(sources))
        if model.sigma_db == 0:
            check_unique_points(self.points)
            self.factor = None
            self.jitter = 0.0
        else:
            cov = covariance_matrix(model, self.points, sources)
            self.factor, self.jitter = jittered_cholesky(cov, model.sigma_db ** 2)

    def draw(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        """One draw of shape (n_points, n_sources), or ``size`` stacked draws."""
        n = self.shape[0] * self.shape[1]
        k = 1 if size is None else int(size)
        z = rng.standard_normal((k, n))
        x = np.zeros((k, n)) if self.factor is None else z @ self.factor.T
        x = x.reshape((k,) + self.shape)
        return x[0] if size is None else x

    def field(self, seed) -> "PowerField":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        shadow = self.draw(rng)
        power = mean_power(self.model, self.points, self.sources) + shadow
        return PowerField(self.points, self.sources, power, shadow, seed if isinstance(seed, int) else None)


@dataclass(frozen=True)
class PowerField:
    points: np.ndarray = field(repr=False)
    sources: SourceSet
    power_db: np.ndarray = field(repr=False)
    shadowing_db: np.ndarray = field(repr=False)
    seed: int | None = None

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x_m", "y_m", "z_m", "source_id", "power_dbm", "shadowing_db"])
        for i, p in enumerate(self.points):
            for s, sid in enumerate(self.sources.ids):
                w.writerow([repr(float(p[0])), repr(float(p[1])), repr(float(p[2])), sid,
                            repr(float(self.power_db[i, s])), repr(float(self.shadowing_db[i, s]))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, source, sources: SourceSet) -> "PowerField":
        """Parse a field CSV (path or text); ``sources`` supplies transmitter metadata."""
        text = Path(source).read_text() if isinstance(source, Path) or (
            isinstance(source, str) and "\n" not in source) else source
        rows = list(csv.DictReader(io.StringIO(text)))
        pts: list[tuple[float, float, float]] = []
        index: dict[tuple[float, float, float], int] = {}
        vals: dict[tuple[int, int], tuple[float, float]] = {}
        for r in rows:
            key = (float(r["x_m"]), float(r["y_m"]), float(r["z_m"]))
            if key not in index:
                index[key] = len(pts)
                pts.append(key)
            vals[(index[key], sources.index(r["source_id"]))] = (float(r["power_dbm"]), float(r["shadowing_db"]))
        n, m = len(pts), len(sources)
        if len(vals) != n * m:
            raise ValueError("field CSV does not cover every (point, source) pair")
        power = np.empty((n, m))
        shadow = np.empty((n, m))
        for (i, s), (pw, sh) in vals.items():
            power[i, s], shadow[i, s] = pw, sh
        return cls(np.array(pts), sources, power, shadow)


def sample_field(model: ShadowingModel, points, sources: SourceSet, seed) -> PowerField:
    """Draw one jointly lognormal field; the same seed gives a bit-identical field."""
    return ShadowingSampler(model, points, sources).field(seed)
