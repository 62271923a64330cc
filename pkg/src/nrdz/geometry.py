"""Zone layout, boundary sensor ring, transmitter set and evaluation grid.

The zone is a disk of radius ``r0`` (the test-area boundary, on which the
sensors sit). Transmitters must lie inside the core disk of radius
``r0 - r_guard``; the annulus between the two is the guard area.

Radial distances are measured on the ground projection, so antenna heights
never move a transmitter across a zone boundary.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .exceptions import DegenerateGeometry, InvalidLayout, NonIntegralSpacing
from .validation import check_point, check_points

TWO_PI = 2.0 * np.pi
_HORIZONTAL_EPS = 1e-12


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ZoneLayout:
    r0: float
    r_guard: float
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not np.isfinite(self.r0) or self.r0 <= 0:
            raise InvalidLayout(f"r0 must be > 0, got {self.r0}")
        if not (0 < self.r_guard < self.r0):
            raise InvalidLayout(f"r_guard must satisfy 0 < r_guard < r0, got {self.r_guard}")
        origin = tuple(float(v) for v in self.origin)
        if len(origin) != 3 or not all(np.isfinite(origin)):
            raise InvalidLayout(f"origin must be a finite 3D point, got {self.origin}")
        object.__setattr__(self, "r0", float(self.r0))
        object.__setattr__(self, "r_guard", float(self.r_guard))
        object.__setattr__(self, "origin", origin)

    @property
    def r_core(self) -> float:
        return self.r0 - self.r_guard

    def radius(self, points) -> np.ndarray:
        """Ground-projected distance of ``points`` from the zone origin."""
        pts = check_points(points, allow_empty=True)
        return np.hypot(pts[:, 0] - self.origin[0], pts[:, 1] - self.origin[1])

    def outside(self, points) -> np.ndarray:
        return self.radius(points) > self.r0

    def boundary_band(self, points, half_width: float | None = None) -> np.ndarray:
        """Mask of points within ``half_width`` (default ``r_guard``) of the boundary circle."""
        w = self.r_guard if half_width is None else float(half_width)
        return np.abs(self.radius(points) - self.r0) <= w


@dataclass(frozen=True)
class SensorRing:
    layout: ZoneLayout
    angular_spacing: float
    altitudes: tuple[float, ...]
    positions: np.ndarray = field(repr=False)

    @property
    def per_level(self) -> int:
        return int(round(TWO_PI / self.angular_spacing))

    def __len__(self) -> int:
        return len(self.positions)


def build_sensor_ring(layout: ZoneLayout, angular_spacing: float, altitudes: Sequence[float] = (0.0,)) -> SensorRing:
    """Place sensors uniformly on the boundary circle, one ring per altitude.

    Sensors are ordered level by level; sensor ``k`` of a level sits at
    azimuth ``k * angular_spacing``.
    """
    if not isinstance(layout, ZoneLayout):
        raise InvalidLayout("layout must be a ZoneLayout")
    phi = float(angular_spacing)
    if not np.isfinite(phi) or phi <= 0 or phi > TWO_PI + 1e-9:
        raise NonIntegralSpacing(f"angular spacing must lie in (0, 2*pi], got {phi}")
    count = TWO_PI / phi
    n = int(round(count))
    if n < 1 or abs(count - n) > 1e-9:
        raise NonIntegralSpacing(f"2*pi / {phi} = {count} is not an integer")
    alts = tuple(float(a) for a in altitudes)
    if not alts:
        raise InvalidLayout("at least one altitude level is required")
    if any(a < 0 or not np.isfinite(a) for a in alts):
        raise InvalidLayout(f"altitudes must be finite and non-negative, got {alts}")
    if any(b <= a for a, b in zip(alts, alts[1:])):
        raise InvalidLayout(f"altitudes must be strictly increasing, got {alts}")

    az = np.arange(n) * phi
    ox, oy, oz = layout.origin
    ring = np.column_stack([ox + layout.r0 * np.cos(az), oy + layout.r0 * np.sin(az)])
    pos = np.vstack([np.column_stack([ring, np.full(n, oz + z)]) for z in alts])
    return SensorRing(layout=layout, angular_spacing=phi, altitudes=alts, positions=_readonly(pos))


@dataclass(frozen=True)
class SourceSet:
    """Transmitters: ids, 3D positions (m), transmit power (dBm), carrier (Hz)."""

    ids: tuple[str, ...]
    positions: np.ndarray = field(repr=False)
    tx_power_dbm: np.ndarray = field(repr=False)
    frequency_hz: np.ndarray = field(repr=False)

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        pos = check_points(self.positions, "source positions")
        tx = np.asarray(self.tx_power_dbm, dtype=float).reshape(-1)
        fr = np.asarray(self.frequency_hz, dtype=float).reshape(-1)
        m = len(ids)
        if not (len(pos) == len(tx) == len(fr) == m):
            raise ValueError("ids, positions, tx_power_dbm and frequency_hz must have equal length")
        if len(set(ids)) != m:
            raise ValueError("source ids must be unique")
        if not np.all(np.isfinite(tx)):
            raise ValueError("transmit powers must be finite")
        if not np.all(np.isfinite(fr) & (fr > 0)):
            raise ValueError("carrier frequencies must be > 0")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "positions", _readonly(pos))
        object.__setattr__(self, "tx_power_dbm", _readonly(tx))
        object.__setattr__(self, "frequency_hz", _readonly(fr))

    def __len__(self) -> int:
        return len(self.ids)

    def index(self, source_id: str) -> int:
        return self.ids.index(str(source_id))

    @classmethod
    def from_records(cls, records: Iterable[dict]) -> "SourceSet":
        records = list(records)
        return cls(
            ids=[r["id"] for r in records],
            positions=[r["position"] for r in records],
            tx_power_dbm=[r.get("tx_power_dbm", 30.0) for r in records],
            frequency_hz=[r.get("frequency_hz", 3.5e9) for r in records],
        )


@dataclass(frozen=True)
class SourceVerdict:
    source_id: str
    radius_m: float
    verdict: str
    reason: str


@dataclass(frozen=True)
class ValidationReport:
    entries: tuple[SourceVerdict, ...]

    @property
    def accepted(self) -> list[str]:
        return [e.source_id for e in self.entries if e.verdict == "ACCEPTED"]

    @property
    def ok(self) -> bool:
        return all(e.verdict == "ACCEPTED" for e in self.entries)

    def to_lines(self) -> list[str]:
        out = []
        for e in self.entries:
            tail = f" ({e.reason})" if e.reason else ""
            out.append(f"{e.source_id}: radius={e.radius_m:.3f} m {e.verdict}{tail}")
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["source_id", "radius_m", "verdict", "reason"])
        for e in self.entries:
            w.writerow([e.source_id, repr(e.radius_m), e.verdict, e.reason])
        return buf.getvalue()


def validate_sources(layout: ZoneLayout, sources: SourceSet) -> ValidationReport:
    radii = layout.radius(sources.positions)
    entries = []
    for sid, r in zip(sources.ids, radii):
        r = float(r)
        if r <= layout.r_core:
            entries.append(SourceVerdict(sid, r, "ACCEPTED", ""))
        elif r <= layout.r0:
            entries.append(SourceVerdict(sid, r, "REJECTED", "in-guard"))
        else:
            entries.append(SourceVerdict(sid, r, "REJECTED", "out-of-zone"))
    return ValidationReport(tuple(entries))


def arrival_angle(points_a, targets_a, points_b, targets_b) -> np.ndarray:
    """Horizontal angle in [0, pi] between directions ``points_a -> targets_a``
    and ``points_b -> targets_b`` (element-wise, broadcasting over the leading
    axis).
    """
    ua = np.asarray(targets_a, dtype=float)[..., :2] - np.asarray(points_a, dtype=float)[..., :2]
    ub = np.asarray(targets_b, dtype=float)[..., :2] - np.asarray(points_b, dtype=float)[..., :2]
    na = np.hypot(ua[..., 0], ua[..., 1])
    nb = np.hypot(ub[..., 0], ub[..., 1])
    if np.any(na <= _HORIZONTAL_EPS) or np.any(nb <= _HORIZONTAL_EPS):
        raise DegenerateGeometry("a source coincides with the viewing point in the horizontal plane")
    cross = ua[..., 0] * ub[..., 1] - ua[..., 1] * ub[..., 0]
    dot = ua[..., 0] * ub[..., 0] + ua[..., 1] * ub[..., 1]
    return np.arctan2(np.abs(cross), dot)


def azimuth_separation(sensor, src_a, src_b) -> float:
    """Angular separation of two sources as seen from ``sensor`` (radians, [0, pi])."""
    s = check_point(sensor, "sensor")
    return float(arrival_angle(s, check_point(src_a, "src_a"), s, check_point(src_b, "src_b")))


@dataclass(frozen=True)
class EvalGrid:
    """Cartesian evaluation grid at a fixed altitude, row-major (y outer, x inner)."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    spacing: float
    altitude: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.spacing) or self.spacing <= 0:
            raise ValueError(f"grid spacing must be > 0, got {self.spacing}")
        if self.x_max < self.x_min or self.y_max < self.y_min:
            raise ValueError("grid bounds are inverted")

    @classmethod
    def square(cls, half_width: float, n: int, altitude: float = 0.0, center=(0.0, 0.0)) -> "EvalGrid":
        """``n`` x ``n`` grid covering ``[-half_width, half_width]^2`` around ``center``."""
        if n < 2:
            raise ValueError("a square grid needs n >= 2")
        cx, cy = center
        return cls(cx - half_width, cx + half_width, cy - half_width, cy + half_width,
                   2.0 * half_width / (n - 1), altitude)

    @property
    def shape(self) -> tuple[int, int]:
        ny = int(round((self.y_max - self.y_min) / self.spacing)) + 1
        nx = int(round((self.x_max - self.x_min) / self.spacing)) + 1
        return ny, nx

    @cached_property
    def points(self) -> np.ndarray:
        ny, nx = self.shape
        xs = self.x_min + np.arange(nx) * self.spacing
        ys = self.y_min + np.arange(ny) * self.spacing
        X, Y = np.meshgrid(xs, ys)
        return _readonly(np.column_stack([X.ravel(), Y.ravel(), np.full(X.size, float(self.altitude))]))

    def __len__(self) -> int:
        ny, nx = self.shape
        return ny * nx
