"""Out-of-zone leakage assessment at incumbent receivers (IPARs)."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import EmptyInput, MissingPrediction
from .geometry import ZoneLayout
from .kriging import RemEstimate
from .propagation import PowerField
from .validation import check_point, check_points

MARGINAL_BAND_DB = 3.0


@dataclass(frozen=True)
class IparReceiver:
    id: str
    position: np.ndarray = field(repr=False)
    threshold_dbm: float
    band_hz: tuple[float, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "position", check_point(self.position, "IPAR position"))
        if not np.isfinite(self.threshold_dbm):
            raise ValueError(f"IPAR {self.id}: threshold must be finite")

    def check_outside(self, layout: ZoneLayout) -> None:
        if not layout.outside(self.position)[0]:
            raise ValueError(f"IPAR {self.id} lies inside the zone (radius <= r0)")


def read_ipars(path: str | Path) -> list[IparReceiver]:
    """Read IPARs from CSV: ipar_id, x_m, y_m, z_m, threshold_dbm[, band_low_hz, band_high_hz]."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            band = None
            if row.get("band_low_hz") and row.get("band_high_hz"):
                band = (float(row["band_low_hz"]), float(row["band_high_hz"]))
            pos = [float(row["x_m"]), float(row["y_m"]), float(row.get("z_m") or 0.0)]
            out.append(IparReceiver(row["ipar_id"], pos, float(row["threshold_dbm"]), band))
    return out


def aggregate_power(per_source_dbm) -> float | np.ndarray:
    """Incoherent (linear-domain) sum of powers in dBm along the last axis."""
    x = np.asarray(per_source_dbm, dtype=float)
    if x.size == 0 or x.shape[-1] == 0:
        raise EmptyInput("aggregate_power needs at least one value")
    if not np.all(np.isfinite(x)):
        raise ValueError("aggregate_power inputs must be finite")
    top = x.max(axis=-1, keepdims=True)
    out = np.squeeze(top, -1) + 10.0 * np.log10(np.sum(10.0 ** ((x - top) / 10.0), axis=-1))
    return float(out) if np.ndim(out) == 0 else out


def aggregate_variance(per_source_dbm, per_source_var) -> np.ndarray:
    """Delta-method variance (dB^2) of the aggregate, sources treated as independent."""
    x = np.asarray(per_source_dbm, dtype=float)
    lin = 10.0 ** ((x - x.max(axis=-1, keepdims=True)) / 10.0)
    share = lin / lin.sum(axis=-1, keepdims=True)
    return np.sum(share ** 2 * np.asarray(per_source_var, dtype=float), axis=-1)


@dataclass(frozen=True)
class IparAssessment:
    ipar_id: str
    pred_dbm: float
    margin_db: float
    threshold_dbm: float
    verdict: str
    contributions: tuple[tuple[str, float], ...]


@dataclass(frozen=True)
class LeakageReport:
    entries: tuple[IparAssessment, ...]
    source: str

    def verdicts(self) -> dict[str, str]:
        return {e.ipar_id: e.verdict for e in self.entries}

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["ipar_id", "pred_dbm", "margin_db", "threshold_dbm", "verdict"])
        for e in self.entries:
            w.writerow([e.ipar_id, repr(e.pred_dbm), repr(e.margin_db), repr(e.threshold_dbm), e.verdict])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def verdict(pred_dbm: float, margin_db: float, threshold_dbm: float) -> str:
    upper = pred_dbm + margin_db
    if upper > threshold_dbm:
        return "VIOLATION"
    if upper <= threshold_dbm - MARGINAL_BAND_DB:
        return "SAFE"
    return "MARGINAL"


def _predictions(rem):
    if isinstance(rem, PowerField):
        return rem.points, rem.sources.ids, rem.power_db, np.zeros_like(rem.power_db), "truth"
    if isinstance(rem, RemEstimate):
        return rem.points, rem.source_ids, rem.pred_dbm, rem.variance_db2, rem.method
    raise TypeError("rem must be a RemEstimate or a PowerField")


def _locate(points: np.ndarray, p: np.ndarray, tol: float = 1e-6) -> int:
    d = np.linalg.norm(points - p, axis=1)
    i = int(np.argmin(d))
    if d[i] > tol:
        raise MissingPrediction(f"no prediction at {p.tolist()}")
    return i


def assess(rem, ipars, k_sigma: float = 2.0) -> LeakageReport:
    """Verdict per IPAR from predicted aggregate power and a k-sigma margin.

    VIOLATION if ``pred + k*std > threshold``; SAFE if it is at least 3 dB
    below the threshold; MARGINAL otherwise.
    """
    points, ids, pred, var, method = _predictions(rem)
    entries = []
    for ipar in ipars:
        i = _locate(points, ipar.position)
        agg = aggregate_power(pred[i])
        margin = k_sigma * float(np.sqrt(aggregate_variance(pred[i], var[i])))
        contrib = tuple(sorted(((sid, float(v)) for sid, v in zip(ids, pred[i])), key=lambda t: -t[1]))
        entries.append(IparAssessment(ipar.id, float(agg), margin, float(ipar.threshold_dbm),
                                      verdict(agg, margin, ipar.threshold_dbm), contrib))
    return LeakageReport(tuple(entries), method)


@dataclass(frozen=True)
class LeakageContour:
    points: np.ndarray = field(repr=False)
    agg_dbm: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.points)

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x_m", "y_m", "z_m", "agg_dbm"])
        for p, a in zip(self.points, self.agg_dbm):
            w.writerow([repr(float(p[0])), repr(float(p[1])), repr(float(p[2])), repr(float(a))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def leakage_contour(rem, level_dbm: float, layout: ZoneLayout) -> LeakageContour:
    """Points outside the zone whose predicted aggregate power is at least ``level_dbm``."""
    points, _, pred, _, _ = _predictions(rem)
    points = check_points(points)
    agg = np.atleast_1d(aggregate_power(pred))
    sel = layout.outside(points) & (agg >= level_dbm)
    return LeakageContour(points[sel], agg[sel])
