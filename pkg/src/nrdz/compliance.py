"""Spectrum compliance monitoring against band tables.

A sweep record above its band/hour threshold is attributed to a co-located
experimenter transmitter; if its frequency lies outside every authorized
range a compliance event is raised.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from itertools import islice
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

MHZ = 1e6
DEFAULT_SPAN_HZ = (100e6, 3e9)
UNALLOCATED_BIN_HZ = 10e6
SECONDS_PER_HOUR = 3600.0

LOCAL = "LOCAL_EXPERIMENTER"
AMBIENT = "INCUMBENT_OR_AMBIENT"
UNCALIBRATED = "UNCALIBRATED"


@dataclass(frozen=True)
class BandEntry:
    name: str
    origin: str  # "cellular" | "allocation"
    duplex: str = "n/a"
    uplink_hz: tuple[float, float] | None = None
    downlink_hz: tuple[float, float] | None = None
    operators: str = ""
    ranges_hz: tuple[tuple[float, float], ...] = ()


@dataclass(frozen=True)
class BandMatch:
    entry: BandEntry
    direction: str  # "uplink" | "downlink" | "both"
    low_hz: float
    high_hz: float

    @property
    def label(self) -> str:
        if self.entry.origin == "cellular":
            return f"band {self.entry.name} {self.direction}"
        return self.entry.name

    @property
    def key(self) -> str:
        return f"{self.entry.name}|{self.direction}|{self.low_hz / MHZ:g}-{self.high_hz / MHZ:g}MHz"


class BandTable:
    """Frequency allocation table with [low, high) range semantics."""

    def __init__(self, entries: Sequence[BandEntry], version: int | None = None):
        self.entries = tuple(entries)
        self.version = version
        ranges = []
        for e in self.entries:
            if e.origin == "cellular":
                if e.uplink_hz == e.downlink_hz:
                    ranges.append((e, "both", *e.uplink_hz))
                else:
                    ranges.append((e, "uplink", *e.uplink_hz))
                    ranges.append((e, "downlink", *e.downlink_hz))
            else:
                ranges.extend((e, "both", lo, hi) for lo, hi in e.ranges_hz)
        for e, _, lo, hi in ranges:
            if not lo < hi:
                raise ValueError(f"invalid range for {e.name}: {lo} >= {hi}")
        self._ranges = tuple(ranges)
        self._lo = np.array([r[2] for r in ranges])
        self._hi = np.array([r[3] for r in ranges])
        self._key_cache = lru_cache(maxsize=65536)(self._band_key)

    @classmethod
    def from_json(cls, data: dict) -> "BandTable":
        scale = MHZ if data.get("units", "MHz") == "MHz" else 1.0

        def rng(pair):
            return (float(pair[0]) * scale, float(pair[1]) * scale)

        entries = [
            BandEntry(c["band"], "cellular", c["duplex"], rng(c["uplink"]), rng(c["downlink"]), c["operators"])
            for c in data["cellular"]
        ]
        entries += [
            BandEntry(a["name"], "allocation", ranges_hz=tuple(rng(r) for r in a["ranges"]))
            for a in data["allocations"]
        ]
        return cls(entries, data.get("version"))

    @classmethod
    def load(cls, path: str | Path | None = None) -> "BandTable":
        """Load a band file; the shipped US LTE/NR and allocation tables by default."""
        if path is None:
            text = resources.files("nrdz").joinpath("data/bands.json").read_text()
        else:
            text = Path(path).read_text()
        return cls.from_json(json.loads(text))

    @property
    def ranges(self) -> list[BandMatch]:
        return [BandMatch(*r) for r in self._ranges]

    def lookup(self, frequency_hz: float) -> list[BandMatch]:
        if not frequency_hz > 0:
            raise ValueError(f"frequency must be > 0, got {frequency_hz}")
        hit = np.nonzero((self._lo <= frequency_hz) & (frequency_hz < self._hi))[0]
        return [BandMatch(*self._ranges[i]) for i in hit]

    def _band_key(self, frequency_hz: float) -> str:
        matches = self.lookup(frequency_hz)
        if not matches:
            lo = np.floor(frequency_hz / UNALLOCATED_BIN_HZ) * UNALLOCATED_BIN_HZ
            return f"unallocated|{lo / MHZ:g}-{(lo + UNALLOCATED_BIN_HZ) / MHZ:g}MHz"
        # narrowest range wins; table order breaks ties
        best = min(matches, key=lambda m: m.high_hz - m.low_hz)
        return best.key

    def band_key(self, frequency_hz: float) -> str:
        """Calibration bucket for a frequency: its narrowest matching range."""
        return self._key_cache(float(frequency_hz))


def lookup_bands(table: BandTable, frequency_hz: float) -> list[BandMatch]:
    return table.lookup(frequency_hz)


@dataclass(frozen=True)
class SweepRecord:
    timestamp: float
    freq_hz: float
    power_dbm: float
    node_id: str = ""


def read_sweep_csv(path_or_text, span_hz: tuple[float, float] | None = DEFAULT_SPAN_HZ) -> list[SweepRecord]:
    """Parse ``timestamp_utc_s, freq_hz, power_dbm, node_id`` rows."""
    text = Path(path_or_text).read_text() if "\n" not in str(path_or_text) else str(path_or_text)
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        rec = SweepRecord(float(row["timestamp_utc_s"]), float(row["freq_hz"]), float(row["power_dbm"]),
                          row.get("node_id", "") or "")
        if not np.isfinite(rec.power_dbm):
            raise ValueError(f"non-finite power at t={rec.timestamp}")
        if span_hz is not None and not (span_hz[0] <= rec.freq_hz <= span_hz[1]):
            raise ValueError(f"frequency {rec.freq_hz} Hz outside sweep span {span_hz}")
        out.append(rec)
    return out


def write_sweep_csv(records: Iterable[SweepRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["timestamp_utc_s", "freq_hz", "power_dbm", "node_id"])
    for r in records:
        w.writerow([repr(float(r.timestamp)), repr(float(r.freq_hz)), repr(float(r.power_dbm)), r.node_id])
    return buf.getvalue()


class RunningStats:
    """Single-pass mean/variance (Welford, batches merged with Chan's update)."""

    __slots__ = ("count", "mean", "m2")

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0

    def push(self, x: float) -> None:
        self.count += 1
        d = x - self.mean
        self.mean += d / self.count
        self.m2 += d * (x - self.mean)

    def push_batch(self, values: np.ndarray) -> None:
        nb = len(values)
        if nb == 0:
            return
        mb = float(values.mean())
        m2b = float(np.sum((values - mb) ** 2))
        n = self.count + nb
        d = mb - self.mean
        self.mean += d * nb / n
        self.m2 += m2b + d * d * self.count * nb / n
        self.count = n

    @property
    def std(self) -> float:
        return float(np.sqrt(self.m2 / (self.count - 1))) if self.count > 1 else 0.0


@dataclass(frozen=True)
class BandHourStats:
    mean_dbm: float
    std_db: float
    count: int
    threshold_dbm: float | None  # None: UNCALIBRATED


@dataclass(frozen=True)
class ThresholdProfile:
    stats: dict = field(repr=False)  # (band_key, bucket) -> BandHourStats
    table: BandTable = field(repr=False)
    k: float = 3.0
    delta_min: float = 10.0
    bucket_hours: float = 1.0

    def bucket(self, timestamp: float) -> int:
        return int((timestamp % 86400.0) // (self.bucket_hours * SECONDS_PER_HOUR))

    def threshold(self, freq_hz: float, timestamp: float) -> float | None:
        s = self.stats.get((self.table.band_key(freq_hz), self.bucket(timestamp)))
        return None if s is None else s.threshold_dbm

    def to_json(self) -> str:
        rows = [{"band": b, "bucket": h, "mean_dbm": s.mean_dbm, "std_db": s.std_db, "count": s.count,
                 "threshold_dbm": s.threshold_dbm} for (b, h), s in sorted(self.stats.items())]
        return json.dumps({"k": self.k, "delta_min": self.delta_min, "bucket_hours": self.bucket_hours,
                           "stats": rows}, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str, table: BandTable | None = None) -> "ThresholdProfile":
        doc = json.loads(text)
        stats = {(r["band"], int(r["bucket"])): BandHourStats(r["mean_dbm"], r["std_db"], int(r["count"]),
                                                               r["threshold_dbm"]) for r in doc["stats"]}
        return cls(stats, BandTable.load() if table is None else table, doc["k"], doc["delta_min"],
                   doc["bucket_hours"])


def _as_arrays(history) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(history, np.ndarray):
        arr = np.asarray(history, dtype=float)
        return arr[:, 0], arr[:, 1], arr[:, 2]
    recs = list(history)
    return (np.array([r.timestamp for r in recs], dtype=float), np.array([r.freq_hz for r in recs], dtype=float),
            np.array([r.power_dbm for r in recs], dtype=float))


def _chunks(history, size: int) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    if isinstance(history, np.ndarray):
        for lo in range(0, len(history), size):
            yield _as_arrays(history[lo:lo + size])
        return
    it = iter(history)
    while True:
        batch = list(islice(it, size))
        if not batch:
            return
        yield _as_arrays(batch)


def calibrate(history, k: float = 3.0, delta_min: float = 10.0, *, table: BandTable | None = None,
              min_count: int = 30, bucket_hours: float = 1.0, chunk: int = 65536) -> ThresholdProfile:
    """Per band and hour-of-day threshold ``mean + max(k * std, delta_min)``.

    ``history`` is an iterable of SweepRecord or an (n, 3) array of
    (timestamp, freq_hz, power_dbm). Statistics are accumulated in a single
    pass; buckets with fewer than ``min_count`` samples stay uncalibrated.
    """
    table = BandTable.load() if table is None else table
    acc: dict[tuple[str, int], RunningStats] = {}
    for ts, fr, pw in _chunks(history, chunk):
        uniq, inv = np.unique(fr, return_inverse=True)
        bands = sorted({table.band_key(f) for f in uniq})
        band_of_freq = np.array([bands.index(table.band_key(f)) for f in uniq])[inv]
        buckets = ((ts % 86400.0) // (bucket_hours * SECONDS_PER_HOUR)).astype(int)
        n_buckets = int(np.ceil(24 / bucket_hours))
        group = band_of_freq * n_buckets + buckets
        order = np.argsort(group, kind="stable")
        gs, starts = np.unique(group[order], return_index=True)
        for g, vals in zip(gs, np.split(pw[order], starts[1:])):
            key = (bands[g // n_buckets], int(g % n_buckets))
            acc.setdefault(key, RunningStats()).push_batch(vals)
    stats = {}
    for key in sorted(acc):
        rs = acc[key]
        thr = rs.mean + max(k * rs.std, delta_min) if rs.count >= min_count else None
        stats[key] = BandHourStats(rs.mean, rs.std, rs.count, thr)
    return ThresholdProfile(stats, table, k, delta_min, bucket_hours)


def classify(record: SweepRecord, profile: ThresholdProfile) -> str:
    thr = profile.threshold(record.freq_hz, record.timestamp)
    if thr is None:
        return UNCALIBRATED
    return LOCAL if record.power_dbm > thr else AMBIENT


@dataclass(frozen=True)
class ComplianceEvent:
    timestamp: float
    freq_hz: float
    power_dbm: float
    threshold_dbm: float
    bands: tuple[str, ...]
    verdict: str

    def to_json(self) -> str:
        return json.dumps({"timestamp": self.timestamp, "freq_hz": self.freq_hz, "power_dbm": self.power_dbm,
                           "threshold_dbm": self.threshold_dbm, "bands": list(self.bands),
                           "verdict": self.verdict}, sort_keys=True)


def authorization_check(record: SweepRecord, authorized_bands: Sequence[tuple[float, float]],
                        profile: ThresholdProfile) -> ComplianceEvent | None:
    """Event when a local transmission falls outside every authorized [low, high) range."""
    verdict = classify(record, profile)
    if verdict != LOCAL:
        return None
    if any(lo <= record.freq_hz < hi for lo, hi in authorized_bands):
        return None
    bands = tuple(m.label for m in profile.table.lookup(record.freq_hz))
    return ComplianceEvent(record.timestamp, record.freq_hz, record.power_dbm,
                           profile.threshold(record.freq_hz, record.timestamp), bands, verdict)


def monitor(records: Iterable[SweepRecord], profile: ThresholdProfile,
            authorized_bands: Sequence[tuple[float, float]]) -> list[ComplianceEvent]:
    """All compliance events, ordered by timestamp then frequency."""
    events = [e for r in records if (e := authorization_check(r, authorized_bands, profile)) is not None]
    return sorted(events, key=lambda e: (e.timestamp, e.freq_hz))


class ThresholdCalibrator(BaseEstimator):
    """Estimator wrapper: ``fit`` calibrates thresholds, ``predict`` classifies.

    ``X`` is an (n, 3) array of (timestamp_s, freq_hz, power_dbm) or a
    sequence of SweepRecord.
    """

    def __init__(self, k=3.0, delta_min=10.0, min_count=30, bucket_hours=1.0, table=None):
        self.k = k
        self.delta_min = delta_min
        self.min_count = min_count
        self.bucket_hours = bucket_hours
        self.table = table

    def fit(self, X, y=None):
        self.profile_ = calibrate(X, self.k, self.delta_min, table=self.table, min_count=self.min_count,
                                  bucket_hours=self.bucket_hours)
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "profile_")
        ts, fr, pw = _as_arrays(X)
        return np.array([classify(SweepRecord(t, f, p), self.profile_) for t, f, p in zip(ts, fr, pw)], dtype=object)
