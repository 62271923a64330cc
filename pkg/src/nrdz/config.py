"""Experiment configuration: YAML (or JSON) documents with a fixed key schema.

Schema (all keys optional; defaults shown)::

    seed: 0
    trials: 200
    workers: 1
    zone:     {r0: 500, r_guard_fraction: 0.1}        # or r_guard: <m>
    ring:     {angular_spacing: pi/8, altitudes: [0]}
    sources:  {count: 4, altitude: 10, tx_power_dbm: 30, frequency_hz: 3.5e9}
              # or a list of {id, position: [x, y, z], tx_power_dbm, frequency_hz}
    model:    {eta: 3, sigma_db: 8, d_corr: 50, theta_corr: pi/6, ref_distance: 1}
    grid:     {n: 40, altitude: 0}
    rmse:     {region: band}                          # band | all | inside | outside
    kriging:  {regime: true-params, cross_source: false, nugget: 0}
    sweep:    {phi_delta: [pi/16, pi/8, pi/4, pi/2], r0: [250, 500, 1000], eta: [2, 3, 4]}
    leakage:  {k_sigma: 2, ipars: <csv path>}
    tdoa:     {sensors: [[x, y, z], ...], noise_dev_s: 33e-9, fixed_altitude: 0,
               trajectory: <csv path>, steps: 200, speed: 1, dt: 1, process_noise: 0.05}
    compliance: {k: 3, delta_min: 10, min_count: 30, bucket_hours: 1,
                 authorized_mhz: [[3300, 3500]], bands: <json path>}

Angles accept numbers or expressions of the form ``a*pi/b``. A run
manifest is itself a valid config (its ``config`` section is used).
"""

from __future__ import annotations

import copy
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .exceptions import ConfigError

REGIMES = ("true-params", "moments", "mle")
REGIONS = ("band", "all", "inside", "outside")
_ANGLE = re.compile(r"^\s*(?:([0-9.eE+-]+)\s*\*?\s*)?pi(?:\s*/\s*([0-9.eE+-]+))?\s*$")


def parse_angle(v) -> float:
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return float(v)
    if isinstance(v, str):
        m = _ANGLE.match(v)
        if m:
            num = float(m.group(1)) if m.group(1) else 1.0
            den = float(m.group(2)) if m.group(2) else 1.0
            return num * math.pi / den
        try:
            return float(v)
        except ValueError:
            pass
    raise ConfigError(f"cannot parse angle {v!r}")


@dataclass
class ExperimentConfig:
    seed: int = 0
    trials: int = 200
    workers: int = 1
    r0: float = 500.0
    r_guard_fraction: float = 0.1
    r_guard: float | None = None
    angular_spacing: float = math.pi / 8
    altitudes: list = field(default_factory=lambda: [0.0])
    n_sources: int = 4
    source_altitude: float = 10.0
    tx_power_dbm: float = 30.0
    frequency_hz: float = 3.5e9
    sources: list | None = None
    eta: float = 3.0
    sigma_db: float = 8.0
    d_corr: float = 50.0
    theta_corr: float = math.pi / 6
    ref_distance: float = 1.0
    grid_n: int = 40
    grid_altitude: float = 0.0
    region: str = "band"
    regime: str = "true-params"
    cross_source: bool = False
    nugget: float = 0.0
    sweep_phi: list = field(default_factory=lambda: [math.pi / 16, math.pi / 8, math.pi / 4, math.pi / 2])
    sweep_r0: list = field(default_factory=lambda: [250.0, 500.0, 1000.0])
    sweep_eta: list = field(default_factory=lambda: [2.0, 3.0, 4.0])
    k_sigma: float = 2.0
    ipars: str | None = None
    tdoa: dict = field(default_factory=dict)
    compliance: dict = field(default_factory=dict)

    def guard_width(self, r0: float | None = None) -> float:
        r0 = self.r0 if r0 is None else r0
        if self.r_guard is not None and r0 == self.r0:
            return float(self.r_guard)
        return self.r_guard_fraction * r0

    def validate(self) -> "ExperimentConfig":
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.regime not in REGIMES:
            raise ConfigError(f"kriging.regime must be one of {REGIMES}")
        if self.region not in REGIONS:
            raise ConfigError(f"rmse.region must be one of {REGIONS}")
        if not 0 < self.r_guard_fraction < 1:
            raise ConfigError("zone.r_guard_fraction must lie in (0, 1)")
        for r0 in [self.r0] + list(self.sweep_r0):
            if not r0 > 0:
                raise ConfigError("zone radii must be > 0")
        for phi in [self.angular_spacing] + list(self.sweep_phi):
            n = 2 * math.pi / phi if phi > 0 else 0
            if phi <= 0 or abs(n - round(n)) > 1e-9:
                raise ConfigError(f"angular spacing {phi} does not divide 2*pi")
        for eta in [self.eta] + list(self.sweep_eta):
            if not eta > 0:
                raise ConfigError("eta must be > 0")
        if self.sigma_db < 0 or self.d_corr <= 0 or self.theta_corr <= 0:
            raise ConfigError("model parameters out of range")
        if self.grid_n < 2:
            raise ConfigError("grid.n must be >= 2")
        if self.sources is None and self.n_sources < 1:
            raise ConfigError("sources.count must be >= 1")
        return self

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "trials": self.trials,
            "zone": {"r0": self.r0, "r_guard_fraction": self.r_guard_fraction, "r_guard": self.r_guard},
            "ring": {"angular_spacing": self.angular_spacing, "altitudes": list(self.altitudes)},
            "sources": copy.deepcopy(self.sources) if self.sources is not None else {
                "count": self.n_sources, "altitude": self.source_altitude,
                "tx_power_dbm": self.tx_power_dbm, "frequency_hz": self.frequency_hz},
            "model": {"eta": self.eta, "sigma_db": self.sigma_db, "d_corr": self.d_corr,
                      "theta_corr": self.theta_corr, "ref_distance": self.ref_distance},
            "grid": {"n": self.grid_n, "altitude": self.grid_altitude},
            "rmse": {"region": self.region},
            "kriging": {"regime": self.regime, "cross_source": self.cross_source, "nugget": self.nugget},
            "sweep": {"phi_delta": list(self.sweep_phi), "r0": list(self.sweep_r0), "eta": list(self.sweep_eta)},
            "leakage": {"k_sigma": self.k_sigma, "ipars": self.ipars},
            "tdoa": copy.deepcopy(self.tdoa),
            "compliance": copy.deepcopy(self.compliance),
        }


_SECTIONS = {
    "zone": {"r0": "r0", "r_guard_fraction": "r_guard_fraction", "r_guard": "r_guard"},
    "ring": {"angular_spacing": "angular_spacing", "altitudes": "altitudes"},
    "model": {"eta": "eta", "sigma_db": "sigma_db", "d_corr": "d_corr", "theta_corr": "theta_corr",
              "ref_distance": "ref_distance"},
    "grid": {"n": "grid_n", "altitude": "grid_altitude"},
    "rmse": {"region": "region"},
    "kriging": {"regime": "regime", "cross_source": "cross_source", "nugget": "nugget"},
    "sweep": {"phi_delta": "sweep_phi", "r0": "sweep_r0", "eta": "sweep_eta"},
    "leakage": {"k_sigma": "k_sigma", "ipars": "ipars"},
}
_SOURCE_KEYS = {"count": "n_sources", "altitude": "source_altitude", "tx_power_dbm": "tx_power_dbm",
                "frequency_hz": "frequency_hz"}
_TOP = {"seed", "trials", "workers", "sources", "tdoa", "compliance", *_SECTIONS}
_ANGLE_FIELDS = {"angular_spacing", "theta_corr"}


def config_from_dict(doc: dict | None) -> ExperimentConfig:
    doc = dict(doc or {})
    if "manifest_version" in doc:
        doc = dict(doc.get("config") or {})
    unknown = set(doc) - _TOP
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kw: dict = {}
    for key in ("seed", "trials", "workers"):
        if key in doc:
            kw[key] = int(doc[key])
    for section, mapping in _SECTIONS.items():
        body = doc.get(section) or {}
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        extra = set(body) - set(mapping)
        if extra:
            raise ConfigError(f"unknown keys in {section!r}: {sorted(extra)}")
        for k, v in body.items():
            if v is None and mapping[k] in ("r_guard", "ipars"):
                kw[mapping[k]] = None
                continue
            kw[mapping[k]] = v
    src = doc.get("sources")
    if isinstance(src, list):
        kw["sources"] = src
    elif isinstance(src, dict):
        extra = set(src) - set(_SOURCE_KEYS)
        if extra:
            raise ConfigError(f"unknown keys in 'sources': {sorted(extra)}")
        for k, v in src.items():
            kw[_SOURCE_KEYS[k]] = v
    elif src is not None:
        raise ConfigError("'sources' must be a mapping or a list")
    for k in ("tdoa", "compliance"):
        if k in doc:
            kw[k] = dict(doc[k] or {})
    try:
        for name in _ANGLE_FIELDS & set(kw):
            kw[name] = parse_angle(kw[name])
        if "sweep_phi" in kw:
            kw["sweep_phi"] = [parse_angle(v) for v in kw["sweep_phi"]]
        for name in ("r0", "r_guard_fraction", "eta", "sigma_db", "d_corr", "ref_distance", "source_altitude",
                     "tx_power_dbm", "frequency_hz", "grid_altitude", "nugget", "k_sigma"):
            if name in kw:
                kw[name] = float(kw[name])
        if kw.get("r_guard") is not None:
            kw["r_guard"] = float(kw["r_guard"])
        for name in ("sweep_r0", "sweep_eta", "altitudes"):
            if name in kw:
                kw[name] = [float(v) for v in kw[name]]
        for name in ("grid_n", "n_sources"):
            if name in kw:
                kw[name] = int(kw[name])
        if "cross_source" in kw:
            kw["cross_source"] = bool(kw["cross_source"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return ExperimentConfig(**kw).validate()


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if doc is not None and not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    return config_from_dict(doc)


def config_echo(cfg: ExperimentConfig) -> dict:
    return cfg.to_dict()


__all__ = ["ExperimentConfig", "config_from_dict", "load_config", "parse_angle", "asdict"]
