"""Command-line entry point: ``nrdz <subcommand> [--config PATH] [--seed N] [--out DIR] [--workers N]``.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from .compliance import BandTable, ThresholdProfile, calibrate, classify, monitor, read_sweep_csv
from .config import ExperimentConfig, config_from_dict, load_config
from .exceptions import ConfigError, NrdzError
from .geometry import EvalGrid, ZoneLayout, validate_sources
from .harness import (
    los_range,
    run_leakage,
    run_rmse_sweep,
    fit_covariance,
    scenario_sources,
    simulate_measurements,
    trial_rng,
    write_outputs,
)
from .kriging import SensorMeasurements, krige
from .leakage import read_ipars
from .tdoa import (
    init_track,
    localize,
    read_tdoa_csv,
    simulate_tdoa,
    track,
    write_fix_csv,
    write_tdoa_csv,
    write_track_csv,
)

DEFAULT_TDOA_SENSORS = [[0.0, 0.0, 0.0], [500.0, 0.0, 0.0], [500.0, 500.0, 0.0], [0.0, 500.0, 0.0]]


class _Ctx:
    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.inputs: dict = {}
        raw = None
        if args.config:
            try:
                raw = json.loads(Path(args.config).read_text())
            except (OSError, ValueError):
                raw = None
        if isinstance(raw, dict) and "manifest_version" in raw:
            self.inputs = dict(raw.get("inputs") or {})
            cfg = config_from_dict(raw)
        else:
            cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = int(args.seed)
        if args.workers is not None:
            cfg.workers = int(args.workers)
        self.cfg = cfg.validate()
        self.out = Path(args.out)

    def input(self, name: str, flag_value: str | None, fallback: str | None = None) -> str:
        """Resolve an input file from the flag, the replayed manifest, or the config."""
        path = flag_value or self.inputs.get(name) or fallback
        if not path:
            raise ConfigError(f"missing input: {name}")
        if not Path(path).exists():
            raise ConfigError(f"input file not found: {path}")
        self.inputs[name] = str(Path(path).resolve())
        return path

    def write(self, command: str, artifacts: dict[str, str]) -> None:
        write_outputs(self.out, command, self.cfg, artifacts, self.inputs)


def _tdoa_settings(cfg: ExperimentConfig) -> dict:
    t = dict(cfg.tdoa)
    return {
        "sensors": np.asarray(t.get("sensors", DEFAULT_TDOA_SENSORS), dtype=float),
        "noise_dev_s": float(t.get("noise_dev_s", 33e-9)),
        "fixed_altitude": None if t.get("fixed_altitude", 0.0) is None else float(t.get("fixed_altitude", 0.0)),
        "trajectory": t.get("trajectory"),
        "steps": int(t.get("steps", 200)),
        "speed": float(t.get("speed", 1.0)),
        "dt": float(t.get("dt", 1.0)),
        "process_noise": float(t.get("process_noise", 0.05)),
    }


def _read_trajectory(path: str) -> list[tuple[float, np.ndarray]]:
    rows = csv.DictReader(io.StringIO(Path(path).read_text()))
    return [(float(r["t_s"]), np.array([float(r["x_m"]), float(r["y_m"]), float(r.get("z_m") or 0.0)]))
            for r in rows]


def default_trajectory(cfg: ExperimentConfig, steps: int, speed: float, dt: float, sensors: np.ndarray,
                       altitude: float | None) -> list[tuple[float, np.ndarray]]:
    """Straight constant-velocity path through the sensor hull, seeded by the master seed."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2,)))
    lo, hi = sensors[:, :2].min(axis=0), sensors[:, :2].max(axis=0)
    start = lo + (hi - lo) * rng.uniform(0.25, 0.75, 2)
    heading = rng.uniform(0.0, 2.0 * np.pi)
    z = 0.0 if altitude is None else altitude
    v = speed * np.array([np.cos(heading), np.sin(heading)])
    return [(k * dt, np.r_[start + v * k * dt, z]) for k in range(steps)]


def _write_trajectory(traj) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t_s", "x_m", "y_m", "z_m"])
    for t, p in traj:
        w.writerow([repr(float(t))] + [repr(float(v)) for v in p])
    return buf.getvalue()


def cmd_simulate_field(ctx: _Ctx) -> None:
    cfg = ctx.cfg
    layout = ZoneLayout(cfg.r0, cfg.guard_width())
    grid = EvalGrid.square(cfg.r0 + layout.r_guard, cfg.grid_n, cfg.grid_altitude).points
    _, _, _, _, field, _ = simulate_measurements(cfg, grid)
    ctx.write("simulate-field", {"field.csv": field.to_csv()})


def cmd_rmse_sweep(ctx: _Ctx) -> None:
    run_rmse_sweep(ctx.cfg, ctx.out)


def cmd_rem(ctx: _Ctx) -> None:
    cfg = ctx.cfg
    _, sensors, sources, model, field, _ = simulate_measurements(cfg)
    meas = SensorMeasurements(sensors, field.power_db, sources)
    layout = ZoneLayout(cfg.r0, cfg.guard_width())
    grid = EvalGrid.square(cfg.r0 + layout.r_guard, cfg.grid_n, cfg.grid_altitude).points
    est = krige(meas, fit_covariance(cfg, model, meas), grid, model, cross_source=cfg.cross_source, nugget=cfg.nugget)
    ctx.write("rem", {"sensors.csv": field.to_csv(), "rem.csv": est.to_csv()})


def cmd_leakage(ctx: _Ctx) -> None:
    path = ctx.input("ipars", ctx.args.ipars, ctx.cfg.ipars)
    truth, rem = run_leakage(ctx.cfg, read_ipars(path), ctx.out, ctx.inputs)
    agree = sum(truth.verdicts()[k] == v for k, v in rem.verdicts().items())
    print(f"verdict agreement: {agree}/{len(truth.entries)}")


def cmd_tdoa_sim(ctx: _Ctx) -> None:
    st = _tdoa_settings(ctx.cfg)
    traj_path = ctx.args.trajectory or st["trajectory"]
    if traj_path:
        traj = _read_trajectory(ctx.input("trajectory", traj_path))
    else:
        traj = default_trajectory(ctx.cfg, st["steps"], st["speed"], st["dt"], st["sensors"], st["fixed_altitude"])
    sets = [simulate_tdoa(p, st["sensors"], st["noise_dev_s"], trial_rng(ctx.cfg.seed, k),
                          fixed_altitude=st["fixed_altitude"], t_s=t) for k, (t, p) in enumerate(traj)]
    ctx.write("tdoa-sim", {"tdoa.csv": write_tdoa_csv(sets), "truth.csv": _write_trajectory(traj)})


def _measurements(ctx: _Ctx):
    st = _tdoa_settings(ctx.cfg)
    path = ctx.input("tdoa", ctx.args.input)
    return st, read_tdoa_csv(Path(path).read_text(), st["sensors"], st["noise_dev_s"], st["fixed_altitude"])


def cmd_tdoa_localize(ctx: _Ctx) -> None:
    _, sets = _measurements(ctx)
    ctx.write("tdoa-localize", {"fixes.csv": write_fix_csv([localize(m) for m in sets])})


def cmd_track(ctx: _Ctx) -> None:
    st, sets = _measurements(ctx)
    if not sets:
        raise NrdzError("no TDOA measurements to track")
    first = localize(sets[0])
    states = [init_track(first)] + track(init_track(first), sets[1:], st["dt"], st["process_noise"])
    ctx.write("track", {"track.csv": write_track_csv(states)})


def _table(ctx: _Ctx) -> BandTable:
    bands = ctx.cfg.compliance.get("bands")
    return BandTable.load(ctx.input("bands", bands)) if bands else BandTable.load()


def cmd_compliance_calibrate(ctx: _Ctx) -> None:
    c = ctx.cfg.compliance
    records = read_sweep_csv(Path(ctx.input("sweep", ctx.args.input)).read_text())
    profile = calibrate(records, float(c.get("k", 3.0)), float(c.get("delta_min", 10.0)), table=_table(ctx),
                        min_count=int(c.get("min_count", 30)), bucket_hours=float(c.get("bucket_hours", 1.0)))
    ctx.write("compliance-calibrate", {"profile.json": profile.to_json()})


def cmd_compliance_classify(ctx: _Ctx) -> None:
    c = ctx.cfg.compliance
    table = _table(ctx)
    profile = ThresholdProfile.from_json(Path(ctx.input("profile", ctx.args.profile)).read_text(), table)
    records = read_sweep_csv(Path(ctx.input("sweep", ctx.args.input)).read_text())
    authorized = [(lo * 1e6, hi * 1e6) for lo, hi in c.get("authorized_mhz", [])]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["timestamp_utc_s", "freq_hz", "power_dbm", "verdict"])
    for r in records:
        w.writerow([repr(r.timestamp), repr(r.freq_hz), repr(r.power_dbm), classify(r, profile)])
    events = "".join(e.to_json() + "\n" for e in monitor(records, profile, authorized))
    ctx.write("compliance-classify", {"verdicts.csv": buf.getvalue(), "events.jsonl": events})


def cmd_los(ctx: _Ctx) -> None:
    h = ctx.args.height if ctx.args.height is not None else ctx.inputs.get("height")
    re_m = ctx.args.earth_radius if ctx.args.earth_radius is not None else ctx.inputs.get("earth_radius", 6_371_000.0)
    if h is None:
        raise ConfigError("los needs --height")
    h, re_m = float(h), float(re_m)
    d = los_range(h, re_m)
    print(repr(d))
    ctx.inputs.update({"height": h, "earth_radius": re_m})
    ctx.write("los", {"los.csv": f"height_m,earth_radius_m,los_range_m\n{h!r},{re_m!r},{d!r}\n"})


def cmd_validate_config(ctx: _Ctx) -> int:
    cfg = ctx.cfg
    report = validate_sources(ZoneLayout(cfg.r0, cfg.guard_width()), scenario_sources(cfg))
    for line in report.to_lines():
        print(line)
    ctx.write("validate-config", {"validation.csv": report.to_csv()})
    return 0 if report.ok else 1


COMMANDS = {
    "simulate-field": cmd_simulate_field,
    "rmse-sweep": cmd_rmse_sweep,
    "rem": cmd_rem,
    "leakage": cmd_leakage,
    "tdoa-sim": cmd_tdoa_sim,
    "tdoa-localize": cmd_tdoa_localize,
    "track": cmd_track,
    "compliance-calibrate": cmd_compliance_calibrate,
    "compliance-classify": cmd_compliance_classify,
    "los": cmd_los,
    "validate-config": cmd_validate_config,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON config or a run manifest to replay")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", default="out", help="output directory (default: ./out)")
    common.add_argument("--workers", type=int, help="parallel worker processes")
    parser = argparse.ArgumentParser(prog="nrdz", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], argument_default=argparse.SUPPRESS)
        if name == "leakage":
            p.add_argument("--ipars", help="IPAR CSV (ipar_id, x_m, y_m, z_m, threshold_dbm)")
        if name == "tdoa-sim":
            p.add_argument("--trajectory", help="trajectory CSV (t_s, x_m, y_m, z_m)")
        if name in ("tdoa-localize", "track", "compliance-calibrate", "compliance-classify"):
            p.add_argument("--input", help="measurement CSV")
        if name == "compliance-classify":
            p.add_argument("--profile", help="profile JSON from compliance-calibrate")
        if name == "los":
            p.add_argument("--height", type=float, help="platform height (m)")
            p.add_argument("--earth-radius", type=float, help="earth radius (m, default 6371000)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    for name in ("ipars", "trajectory", "input", "profile", "height", "earth_radius"):
        if not hasattr(args, name):
            setattr(args, name, None)
    try:
        ctx = _Ctx(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        rc = COMMANDS[args.command](ctx)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (NrdzError, ValueError, np.linalg.LinAlgError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return int(rc or 0)


if __name__ == "__main__":
    sys.exit(main())
