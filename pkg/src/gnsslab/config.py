"""Scenario configuration: file schema, validation, presets, hashing.

A scenario file is a YAML key/value tree describing the world (trajectory,
satellites, C/N0 schedule, receiver clock, IMU errors, signal settings) plus
the receiver tuning (loop parameters per architecture, navigation filter,
lock detector). Angles are radians and positions are ECEF meters in the
file; presets convert from friendlier units when they are built.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from .geodesy import ecef2llh, llh2ecef
from .scenario import (
    Cn0Schedule,
    FigureEightTrajectory,
    ImuErrors,
    ReceiverClock,
    SatelliteTruth,
    StaticTrajectory,
    satellite_from_az_el,
)


class ConfigError(ValueError):
    """A scenario file failed validation."""


# ---------------------------------------------------------------------------
# schema: section -> {key: (type, default or REQUIRED)}
# ---------------------------------------------------------------------------

_REQ = object()

_TRAJECTORY_KEYS: dict[str, tuple[type | tuple, Any]] = {
    "kind": (str, _REQ),
    "center_ecef": (list, _REQ),
    "loop_radius": (float, 90.0),
    "n_loops": (int, 1),
    "v_max": (float, 30.0),
    "a_max": (float, 10.0),
    "v_cross": ((float, type(None)), 10.0),
    "dwell": (float, 10.0),
    "duration": (float, 60.0),   # static only
    "heading": (float, 0.0),     # static only, radians from north
}

_SAT_KEYS = {
    "prn": (int, _REQ),
    "sma": (float, 26_560_000.0),
    "inc": (float, _REQ),
    "raan": (float, _REQ),
    "aol0": (float, _REQ),
    "clock_bias": (float, 0.0),
    "clock_drift": (float, 0.0),
    "clock_jerk": (float, 0.0),
}

_CLOCK_KEYS = {
    "bias": (float, 0.0),
    "drift": (float, 0.0),
    "jerk": (float, 0.0),
}

_IMU_KEYS = {
    "rate": (float, 100.0),
    "accel_bias": (list, [0.0, 0.0, 0.0]),
    "gyro_bias": (list, [0.0, 0.0, 0.0]),
    "accel_noise_density": (float, 0.0),
    "gyro_noise_density": (float, 0.0),
}

_SIGNAL_KEYS = {
    "fs": (float, 4.0e6),
    "sigma": (float, 1.0),
    "t_int": (float, 1.0e-3),
    "spacing": (float, 0.5),
}

_TRACKING_KEYS = {
    "stl": (dict, {"pll_bw": 10.0, "dll_bw": 1.0, "k_f": 10.0}),
    "alfa": (dict, {"pll_bw": 3.0, "dll_bw": 1.0}),
    "vdfll1": (dict, {"q_fd": 6.4e-3}),
    "vdfll2": (dict, {"q_fd": 6.4e-5}),
    "vdfll": (dict, {"q_tau": 1.0e-6, "q_phi": 1.0e-4, "k_cpg": 0.1,
                     "code_pullin": True}),
    "staleness": (float, 0.5),
}

_NAV_KEYS = {
    "rate": (float, 10.0),
    "ephemeris_warmup": (float, 30.0),
    "clock_jerk_term": (float, 0.0),
    "init": (dict, {"sigma_p": 10.0, "sigma_v": 0.5, "sigma_att_deg": 1.0}),
    "noise": (dict, {"accel_noise": 2.0e-3, "gyro_noise": 1.0e-4,
                     "accel_bias_rw": 1.0e-5, "gyro_bias_rw": 1.0e-7,
                     "clk_qb": 1.0e-2, "clk_qd": 1.0e-3}),
    "mode_switch": (dict, {"min_sats": 4, "cov_gate_m2": 150.0,
                           "dropout_s": 1.0}),
}

_LOCK_KEYS = {
    "cn0_threshold_dbhz": (float, 22.0),
    "indicator_threshold": (float, 0.6),
    "cn0_window_s": (float, 1.0),
    "indicator_window_s": (float, 4.0),
    "debounce_s": (float, 0.5),
    "min_flip_separation_s": (float, 1.0),
}

_TOP_KEYS = {
    "name": (str, "unnamed"),
    "seed": (int, 1),
    "trajectory": (dict, _REQ),
    "satellites": (list, _REQ),
    "cn0_schedule": (list, _REQ),
    "receiver_clock": (dict, {}),
    "imu": (dict, {}),
    "signal": (dict, {}),
    "tracking": (dict, {}),
    "navigation": (dict, {}),
    "lock": (dict, {}),
}

_SECTION_SCHEMAS = {
    "trajectory": _TRAJECTORY_KEYS,
    "receiver_clock": _CLOCK_KEYS,
    "imu": _IMU_KEYS,
    "signal": _SIGNAL_KEYS,
    "tracking": _TRACKING_KEYS,
    "navigation": _NAV_KEYS,
    "lock": _LOCK_KEYS,
}

ARCHITECTURES = ("stl", "vdfll1", "vdfll2", "alfa")


def _coerce(section: str, key: str, want, value):
    """Type-check one leaf; ints are accepted where floats are wanted."""
    if want is float or (isinstance(want, tuple) and float in want):
        if isinstance(value, bool):
            raise ConfigError(f"{section}.{key}: expected a number, got bool")
        if isinstance(value, (int, float)):
            value = float(value)
        elif not (isinstance(want, tuple) and value is None):
            raise ConfigError(f"{section}.{key}: expected a number, "
                              f"got {type(value).__name__}")
        if value is not None and not math.isfinite(value):
            raise ConfigError(f"{section}.{key}: non-finite value")
        return value
    if want is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{section}.{key}: expected an integer, "
                              f"got {type(value).__name__}")
        return value
    if isinstance(want, type) and not isinstance(value, want):
        raise ConfigError(f"{section}.{key}: expected {want.__name__}, "
                          f"got {type(value).__name__}")
    return value


def _apply_schema(section: str, raw: Mapping, schema: Mapping) -> dict:
    if not isinstance(raw, Mapping):
        raise ConfigError(f"section '{section}' must be a mapping")
    unknown = set(raw) - set(schema)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: "
                          f"{', '.join(sorted(unknown))}")
    out = {}
    for key, (want, default) in schema.items():
        if key in raw:
            out[key] = _coerce(section, key, want, raw[key])
        elif default is _REQ:
            raise ConfigError(f"{section}.{key} is required")
        else:
            out[key] = json.loads(json.dumps(default))  # deep copy
    return out


def _merge_defaults(section: str, given: Mapping, defaults: Mapping) -> dict:
    """Shallow merge for the small nested blocks (tracking.stl etc.)."""
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: "
                          f"{', '.join(sorted(unknown))}")
    out = dict(defaults)
    for k, v in given.items():
        want = bool if isinstance(defaults[k], bool) else float
        if want is bool:
            if not isinstance(v, bool):
                raise ConfigError(f"{section}.{k}: expected a boolean")
            out[k] = v
        else:
            out[k] = _coerce(section, k, float, v)
    return out


def _vec3(section: str, key: str, value) -> list[float]:
    if (not isinstance(value, (list, tuple)) or len(value) != 3
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                       for v in value)):
        raise ConfigError(f"{section}.{key}: expected three numbers")
    return [float(v) for v in value]


# ---------------------------------------------------------------------------
# the validated configuration object
# ---------------------------------------------------------------------------

@dataclass
class ScenarioConfig:
    """Validated scenario: normalized dict plus typed builders.

    ``data`` is the fully normalized tree (defaults applied), which is also
    what the scenario hash and ``save`` operate on, so a file that spells
    out a default hashes the same as one that omits it.
    """

    data: dict = field(repr=False)

    @property
    def name(self) -> str:
        return self.data["name"]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def t_int(self) -> float:
        return self.data["signal"]["t_int"]

    @property
    def nav_rate(self) -> float:
        return self.data["navigation"]["rate"]

    @property
    def imu_rate(self) -> float:
        return self.data["imu"]["rate"]

    def scenario_hash(self) -> str:
        return scenario_hash(self.data)

    def build_trajectory(self):
        tr = self.data["trajectory"]
        llh = ecef2llh(np.asarray(tr["center_ecef"], dtype=float))
        if tr["kind"] == "figure-eight":
            return FigureEightTrajectory(
                llh, loop_radius=tr["loop_radius"], n_loops=tr["n_loops"],
                v_max=tr["v_max"], a_max=tr["a_max"], dwell=tr["dwell"],
                v_cross=tr["v_cross"])
        return StaticTrajectory(llh, duration=tr["duration"],
                                heading=tr["heading"])

    def build_satellites(self) -> list[SatelliteTruth]:
        return [SatelliteTruth(s["prn"], s["sma"], s["inc"], s["raan"],
                               s["aol0"], clock_bias=s["clock_bias"],
                               clock_drift=s["clock_drift"],
                               clock_jerk=s["clock_jerk"])
                for s in self.data["satellites"]]

    def build_schedule(self) -> Cn0Schedule:
        return Cn0Schedule(tuple(tuple(seg)
                                 for seg in self.data["cn0_schedule"]))

    def build_clock(self) -> ReceiverClock:
        c = self.data["receiver_clock"]
        return ReceiverClock(bias=c["bias"], drift=c["drift"], jerk=c["jerk"])

    def build_imu_errors(self) -> ImuErrors:
        u = self.data["imu"]
        return ImuErrors(
            accel_bias=np.asarray(u["accel_bias"], dtype=float),
            gyro_bias=np.asarray(u["gyro_bias"], dtype=float),
            accel_noise_density=u["accel_noise_density"],
            gyro_noise_density=u["gyro_noise_density"])

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(yaml.safe_dump(self.data, sort_keys=False,
                                       default_flow_style=None))
        return path


def scenario_hash(data: Mapping) -> str:
    """sha256 of the canonical JSON form of a normalized config tree."""
    canon = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def _validate(raw: Mapping) -> dict:
    if not isinstance(raw, Mapping):
        raise ConfigError("config root must be a mapping")
    data = _apply_schema("<root>", raw, _TOP_KEYS)

    for section, schema in _SECTION_SCHEMAS.items():
        data[section] = _apply_schema(section, data[section], schema)

    tr = data["trajectory"]
    if tr["kind"] not in ("figure-eight", "static"):
        raise ConfigError(f"trajectory.kind '{tr['kind']}' not recognized "
                          "(figure-eight or static)")
    tr["center_ecef"] = _vec3("trajectory", "center_ecef", tr["center_ecef"])
    if np.linalg.norm(tr["center_ecef"]) < 6.0e6:
        raise ConfigError("trajectory.center_ecef is inside the Earth")

    sats = data["satellites"]
    if not sats:
        raise ConfigError("at least one satellite required")
    norm_sats = []
    seen = set()
    for i, s in enumerate(sats):
        s = _apply_schema(f"satellites[{i}]", s, _SAT_KEYS)
        if s["prn"] in seen:
            raise ConfigError(f"duplicate prn {s['prn']}")
        seen.add(s["prn"])
        norm_sats.append(s)
    data["satellites"] = norm_sats

    segs = data["cn0_schedule"]
    if not segs:
        raise ConfigError("cn0_schedule must have at least one segment")
    norm = []
    for i, seg in enumerate(segs):
        if not isinstance(seg, (list, tuple)) or len(seg) != 4:
            raise ConfigError(f"cn0_schedule[{i}]: expected "
                              "[t_start, t_end, level_start, level_end]")
        norm.append([float(v) for v in seg])
    data["cn0_schedule"] = norm

    u = data["imu"]
    u["accel_bias"] = _vec3("imu", "accel_bias", u["accel_bias"])
    u["gyro_bias"] = _vec3("imu", "gyro_bias", u["gyro_bias"])

    trk = data["tracking"]
    for arch, dflt in (("stl", _TRACKING_KEYS["stl"][1]),
                       ("alfa", _TRACKING_KEYS["alfa"][1]),
                       ("vdfll1", _TRACKING_KEYS["vdfll1"][1]),
                       ("vdfll2", _TRACKING_KEYS["vdfll2"][1]),
                       ("vdfll", _TRACKING_KEYS["vdfll"][1])):
        trk[arch] = _merge_defaults(f"tracking.{arch}", trk[arch], dflt)
    nav = data["navigation"]
    for blk in ("init", "noise", "mode_switch"):
        nav[blk] = _merge_defaults(f"navigation.{blk}", nav[blk],
                                   _NAV_KEYS[blk][1])
    nav["mode_switch"]["min_sats"] = int(nav["mode_switch"]["min_sats"])

    _check_consistency(data)
    return data


def _check_consistency(data: dict) -> None:
    """Cross-field rules that simple leaf typing cannot express."""
    t_i = data["signal"]["t_int"]
    if abs(t_i - 1.0e-3) > 1e-12:
        raise ConfigError("signal.t_int: only the 1 ms integration grid is "
                          "supported (navigation-bit boundaries are hard-"
                          "wired to 20 integration epochs)")
    nav_dt = 1.0 / data["navigation"]["rate"]
    chunk = nav_dt / t_i
    if abs(chunk - round(chunk)) > 1e-9 or round(chunk) < 20:
        raise ConfigError("navigation.rate must yield a whole number of "
                          "integration epochs per update (and at least 20)")
    imu_per_nav = data["imu"]["rate"] / data["navigation"]["rate"]
    if abs(imu_per_nav - round(imu_per_nav)) > 1e-9 or imu_per_nav < 1:
        raise ConfigError("imu.rate must be an integer multiple of "
                          "navigation.rate")
    if not 0.0 < data["signal"]["spacing"] <= 1.0:
        raise ConfigError("signal.spacing must be in (0, 1] chips")
    if data["signal"]["fs"] < 2.2e6:
        raise ConfigError("signal.fs below the L1 C/A main lobe")
    for k in ("pll_bw", "dll_bw"):
        if data["tracking"]["stl"][k] <= 0 or data["tracking"]["alfa"][k] <= 0:
            raise ConfigError(f"tracking bandwidths must be positive ({k})")

    # the schedule has to cover the whole scenario span, so the trajectory
    # and the schedule are only checkable together
    try:
        sched = Cn0Schedule(tuple(tuple(s) for s in data["cn0_schedule"]))
    except ValueError as e:
        raise ConfigError(f"cn0_schedule: {e}") from None
    cfg = ScenarioConfig(data)
    try:
        traj = cfg.build_trajectory()
        for s in cfg.build_satellites():
            del s
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if sched.t_start > 1e-9 or sched.t_end < traj.t_end - 1e-9:
        raise ConfigError(
            f"cn0_schedule spans [{sched.t_start}, {sched.t_end}] but the "
            f"scenario runs to t={traj.t_end:.3f}")


def load_config(path) -> ScenarioConfig:
    """Parse and validate a scenario file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from None
    return loads_config(text)


def loads_config(text: str) -> ScenarioConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"not valid YAML: {e}") from None
    return ScenarioConfig(_validate(raw))


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

# Mid-latitude site with a full sky: one satellite per elevation band from
# just above the mask to near zenith, azimuths spread to give a sane DOP.
_SITE_LLH = (math.radians(43.60), math.radians(1.44), 150.0)
_SKY = (
    (29, 40.0, 11.0, 120.0, 0.015),
    (25, 110.0, 20.0, -45.0, -0.008),
    (19, 175.0, 28.0, 260.0, 0.021),
    (12, 250.0, 35.0, -310.0, 0.004),
    (2, 305.0, 45.0, 75.0, -0.017),
    (6, 20.0, 55.0, -150.0, 0.011),
    (17, 135.0, 65.0, 420.0, -0.002),
    (24, 330.0, 75.0, -90.0, 0.009),
)


def _sky_satellites() -> list[dict]:
    out = []
    for prn, az, el, cb, cd in _SKY:
        sat = satellite_from_az_el(prn, math.radians(az), math.radians(el),
                                   _SITE_LLH, clock_bias=cb, clock_drift=cd)
        out.append({"prn": sat.prn, "sma": sat.sma, "inc": sat.inc,
                    "raan": sat.raan, "aol0": sat.aol0,
                    "clock_bias": sat.clock_bias,
                    "clock_drift": sat.clock_drift,
                    "clock_jerk": sat.clock_jerk})
    return out


def figure_eight_preset() -> ScenarioConfig:
    """The benchmark scenario: a minute-scale figure-eight under a staged
    C/N0 drop.

    Peak dynamics 30 m/s and 10 m/s^2 on a 90 m loop radius; the C/N0
    starts at 50 dB-Hz and steps down through 40 and 30 to 25 with 2-3 s
    ramps between plateaus. Aiding engages at t = 10 s (end of the initial
    dwell), so every plateau after the first is observed by the aided or
    vector modes.
    """
    center = llh2ecef(*_SITE_LLH)
    traj = FigureEightTrajectory(_SITE_LLH)
    t_end = traj.t_end
    raw = {
        "name": "figure-eight",
        "seed": 1,
        "trajectory": {
            "kind": "figure-eight",
            "center_ecef": [float(v) for v in center],
            "loop_radius": 90.0,
            "n_loops": 1,
            "v_max": 30.0,
            "a_max": 10.0,
            "v_cross": 10.0,
            "dwell": 10.0,
        },
        "satellites": _sky_satellites(),
        "cn0_schedule": [
            [0.0, 20.0, 50.0, 50.0],
            [20.0, 22.0, 50.0, 40.0],
            [22.0, 30.0, 40.0, 40.0],
            [30.0, 33.0, 40.0, 30.0],
            [33.0, 41.0, 30.0, 30.0],
            [41.0, 43.0, 30.0, 25.0],
            [43.0, math.ceil(t_end) + 1.0, 25.0, 25.0],
        ],
        "receiver_clock": {"bias": 15.0, "drift": 0.5},
        "imu": {
            "rate": 100.0,
            "accel_bias": [2.0e-3, -1.5e-3, 1.0e-3],
            "gyro_bias": [2.0e-5, -1.0e-5, 1.5e-5],
            "accel_noise_density": 2.0e-3,
            "gyro_noise_density": 1.0e-4,
        },
        "navigation": {"ephemeris_warmup": 5.0},
    }
    return ScenarioConfig(_validate(raw))


def static_preset(duration: float = 30.0, cn0: float = 50.0,
                  seed: int = 1) -> ScenarioConfig:
    """Parked receiver under constant C/N0 (bring-up and sanity runs)."""
    center = llh2ecef(*_SITE_LLH)
    raw = {
        "name": "static",
        "seed": seed,
        "trajectory": {
            "kind": "static",
            "center_ecef": [float(v) for v in center],
            "duration": float(duration),
        },
        "satellites": _sky_satellites(),
        "cn0_schedule": [[0.0, float(duration) + 1.0, float(cn0), float(cn0)]],
        "receiver_clock": {"bias": 15.0, "drift": 0.5},
        "imu": {
            "rate": 100.0,
            "accel_noise_density": 2.0e-3,
            "gyro_noise_density": 1.0e-4,
        },
        "navigation": {"ephemeris_warmup": 10.0},
    }
    return ScenarioConfig(_validate(raw))


PRESETS = {
    "figure-eight": figure_eight_preset,
    "static": static_preset,
}
