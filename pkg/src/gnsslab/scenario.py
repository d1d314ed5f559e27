"""Ground-truth generation: trajectories, IMU synthesis, satellites, geometry.

Everything downstream (sample synthesis, tracking channels, the navigation
filter) consumes truth produced here. Positions are ECEF meters, angles
radians. Satellite orbits are circular and evaluated directly in the working
frame, so position, velocity and acceleration stay mutually consistent by
construction. Earth rotation enters only through the gravity/Coriolis terms
of the IMU model, controlled by the `earth_rotation` flag.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attitude import (
    dcm_to_quat,
    quat_conj,
    quat_from_rotvec,
    quat_mult,
    quat_to_dcm,
    rotvec_from_quat,
)
from .constants import L1_FREQ, MU_EARTH, OMEGA_EARTH, SPEED_OF_LIGHT, WGS84_A, WGS84_E2
from .geodesy import ecef2llh, enu_matrix, llh2ecef

EARTH_RATE_ECEF = np.array([0.0, 0.0, OMEGA_EARTH])


# ---------------------------------------------------------------------------
# domain types

@dataclass
class TrajectoryState:
    """Vehicle truth at one instant.

    q rotates body vectors into ECEF; omega_b is the body rate relative to
    the working frame (Earth rate is added later by the IMU model).
    """

    t: float
    p_u: np.ndarray
    v_u: np.ndarray
    a_u: np.ndarray
    q: np.ndarray
    omega_b: np.ndarray


@dataclass
class ImuSample:
    """One inertial measurement: specific force and angular rate, body frame.

    The sample at time t is treated as constant over [t, t + 1/rate) by the
    strapdown mechanization.
    """

    t: float
    f_b: np.ndarray
    omega_b: np.ndarray


@dataclass(frozen=True)
class SatelliteTruth:
    """Circular-orbit satellite with a polynomial clock.

    Clock terms are in range units: clock_bias meters, clock_drift m/s,
    clock_jerk m/s^2.
    """

    prn: int
    sma: float
    inc: float
    raan: float
    aol0: float
    clock_bias: float = 0.0
    clock_drift: float = 0.0
    clock_jerk: float = 0.0

    def __post_init__(self):
        if not (1 <= self.prn <= 32):
            raise ValueError(f"prn must be 1..32, got {self.prn}")
        if self.sma <= WGS84_A:
            raise ValueError("orbit semi-major axis below Earth surface")


@dataclass(frozen=True)
class Cn0Schedule:
    """Piecewise-linear carrier-to-noise-density profile.

    segments: tuples (t_start, t_end, level_start, level_end) in seconds and
    dB-Hz. Segments must be contiguous and ordered.
    """

    segments: tuple

    def __post_init__(self):
        if not self.segments:
            raise ValueError("empty schedule")
        prev_end = None
        for seg in self.segments:
            t0, t1, _, _ = seg
            if t1 <= t0:
                raise ValueError(f"segment {seg} has non-positive span")
            if prev_end is not None and abs(t0 - prev_end) > 1e-9:
                raise ValueError("schedule segments must be contiguous")
            prev_end = t1

    @property
    def t_start(self) -> float:
        return self.segments[0][0]

    @property
    def t_end(self) -> float:
        return self.segments[-1][1]

    @classmethod
    def constant(cls, level: float, duration: float) -> "Cn0Schedule":
        return cls(((0.0, float(duration), float(level), float(level)),))

    @classmethod
    def single_ramp(cls, start_level: float, end_level: float, ramp_start: float,
                    ramp_duration: float, total_duration: float) -> "Cn0Schedule":
        """Hold, ramp linearly, then hold the degraded level to the end."""
        t1 = float(ramp_start)
        t2 = t1 + float(ramp_duration)
        if not 0.0 < t1 < t2 <= total_duration:
            raise ValueError("ramp does not fit inside the schedule span")
        return cls((
            (0.0, t1, float(start_level), float(start_level)),
            (t1, t2, float(start_level), float(end_level)),
            (t2, float(total_duration), float(end_level), float(end_level)),
        ))


def cn0_at(schedule: Cn0Schedule, t: float) -> float:
    """Evaluate the schedule at time t (piecewise linear)."""
    if t < schedule.t_start - 1e-9 or t > schedule.t_end + 1e-9:
        raise ValueError(f"t={t} outside schedule span "
                         f"[{schedule.t_start}, {schedule.t_end}]")
    for t0, t1, c0, c1 in schedule.segments:
        if t <= t1 or (t0, t1, c0, c1) == schedule.segments[-1]:
            frac = np.clip((t - t0) / (t1 - t0), 0.0, 1.0)
            return float(c0 + frac * (c1 - c0))
    raise AssertionError("unreachable")


@dataclass(frozen=True)
class ReceiverClock:
    """Receiver clock truth as a polynomial, in range units.

    bias meters, drift m/s, jerk m/s^2; at(t) returns (c*dt_u, c*dt_u_dot).
    """

    bias: float = 0.0
    drift: float = 0.0
    jerk: float = 0.0

    def at(self, t):
        t = np.asarray(t, dtype=float)
        b = self.bias + self.drift * t + 0.5 * self.jerk * t * t
        d = self.drift + self.jerk * t
        if t.ndim == 0:
            return float(b), float(d)
        return b, d


# ---------------------------------------------------------------------------
# gravity

def gravity_ecef(p: np.ndarray, model: str = "point_mass",
                 earth_rotation: bool = True) -> np.ndarray:
    """Effective gravity at ECEF position p.

    point_mass: central attraction, plus the centrifugal term when
    earth_rotation is set (the usual plumb-line gravity). zero: exactly
    zero, for frame-effect tests.
    """
    if model == "zero":
        return np.zeros(3)
    if model != "point_mass":
        raise ValueError(f"unknown gravity model {model!r}")
    r = np.linalg.norm(p)
    g = -MU_EARTH * p / r ** 3
    if earth_rotation:
        g = g + OMEGA_EARTH ** 2 * np.array([p[0], p[1], 0.0])
    return g


# ---------------------------------------------------------------------------
# trajectories

@dataclass
class TrajectoryGrid:
    """Truth sampled on a time grid, stored as stacked arrays."""

    t: np.ndarray
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    q: np.ndarray
    omega_b: np.ndarray

    def __len__(self) -> int:
        return self.t.size

    def state(self, i: int) -> TrajectoryState:
        return TrajectoryState(float(self.t[i]), self.p[i].copy(), self.v[i].copy(),
                               self.a[i].copy(), self.q[i].copy(), self.omega_b[i].copy())

    def states(self) -> list:
        return [self.state(i) for i in range(len(self))]


def _quat_yaw_stack(q_site: np.ndarray, chi: np.ndarray) -> np.ndarray:
    # q_site * q_z(chi) for an array of yaw angles; left multiplication by a
    # fixed quaternion is linear, so use its 4x4 matrix once.
    w, x, y, z = q_site
    m = np.array([
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ])
    half = 0.5 * chi
    qz = np.zeros((chi.size, 4))
    qz[:, 0] = np.cos(half)
    qz[:, 3] = np.sin(half)
    return qz @ m.T


class _SampledTrajectory:
    """Shared evaluation machinery; subclasses implement _eval."""

    t_end: float

    def at(self, t: float) -> TrajectoryState:
        g = self.grid(np.array([float(t)]))
        return g.state(0)

    def grid(self, times: np.ndarray) -> TrajectoryGrid:
        return self._eval(np.asarray(times, dtype=float))

    def sample(self, rate: float) -> list:
        """Uniformly sampled states over [0, t_end] at the given rate."""
        n = int(round(self.t_end * rate)) + 1
        times = np.arange(n) / rate
        return self.grid(times).states()

    def _eval(self, tt: np.ndarray) -> TrajectoryGrid:  # pragma: no cover
        raise NotImplementedError


class StaticTrajectory(_SampledTrajectory):
    """Vehicle parked at a site, body x pointing along the given heading."""

    def __init__(self, center_llh, duration: float, heading: float = 0.0):
        lat, lon, hgt = center_llh
        self.p_site = llh2ecef(lat, lon, hgt)
        self.q_site = dcm_to_quat(enu_matrix(lat, lon))
        self.heading = float(heading)
        self.t_end = float(duration)
        chi = 0.5 * np.pi - self.heading  # heading is from north, chi from east
        self.q0 = quat_mult(self.q_site, np.array(
            [math.cos(0.5 * chi), 0.0, 0.0, math.sin(0.5 * chi)]))

    def _eval(self, tt: np.ndarray) -> TrajectoryGrid:
        n = tt.size
        zeros = np.zeros((n, 3))
        return TrajectoryGrid(
            t=tt.copy(),
            p=np.tile(self.p_site, (n, 1)),
            v=zeros.copy(),
            a=zeros.copy(),
            q=np.tile(self.q0, (n, 1)),
            omega_b=zeros.copy(),
        )


def _ramp_limit(v: float, v_max: float, a_max: float, radius: float) -> float:
    # Tangential acceleration available once the lateral demand v^2/R is
    # taken out of a 1.04*a_max envelope, itself capped at a gentle ramp.
    lat = v * v / radius
    cap = 1.04 * a_max
    avail = cap * cap - lat * lat
    return min(0.7 * a_max, math.sqrt(max(avail, 0.0)))


def _ramp_micro(v_from: float, v_to: float, a_max: float, radius: float,
                dt: float = 1e-3):
    """Envelope- and jerk-limited speed-up micro-knots from v_from to v_to.

    Returns (t, v, s) arrays starting at (0, v_from, 0); v is piecewise
    linear at dt granularity and s its exact integral. The tangential
    acceleration starts at zero, slews at a_max per second, and is braked
    back to zero as the target speed approaches, so the ramp blends into
    cruise segments without an acceleration step.
    """
    jerk = a_max
    t_k = [0.0]
    v_k = [float(v_from)]
    s_k = [0.0]
    a = 0.0
    while v_k[-1] < v_to - 1e-9:
        gap = v_to - v_k[-1]
        a_tgt = min(_ramp_limit(v_k[-1], v_to, a_max, radius),
                    math.sqrt(2.0 * jerk * gap))
        a = min(a + jerk * dt, a_tgt) if a < a_tgt else max(a - jerk * dt, a_tgt)
        if a <= 1e-12:
            break
        v1 = min(v_to, v_k[-1] + a * dt)
        a_eff = (v1 - v_k[-1]) / dt
        t_k.append(t_k[-1] + dt)
        v_k.append(v1)
        s_k.append(s_k[-1] + v_k[-2] * dt + 0.5 * a_eff * dt * dt)
    return np.array(t_k), np.array(v_k), np.array(s_k)


def _cut_at_speed(t: np.ndarray, v: np.ndarray, s: np.ndarray, v_p: float):
    """Truncate ramp micro-knots exactly where the speed reaches v_p."""
    if v_p >= v[-1] - 1e-12:
        return t, v, s
    i = int(np.searchsorted(v, v_p))
    a = (v[i] - v[i - 1]) / (t[i] - t[i - 1])
    d = (v_p - v[i - 1]) / a
    t_cut = t[i - 1] + d
    s_cut = s[i - 1] + v[i - 1] * d + 0.5 * a * d * d
    return (np.append(t[:i], t_cut), np.append(v[:i], v_p),
            np.append(s[:i], s_cut))


def _leg_knots(v_a: float, v_b: float, length: float, v_max: float,
               a_max: float, radius: float, dt: float = 1e-3):
    """Speed-profile knots (t, v, s) for one leg from speed v_a to v_b.

    Accelerates inside the curvature-aware envelope, cruises at v_max if the
    leg is long enough, and decelerates into v_b as the time-mirror of an
    envelope ramp; for short legs the peak speed is cut below v_max so the
    two ramps meet within the available road.
    """
    up = _ramp_micro(v_a, v_max, a_max, radius, dt)
    dn = _ramp_micro(v_b, v_max, a_max, radius, dt)
    if up[1][-1] < v_max - 1e-9 or dn[1][-1] < v_max - 1e-9:
        raise ValueError("speed target unreachable under the envelope")
    if up[2][-1] + dn[2][-1] <= length + 1e-9:
        v_p = v_max
    else:
        lo, hi = max(v_a, v_b), v_max
        if _cut_at_speed(*up, lo)[2][-1] + _cut_at_speed(*dn, lo)[2][-1] > length:
            raise ValueError(f"leg of {length:.1f} m too short for its "
                             "entry/exit speeds under the envelope")
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            need = (_cut_at_speed(*up, mid)[2][-1]
                    + _cut_at_speed(*dn, mid)[2][-1])
            lo, hi = (mid, hi) if need <= length else (lo, mid)
        v_p = lo
    ut, uv, us = _cut_at_speed(*up, v_p)
    dt_, dv_, ds_ = _cut_at_speed(*dn, v_p)
    cruise = max(length - us[-1] - ds_[-1], 0.0)

    tt = [ut]
    vv = [uv]
    ss = [us]
    t0 = ut[-1]
    if cruise > 1e-9:
        t0 = ut[-1] + cruise / v_p
        tt.append(np.array([t0]))
        vv.append(np.array([v_p]))
        ss.append(np.array([us[-1] + cruise]))
    # decelerate: time-mirror of the v_b-side ramp
    tt.append(t0 + (dt_[-1] - dt_[::-1][1:]))
    vv.append(dv_[::-1][1:])
    ss.append(length - ds_[::-1][1:])
    return np.concatenate(tt), np.concatenate(vv), np.concatenate(ss)


def _motion_knots(length: float, v_max: float, a_max: float, radius: float,
                  dt: float = 1e-3, stops: list | None = None):
    """Speed-profile knots (t, v, s) covering a path of the given arc length.

    v is piecewise linear between knots; s is its exact integral. stops is
    an optional ordered list of (arc position, speed) waypoints the profile
    must pass through; the path starts and ends at rest.
    """
    way = [(0.0, 0.0)] + list(stops or ()) + [(length, 0.0)]
    tt, vv, ss = [], [], []
    t_off = 0.0
    for (s0, va), (s1, vb) in zip(way[:-1], way[1:]):
        lt, lv, ls = _leg_knots(va, vb, s1 - s0, v_max, a_max, radius, dt)
        skip = 1 if tt else 0          # legs share their boundary knot
        tt.append(t_off + lt[skip:])
        vv.append(lv[skip:])
        ss.append(s0 + ls[skip:])
        t_off += lt[-1]
    return np.concatenate(tt), np.concatenate(vv), np.concatenate(ss)


class FigureEightTrajectory(_SampledTrajectory):
    """Planar eight-shaped path: two tangent circles traversed alternately.

    The first circle is taken counter-clockwise, the second clockwise; the
    crossing point is the site origin and the heading there is due east.
    The speed profile ramps up inside a curvature-aware acceleration
    envelope, cruises, and ramps down symmetrically, with stationary dwells
    at both ends. Each time the path transits the crossing between circles
    the turn direction reverses, so the lateral acceleration changes sign
    in a step; the profile slows to v_cross through those transits to keep
    the step physically modest (it scales as speed squared). Pass
    v_cross=None to cruise straight through at v_max.
    """

    def __init__(self, center_llh, loop_radius: float = 90.0, n_loops: int = 1,
                 v_max: float = 30.0, a_max: float = 10.0, dwell: float = 10.0,
                 v_cross: float | None = 10.0):
        if v_max <= 0.0 or a_max <= 0.0:
            raise ValueError("v_max and a_max must be positive")
        if loop_radius <= 0.0:
            raise ValueError("loop_radius must be positive")
        if v_cross is not None and not 0.0 < v_cross <= v_max:
            raise ValueError("v_cross must be in (0, v_max] or None")
        if n_loops < 0:
            raise ValueError("n_loops must be >= 0")
        if n_loops > 0 and v_max * v_max / loop_radius > 1.04 * a_max:
            raise ValueError(
                f"radius {loop_radius} m is dynamically infeasible: holding "
                f"{v_max} m/s needs {v_max**2/loop_radius:.1f} m/s^2 lateral, "
                f"over the {1.04*a_max:.1f} m/s^2 envelope")

        lat, lon, hgt = center_llh
        self.p_site = llh2ecef(lat, lon, hgt)
        self.enu = enu_matrix(lat, lon)
        self.q_site = dcm_to_quat(self.enu)
        self.radius = float(loop_radius)
        self.n_loops = int(n_loops)
        self.dwell = float(dwell)
        self.v_cross = None if v_cross is None else float(v_cross)
        self.arc_length = self.n_loops * 4.0 * math.pi * self.radius

        if self.n_loops > 0:
            half_loop = 2.0 * math.pi * self.radius
            stops = None
            if self.v_cross is not None and self.v_cross < v_max:
                stops = [(m * half_loop, self.v_cross)
                         for m in range(1, 2 * self.n_loops)]
            mt, mv, ms = _motion_knots(self.arc_length, v_max, a_max,
                                       self.radius, stops=stops)
        else:
            mt = np.array([0.0])
            mv = np.array([0.0])
            ms = np.array([0.0])

        kt = [mt + self.dwell]
        kv = [mv]
        ks = [ms]
        if self.dwell > 0.0:
            kt.insert(0, np.array([0.0]))
            kv.insert(0, np.array([0.0]))
            ks.insert(0, np.array([0.0]))
            kt.append(np.array([mt[-1] + 2.0 * self.dwell]))
            kv.append(np.array([0.0]))
            ks.append(np.array([self.arc_length]))
        self._kt = np.concatenate(kt)
        self._kv = np.concatenate(kv)
        self._ks = np.concatenate(ks)
        self._ka = np.diff(self._kv) / np.diff(self._kt)

        self.t_motion_start = self.dwell
        self.t_motion_end = self.dwell + float(mt[-1])
        self.t_end = float(self._kt[-1])

    def speed_at(self, t: float) -> float:
        v, _, _ = self._speed(np.array([float(t)]))
        return float(v[0])

    def _speed(self, tt: np.ndarray):
        tc = np.clip(tt, 0.0, self.t_end)
        idx = np.clip(np.searchsorted(self._kt, tc, side="right") - 1,
                      0, self._kt.size - 2)
        d = tc - self._kt[idx]
        a_t = self._ka[idx]
        v = self._kv[idx] + a_t * d
        s = self._ks[idx] + self._kv[idx] * d + 0.5 * a_t * d * d
        return v, s, a_t

    def _eval(self, tt: np.ndarray) -> TrajectoryGrid:
        v, s, a_t = self._speed(tt)
        r = self.radius
        w = np.mod(s / r, 4.0 * math.pi)
        on_second = w > 2.0 * math.pi
        u = np.where(on_second, w - 2.0 * math.pi, w)
        chi = np.where(on_second, 4.0 * math.pi - w, w)
        sigma = np.where(on_second, -1.0, 1.0)

        x = r * np.sin(u)
        y = sigma * r * (1.0 - np.cos(u))
        cos_c, sin_c = np.cos(chi), np.sin(chi)

        moving = v > 0.0
        p_enu = np.column_stack([x, y, np.zeros_like(x)])
        v_enu = np.column_stack([v * cos_c, v * sin_c, np.zeros_like(v)])
        a_lat = np.where(moving, sigma * v * v / r, 0.0)
        a_tan = np.where(moving | (a_t != 0.0), a_t, 0.0)
        a_enu = np.column_stack([a_tan * cos_c - a_lat * sin_c,
                                 a_tan * sin_c + a_lat * cos_c,
                                 np.zeros_like(v)])
        yaw_rate = np.where(moving, sigma * v / r, 0.0)

        e = self.enu
        return TrajectoryGrid(
            t=np.asarray(tt, dtype=float).copy(),
            p=self.p_site + p_enu @ e.T,
            v=v_enu @ e.T,
            a=a_enu @ e.T,
            q=_quat_yaw_stack(self.q_site, chi),
            omega_b=np.column_stack([np.zeros_like(v), np.zeros_like(v), yaw_rate]),
        )


def gen_figure_eight(center_llh, loop_radius: float = 90.0, n_loops: int = 1,
                     v_max: float = 30.0, a_max: float = 10.0, dwell: float = 10.0,
                     rate: float = 100.0, v_cross: float | None = 10.0) -> list:
    """Sampled eight-figure trajectory (list of TrajectoryState)."""
    if rate < 10.0:
        raise ValueError("trajectory sample rate must be at least 10 Hz")
    traj = FigureEightTrajectory(center_llh, loop_radius=loop_radius,
                                 n_loops=n_loops, v_max=v_max, a_max=a_max,
                                 dwell=dwell, v_cross=v_cross)
    return traj.sample(rate)


# ---------------------------------------------------------------------------
# IMU synthesis (inverse strapdown)

@dataclass
class ImuErrors:
    """Additive IMU error model: constant bias plus white noise.

    Noise densities are per sqrt(Hz); the discrete sample deviation is
    density * sqrt(rate).
    """

    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_noise_density: float = 0.0
    gyro_noise_density: float = 0.0


def _imu_grid(traj, rate: float) -> TrajectoryGrid:
    if isinstance(traj, _SampledTrajectory):
        n = int(round(traj.t_end * rate)) + 1
        return traj.grid(np.arange(n) / rate)
    if isinstance(traj, TrajectoryGrid):
        grid = traj
    else:
        states = list(traj)
        grid = TrajectoryGrid(
            t=np.array([s.t for s in states]),
            p=np.array([s.p_u for s in states]),
            v=np.array([s.v_u for s in states]),
            a=np.array([s.a_u for s in states]),
            q=np.array([s.q for s in states]),
            omega_b=np.array([s.omega_b for s in states]),
        )
    dt = np.diff(grid.t)
    if grid.t.size < 2 or np.ptp(dt) > 1e-9:
        raise ValueError("trajectory must be uniformly sampled")
    in_rate = 1.0 / dt[0]
    step = in_rate / rate
    if step < 1.0 - 1e-9:
        raise ValueError(f"trajectory rate {in_rate:.1f} Hz below IMU rate {rate} Hz")
    istep = int(round(step))
    if abs(step - istep) > 1e-6:
        raise ValueError("trajectory rate must be an integer multiple of the IMU rate")
    sl = slice(None, None, istep)
    return TrajectoryGrid(grid.t[sl], grid.p[sl], grid.v[sl], grid.a[sl],
                          grid.q[sl], grid.omega_b[sl])


def synthesize_imu(traj, rate: float, errors: ImuErrors | None = None, *,
                   gravity: str = "point_mass", earth_rotation: bool = True,
                   rng: np.random.Generator | None = None) -> list:
    """Specific force and angular rate that reproduce the trajectory.

    The output is the exact algebraic inverse of the strapdown step used by
    the navigation module: mechanizing these samples from the true initial
    state re-creates the true attitude and velocity to machine precision
    (position differs only by the quadrature rule). Sample k covers
    [t_k, t_k + 1/rate).
    """
    grid = _imu_grid(traj, rate)
    dt = 1.0 / rate
    n = len(grid) - 1
    errors = errors or ImuErrors()

    sig_a = errors.accel_noise_density * math.sqrt(rate)
    sig_g = errors.gyro_noise_density * math.sqrt(rate)
    if (sig_a > 0.0 or sig_g > 0.0) and rng is None:
        rng = np.random.default_rng()

    rot_e = quat_from_rotvec(EARTH_RATE_ECEF * dt) if earth_rotation \
        else np.array([1.0, 0.0, 0.0, 0.0])

    out = []
    for k in range(n):
        q0, q1 = grid.q[k], grid.q[k + 1]
        body_rot = quat_mult(quat_conj(q0), quat_mult(rot_e, q1))
        w_b = rotvec_from_quat(body_rot) / dt

        r_avg = 0.5 * (quat_to_dcm(q0) + quat_to_dcm(q1))
        rhs = (grid.v[k + 1] - grid.v[k]) / dt \
            - gravity_ecef(grid.p[k], gravity, earth_rotation)
        if earth_rotation:
            rhs = rhs + 2.0 * np.cross(EARTH_RATE_ECEF, grid.v[k])
        f_b = np.linalg.solve(r_avg, rhs)

        f_b = f_b + errors.accel_bias
        w_b = w_b + errors.gyro_bias
        if sig_a > 0.0:
            f_b = f_b + sig_a * rng.standard_normal(3)
        if sig_g > 0.0:
            w_b = w_b + sig_g * rng.standard_normal(3)
        out.append(ImuSample(float(grid.t[k]), f_b, w_b))
    return out


# ---------------------------------------------------------------------------
# satellites

def _orbit_basis(sat: SatelliteTruth):
    ci, si = math.cos(sat.inc), math.sin(sat.inc)
    cr, sr = math.cos(sat.raan), math.sin(sat.raan)
    node = np.array([cr, sr, 0.0])
    in_plane = np.array([-sr * ci, cr * ci, si])
    return node, in_plane


def sat_pva(sat: SatelliteTruth, t):
    """Satellite position, velocity, acceleration at time t (scalar or array)."""
    node, in_plane = _orbit_basis(sat)
    n_rate = math.sqrt(MU_EARTH / sat.sma ** 3)
    u = sat.aol0 + n_rate * np.asarray(t, dtype=float)
    cu, su = np.cos(u), np.sin(u)
    p = sat.sma * (np.multiply.outer(cu, node) + np.multiply.outer(su, in_plane))
    v = sat.sma * n_rate * (np.multiply.outer(-su, node) + np.multiply.outer(cu, in_plane))
    a = -(n_rate ** 2) * p
    if np.isscalar(t) or np.ndim(t) == 0:
        return p.reshape(3), v.reshape(3), a.reshape(3)
    return p, v, a


def sat_clock(sat: SatelliteTruth, t):
    """Satellite clock bias (m) and drift (m/s) at time t."""
    t = np.asarray(t, dtype=float)
    bias = sat.clock_bias + sat.clock_drift * t + 0.5 * sat.clock_jerk * t * t
    drift = sat.clock_drift + sat.clock_jerk * t
    if t.ndim == 0:
        return float(bias), float(drift)
    return bias, drift


def satellite_from_az_el(prn: int, az: float, el: float, site_llh,
                         sma: float = 26_560_000.0, retrograde: bool = False,
                         clock_bias: float = 0.0, clock_drift: float = 0.0,
                         clock_jerk: float = 0.0) -> SatelliteTruth:
    """Place a circular orbit so the satellite sits at (az, el) from the site
    at t = 0. Azimuth is from north through east, elevation above the horizon.
    """
    lat, lon, _ = site_llh
    p_u = llh2ecef(*site_llh)
    east, north, up = enu_matrix(lat, lon).T
    los = (math.cos(el) * (math.sin(az) * east + math.cos(az) * north)
           + math.sin(el) * up)
    pr = float(p_u @ los)
    disc = pr * pr + sma * sma - float(p_u @ p_u)
    if disc <= 0.0:
        raise ValueError("orbit radius too small to intersect the line of sight")
    rng0 = -pr + math.sqrt(disc)
    p_s = p_u + rng0 * los

    p_hat = p_s / np.linalg.norm(p_s)
    v_dir = np.cross([0.0, 0.0, 1.0], p_hat)
    if np.linalg.norm(v_dir) < 1e-9:
        v_dir = np.cross([1.0, 0.0, 0.0], p_hat)
    v_hat = v_dir / np.linalg.norm(v_dir)
    if retrograde:
        v_hat = -v_hat

    h_hat = np.cross(p_hat, v_hat)
    inc = math.acos(np.clip(h_hat[2], -1.0, 1.0))
    node = np.cross([0.0, 0.0, 1.0], h_hat)
    if np.linalg.norm(node) < 1e-12:
        node = np.array([1.0, 0.0, 0.0])
        raan = 0.0
    else:
        node = node / np.linalg.norm(node)
        raan = math.atan2(node[1], node[0])
    aol0 = math.atan2(float(np.cross(node, p_hat) @ h_hat), float(node @ p_hat))
    return SatelliteTruth(prn, sma, inc, raan, aol0, clock_bias=clock_bias,
                          clock_drift=clock_drift, clock_jerk=clock_jerk)


# ---------------------------------------------------------------------------
# line-of-sight geometry and Doppler

@dataclass(frozen=True)
class Geometry:
    range: float
    e_rho: np.ndarray
    e_rho_dot: np.ndarray
    elevation: float
    p_s: np.ndarray
    v_s: np.ndarray
    a_s: np.ndarray


def geometry(p_u: np.ndarray, v_u: np.ndarray, sat: SatelliteTruth, t: float) -> Geometry:
    """Range, receiver-to-satellite unit vector and its rate, and elevation."""
    p_s, v_s, a_s = sat_pva(sat, t)
    d = p_s - p_u
    rng = float(np.linalg.norm(d))
    if rng <= 0.0:
        raise ValueError("degenerate geometry: zero range")
    e = d / rng
    v_rel = v_s - v_u
    e_dot = (v_rel - e * float(e @ v_rel)) / rng
    lat, lon, _ = ecef2llh(p_u)
    _, _, up = enu_matrix(lat, lon).T
    elev = math.asin(np.clip(float(e @ up), -1.0, 1.0))
    return Geometry(rng, e, e_dot, elev, p_s, v_s, a_s)


def doppler_shift(e_rho: np.ndarray, v_s: np.ndarray, v_u: np.ndarray,
                  clk_drift_u: float = 0.0, clk_drift_s: float = 0.0) -> float:
    """Carrier Doppler in Hz; positive when the range is closing.

    Clock drifts are in range-rate units (m/s); a fast receiver clock pushes
    the apparent Doppler down.
    """
    rdot = float(e_rho @ (v_s - v_u)) + clk_drift_u - clk_drift_s
    return -(L1_FREQ / SPEED_OF_LIGHT) * rdot


def doppler_shift_rate(e_rho: np.ndarray, e_rho_dot: np.ndarray,
                       v_s: np.ndarray, v_u: np.ndarray,
                       a_s: np.ndarray, a_u: np.ndarray,
                       clk_jerk_u: float = 0.0, clk_jerk_s: float = 0.0) -> float:
    """Time derivative of doppler_shift, Hz/s."""
    v_rel = v_s - v_u
    rddot = float(e_rho_dot @ v_rel) + float(e_rho @ (a_s - a_u)) \
        + clk_jerk_u - clk_jerk_s
    return -(L1_FREQ / SPEED_OF_LIGHT) * rddot
