"""Strapdown INS mechanization and the tightly coupled navigation EKF.

The nominal state (position, velocity, attitude quaternion, IMU biases,
receiver clock) propagates through ``ins_mechanize`` at the IMU rate.  A
17-element error state rides along in covariance form only: corrections are
estimated from pseudorange/Doppler observations, folded into the nominal
state, and zeroed at every update (closed-loop error-state form).

The strapdown step here is the algebraic inverse of the IMU synthesis in
the scenario module: mechanizing error-free samples from the true initial
state reproduces truth attitude and velocity to machine precision.

Also here: the per-satellite feedback the channels consume (predicted
pseudorange, range rate and Doppler rate) and the scalar/vector mode
switch with dropout hysteresis.

Error-state convention: delta = truth minus estimate, attitude error as a
small rotation theta with C_true = (I + [theta x]) C_est.  State order:
[dp(3), dv(3), dtheta(3), db_a(3), db_g(3), dclk_b, dclk_d].
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

import numpy as np

from .attitude import (
    quat_from_rotvec,
    quat_mult,
    quat_normalize,
    quat_to_dcm,
    skew,
)
from .constants import DOPPLER_PER_MPS, MU_EARTH, OMEGA_EARTH
from .loops import ChannelFeedback, ChannelObservation
from .scenario import (
    EARTH_RATE_ECEF,
    ImuSample,
    SatelliteTruth,
    doppler_shift,
    doppler_shift_rate,
    gravity_ecef,
    sat_clock,
    sat_pva,
)

__all__ = [
    "NavState",
    "NavNoise",
    "EkfErrorState",
    "SatEpoch",
    "AidingSet",
    "ModeSwitch",
    "sat_epoch",
    "init_nav",
    "ins_mechanize",
    "accel_ecef",
    "ekf_propagate",
    "ekf_update",
    "predict_pseudorange",
    "doppler_predict",
    "doppler_rate",
    "make_feedback",
]

N_ERR = 17
_P, _V, _TH, _BA, _BG = slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15)
_CB, _CD = 15, 16


@dataclass(frozen=True)
class NavState:
    """Nominal navigation state in ECEF.

    Clock states are in range units: ``clk_b`` metres, ``clk_d`` m/s.
    """

    p: np.ndarray
    v: np.ndarray
    q: np.ndarray
    b_a: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_g: np.ndarray = field(default_factory=lambda: np.zeros(3))
    clk_b: float = 0.0
    clk_d: float = 0.0

    def __post_init__(self) -> None:
        for name in ("p", "v", "q", "b_a", "b_g"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if abs(np.linalg.norm(self.q) - 1.0) > 1e-9:
            raise ValueError("attitude quaternion must be unit norm")


@dataclass(frozen=True)
class NavNoise:
    """Continuous-time noise densities driving the error covariance.

    accel/gyro noise: (m/s^2)/sqrt(Hz), (rad/s)/sqrt(Hz); bias random
    walks: (m/s^2)/sqrt(s), (rad/s)/sqrt(s); clock: qb m^2/s (phase),
    qd m^2/s^3 (frequency).
    """

    accel_noise: float = 2e-3
    gyro_noise: float = 1e-4
    accel_bias_rw: float = 1e-5
    gyro_bias_rw: float = 1e-7
    clk_qb: float = 1e-2
    clk_qd: float = 1e-3


@dataclass(frozen=True)
class EkfErrorState:
    """Covariance of the 17-element error state (the mean is always zero
    between updates because corrections are folded immediately)."""

    P: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.P, dtype=float)
        object.__setattr__(self, "P", p)
        if p.shape != (N_ERR, N_ERR):
            raise ValueError(f"covariance must be {N_ERR}x{N_ERR}")
        if not np.allclose(p, p.T, atol=1e-9):
            raise ValueError("covariance must be symmetric")


@dataclass(frozen=True)
class SatEpoch:
    """One satellite's truth kinematics and clock at a navigation epoch."""

    prn: int
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    cdt: float
    cdt_dot: float


def sat_epoch(sat: SatelliteTruth, t: float) -> SatEpoch:
    p, v, a = sat_pva(sat, t)
    cdt, cdt_dot = sat_clock(sat, t)
    return SatEpoch(sat.prn, p, v, a, cdt, cdt_dot)


def init_nav(
    p: np.ndarray,
    v: np.ndarray,
    q: np.ndarray,
    clk_b: float = 0.0,
    clk_d: float = 0.0,
    *,
    rng: np.random.Generator | None = None,
    sigma_p: float = 10.0,
    sigma_v: float = 0.5,
    sigma_att_deg: float = 1.0,
    sigma_ba: float = 0.01,
    sigma_bg: float = 1e-4,
    sigma_cb: float = 30.0,
    sigma_cd: float = 3.0,
) -> tuple[NavState, EkfErrorState]:
    """Seed the filter near a reference state.

    With an ``rng`` the nominal state is perturbed by the given sigmas
    (position/velocity/attitude only; biases start at zero); without one
    the reference is used as-is.  The initial covariance always reflects
    the sigmas.
    """
    p = np.asarray(p, dtype=float).copy()
    v = np.asarray(v, dtype=float).copy()
    q = quat_normalize(np.asarray(q, dtype=float))
    sig_att = math.radians(sigma_att_deg)
    if rng is not None:
        p = p + sigma_p * rng.standard_normal(3)
        v = v + sigma_v * rng.standard_normal(3)
        q = quat_normalize(quat_mult(quat_from_rotvec(
            sig_att * rng.standard_normal(3)), q))
        clk_b = clk_b + sigma_cb * rng.standard_normal()
        clk_d = clk_d + sigma_cd * rng.standard_normal()
    diag = np.concatenate([
        np.full(3, sigma_p ** 2), np.full(3, sigma_v ** 2),
        np.full(3, sig_att ** 2), np.full(3, sigma_ba ** 2),
        np.full(3, sigma_bg ** 2), [sigma_cb ** 2, sigma_cd ** 2]])
    nav = NavState(p=p, v=v, q=q, clk_b=float(clk_b), clk_d=float(clk_d))
    return nav, EkfErrorState(P=np.diag(diag))


# ---------------------------------------------------------------------------
# Strapdown mechanization

def ins_mechanize(
    nav: NavState,
    imu: ImuSample,
    dt: float,
    *,
    gravity: str = "point_mass",
    earth_rotation: bool = True,
) -> NavState:
    """One trapezoidal strapdown step in ECEF.

    Attitude advances by the bias-corrected gyro increment (with the earth
    rate removed when modeled); velocity uses the average of the old and
    new attitude matrices on the bias-corrected specific force plus gravity
    and Coriolis; position integrates the velocity trapezoid; the clock
    bias integrates the drift.
    """
    w_b = imu.omega_b - nav.b_g
    f_b = imu.f_b - nav.b_a
    if earth_rotation:
        q_earth = quat_from_rotvec(-EARTH_RATE_ECEF * dt)
        q1 = quat_mult(q_earth, quat_mult(nav.q, quat_from_rotvec(w_b * dt)))
    else:
        q1 = quat_mult(nav.q, quat_from_rotvec(w_b * dt))
    q1 = quat_normalize(q1)

    r_avg = 0.5 * (quat_to_dcm(nav.q) + quat_to_dcm(q1))
    acc = r_avg @ f_b + gravity_ecef(nav.p, gravity, earth_rotation)
    if earth_rotation:
        acc = acc - 2.0 * np.cross(EARTH_RATE_ECEF, nav.v)
    v1 = nav.v + acc * dt
    p1 = nav.p + 0.5 * (nav.v + v1) * dt
    return replace(nav, p=p1, v=v1, q=q1, clk_b=nav.clk_b + nav.clk_d * dt)


def accel_ecef(
    nav: NavState,
    imu: ImuSample,
    *,
    gravity: str = "point_mass",
    earth_rotation: bool = True,
) -> np.ndarray:
    """Total ECEF acceleration implied by the current IMU sample."""
    acc = quat_to_dcm(nav.q) @ (imu.f_b - nav.b_a) \
        + gravity_ecef(nav.p, gravity, earth_rotation)
    if earth_rotation:
        acc = acc - 2.0 * np.cross(EARTH_RATE_ECEF, nav.v)
    return acc


# ---------------------------------------------------------------------------
# Error-state propagation

def _gravity_gradient(p: np.ndarray, earth_rotation: bool) -> np.ndarray:
    r = float(np.linalg.norm(p))
    u = p / r
    grad = -MU_EARTH / r ** 3 * (np.eye(3) - 3.0 * np.outer(u, u))
    if earth_rotation:
        grad = grad + OMEGA_EARTH ** 2 * np.diag([1.0, 1.0, 0.0])
    return grad


def ekf_propagate(
    err: EkfErrorState,
    nav: NavState,
    imu: ImuSample,
    dt: float,
    noise: NavNoise = NavNoise(),
    *,
    gravity: str = "point_mass",
    earth_rotation: bool = True,
) -> EkfErrorState:
    """First-order covariance propagation linearized about the nominal
    state; the clock block uses the exact two-state discretization."""
    c = quat_to_dcm(nav.q)
    f_e = c @ (imu.f_b - nav.b_a)

    a = np.zeros((N_ERR, N_ERR))
    a[_P, _V] = np.eye(3)
    if gravity != "zero":
        a[_V, _P] = _gravity_gradient(nav.p, earth_rotation)
    a[_V, _TH] = -skew(f_e)
    a[_V, _BA] = -c
    a[_TH, _BG] = -c
    if earth_rotation:
        w = skew(EARTH_RATE_ECEF)
        a[_V, _V] = -2.0 * w
        a[_TH, _TH] = -w
    a[_CB, _CD] = 1.0

    phi = np.eye(N_ERR) + a * dt

    qd = np.zeros((N_ERR, N_ERR))
    qd[_V, _V] = noise.accel_noise ** 2 * dt * np.eye(3)
    qd[_TH, _TH] = noise.gyro_noise ** 2 * dt * np.eye(3)
    qd[_BA, _BA] = noise.accel_bias_rw ** 2 * dt * np.eye(3)
    qd[_BG, _BG] = noise.gyro_bias_rw ** 2 * dt * np.eye(3)
    qd[_CB, _CB] = noise.clk_qb * dt + noise.clk_qd * dt ** 3 / 3.0
    qd[_CB, _CD] = qd[_CD, _CB] = noise.clk_qd * dt ** 2 / 2.0
    qd[_CD, _CD] = noise.clk_qd * dt

    p1 = phi @ err.P @ phi.T + qd
    return EkfErrorState(P=0.5 * (p1 + p1.T))


# ---------------------------------------------------------------------------
# Measurement model and update

def predict_pseudorange(nav: NavState, s: SatEpoch) -> float:
    return float(np.linalg.norm(s.p - nav.p)) + nav.clk_b - s.cdt


def doppler_predict(nav: NavState, s: SatEpoch) -> float:
    """Carrier Doppler the receiver should observe for this satellite,
    using the same convention as the signal synthesizer."""
    d = s.p - nav.p
    e = d / np.linalg.norm(d)
    return doppler_shift(e, s.v, nav.v, nav.clk_d, s.cdt_dot)


def doppler_rate(
    nav: NavState,
    s: SatEpoch,
    a_u: np.ndarray,
    clk_jerk: float = 0.0,
) -> float:
    """Doppler rate for the current geometry and user acceleration, Hz/s.

    ``a_u`` is the total ECEF acceleration (see ``accel_ecef``).  The
    receiver clock jerk defaults to zero: it is unobservable from the
    two-state clock model.
    """
    d = s.p - nav.p
    r = float(np.linalg.norm(d))
    e = d / r
    v_rel = s.v - nav.v
    e_dot = (v_rel - e * float(e @ v_rel)) / r
    return doppler_shift_rate(e, e_dot, s.v, nav.v, s.a, a_u,
                              clk_jerk, 0.0)


def _fold(nav: NavState, dx: np.ndarray) -> NavState:
    q = quat_normalize(quat_mult(quat_from_rotvec(dx[_TH]), nav.q))
    return NavState(
        p=nav.p + dx[_P], v=nav.v + dx[_V], q=q,
        b_a=nav.b_a + dx[_BA], b_g=nav.b_g + dx[_BG],
        clk_b=nav.clk_b + dx[_CB], clk_d=nav.clk_d + dx[_CD])


def ekf_update(
    err: EkfErrorState,
    nav: NavState,
    obs: Iterable[ChannelObservation],
    sats: Mapping[int, SatEpoch],
    r_map: Mapping[int, tuple[float, float]],
    *,
    gate_sigma: float = 5.0,
) -> tuple[EkfErrorState, NavState]:
    """Fold a batch of pseudorange/Doppler observations into the state.

    ``r_map`` gives per-satellite measurement variances (m^2, Hz^2).
    Scalars are processed sequentially in Joseph form; innovations beyond
    ``gate_sigma`` are discarded.  If every scalar is gated the update is
    skipped with a warning.
    """
    obs = list(obs)
    if not obs:
        raise ValueError("at least one observation required")
    p = err.P.copy()
    dx = np.zeros(N_ERR)
    used = 0
    k_d = DOPPLER_PER_MPS
    for ob in obs:
        s = sats[ob.prn]
        var_rho, var_fd = r_map[ob.prn]
        d = s.p - (nav.p + dx[_P])
        rng = float(np.linalg.norm(d))
        e = d / rng

        h_rho = np.zeros(N_ERR)
        h_rho[_P] = -e
        h_rho[_CB] = 1.0
        pred = rng + (nav.clk_b + dx[_CB]) - s.cdt
        used += _scalar_update(p, dx, h_rho, ob.rho_tilde - pred, var_rho,
                               gate_sigma)

        h_fd = np.zeros(N_ERR)
        h_fd[_V] = k_d * e
        h_fd[_CD] = -k_d
        pred = doppler_shift(e, s.v, nav.v + dx[_V],
                             nav.clk_d + dx[_CD], s.cdt_dot)
        used += _scalar_update(p, dx, h_fd, ob.fd_tilde - pred, var_fd,
                               gate_sigma)
    if used == 0:
        warnings.warn("all observations gated out; update skipped",
                      stacklevel=2)
        return err, nav
    w = np.linalg.eigvalsh(p)
    if w.min() < -1e-9:
        warnings.warn("navigation covariance lost PSD; clamping",
                      stacklevel=2)
        vals, vecs = np.linalg.eigh(p)
        p = (vecs * np.maximum(vals, 0.0)) @ vecs.T
        p = 0.5 * (p + p.T)
    return EkfErrorState(P=p), _fold(nav, dx)


def _scalar_update(p, dx, h, innov, var, gate_sigma) -> int:
    """One sequential scalar Joseph-form update, in place; returns 1 if
    the measurement passed the gate."""
    s = float(h @ p @ h) + var
    if innov * innov > gate_sigma * gate_sigma * s:
        return 0
    k = (p @ h) / s
    dx += k * innov
    ikh = np.eye(N_ERR) - np.outer(k, h)
    p[:] = ikh @ p @ ikh.T + var * np.outer(k, k)
    p[:] = 0.5 * (p + p.T)
    return 1


# ---------------------------------------------------------------------------
# Feedback generation and mode switching

@dataclass(frozen=True)
class AidingSet:
    """Per-satellite predictions published to the channels at one epoch."""

    t: float
    entries: dict[int, ChannelFeedback]

    def __iter__(self):
        return iter(self.entries.values())


def make_feedback(
    nav: NavState,
    sats: Mapping[int, SatEpoch],
    imu: ImuSample,
    t: float,
    locked: Iterable[int] | None = None,
    *,
    gravity: str = "point_mass",
    earth_rotation: bool = True,
) -> AidingSet:
    """Predicted pseudorange, range rate and Doppler rate per satellite.

    Only satellites in ``locked`` (default: all in ``sats``) get entries.
    Range rate and Doppler rate are tied by the carrier scale, so either
    feedback set drives the channels consistently.
    """
    a_u = accel_ecef(nav, imu, gravity=gravity, earth_rotation=earth_rotation)
    prns = set(sats if locked is None else locked)
    entries = {}
    for prn in sorted(prns):
        s = sats[prn]
        d = s.p - nav.p
        r = float(np.linalg.norm(d))
        e = d / r
        rho_dot = float(e @ (s.v - nav.v)) + nav.clk_d - s.cdt_dot
        entries[prn] = ChannelFeedback(
            prn=prn,
            rho=r + nav.clk_b - s.cdt,
            rho_dot=rho_dot,
            fd_dot=doppler_rate(nav, s, a_u),
            t=t,
        )
    return AidingSet(t=t, entries=entries)


class ModeSwitch:
    """Scalar/vector tracking mode decision with dropout hysteresis.

    Vector mode engages once at least ``min_sats`` channels track with
    valid ephemeris, the warm-up time has passed and the position
    covariance trace is under the gate.  A dropout below ``min_sats`` must
    persist longer than ``dropout_s`` before falling back to scalar mode.
    """

    def __init__(self, min_sats: int = 4, cov_gate_m2: float = 150.0,
                 dropout_s: float = 1.0, warmup_s: float = 0.0):
        self.min_sats = min_sats
        self.cov_gate_m2 = cov_gate_m2
        self.dropout_s = dropout_s
        self.warmup_s = warmup_s
        self.mode = "stl"
        self.t_switch: float | None = None
        self._below_since: float | None = None

    def step(self, t: float, tracked: Iterable[int],
             ephemeris_valid: Iterable[int], cov_trace_pos: float) -> str:
        n = len(set(tracked) & set(ephemeris_valid))
        if self.mode == "stl":
            if (n >= self.min_sats and t >= self.warmup_s
                    and cov_trace_pos < self.cov_gate_m2):
                self.mode = "vtl"
                self.t_switch = t
                self._below_since = None
        else:
            if n < self.min_sats:
                if self._below_since is None:
                    self._below_since = t
                elif t - self._below_since > self.dropout_s:
                    self.mode = "stl"
                    self._below_since = None
            else:
                self._below_since = None
        return self.mode
