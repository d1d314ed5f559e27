"""Tracking-loop closure strategies and the channel-to-navigation glue blocks.

Three ways to turn discriminator outputs into NCO commands live here:

* a classical second-order FLL-assisted PLL with carrier-aided first-order
  DLL (``stl_update``),
* the same filter topology with the FLL assist replaced by an externally
  supplied Doppler-rate feed (``alfa_update``),
* a three-state per-channel Kalman estimator over (code error, phase error,
  Doppler error) used as a loop filter (``kf_*``).

The module also provides the observation generator that converts NCO state
into pseudorange/Doppler measurements for the navigation filter, and the
control generator that converts predicted range/range-rate back into NCO
commands when the channels run vector-locked.

All update functions are pure: they take a state, return a new state.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .channel import ChannelNcoState, DiscriminatorOutputs
from .constants import (
    CA_CHIP_RATE,
    CODE_CARRIER_RATIO,
    DOPPLER_PER_MPS,
    SPEED_OF_LIGHT,
)

__all__ = [
    "ControlParams",
    "AlfaFilterState",
    "KfChannelState",
    "ChannelObservation",
    "ChannelFeedback",
    "ZERO_CONTROL",
    "F_PLL_SANITY_HZ",
    "VDFLL1_QFD",
    "VDFLL2_QFD",
    "gains_from_bandwidth",
    "stl_update",
    "alfa_update",
    "variance_from_cn0",
    "kf_init",
    "kf_predict",
    "kf_update_meas",
    "kf_rereference",
    "kf_extract_control",
    "kf_channel_update",
    "og_generate",
    "cpg",
]

# Hard sanity bound on any carrier command.  Terrestrial L1 Doppler plus a
# badly drifting clock stays within a few tens of kHz; anything beyond this
# is a diverged loop, so the filters saturate a little below the bound.
F_PLL_SANITY_HZ = 50_000.0
_F_PLL_SAT_HZ = 45_000.0

# Doppler-state process noise of the two vector-lock tunings, Hz^2 per step.
VDFLL1_QFD = 6.4e-3
VDFLL2_QFD = 6.4e-5

# Measurement-variance scale constants at 0 dB-Hz: chips^2, cycles^2, Hz^2.
_VAR0_TAU = 62.5
_VAR0_PHI = 7.124
_VAR0_FD = 4.45e5

# Pseudorange plausibility window for MEO satellites, metres.
RHO_MIN_M = 1.5e7
RHO_MAX_M = 3.5e7


def _saturate(f_pll: float) -> float:
    return min(max(f_pll, -_F_PLL_SAT_HZ), _F_PLL_SAT_HZ)


@dataclass(frozen=True)
class ControlParams:
    """One epoch's NCO command: code-rate offset and carrier Doppler.

    ``f_dll`` is in chips/s (added to the nominal chip rate), ``f_pll``
    in Hz (added to the nominal carrier, i.e. the commanded Doppler).
    """

    f_dll: float = 0.0
    f_pll: float = 0.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.f_dll) and math.isfinite(self.f_pll)):
            raise ValueError("non-finite NCO command")
        if abs(self.f_pll) >= F_PLL_SANITY_HZ:
            raise ValueError(
                f"carrier command {self.f_pll:.1f} Hz exceeds the "
                f"{F_PLL_SANITY_HZ:.0f} Hz sanity bound"
            )


ZERO_CONTROL = ControlParams()


@dataclass(frozen=True)
class AlfaFilterState:
    """State of the second-order carrier filter (shared by STL and the
    rate-aided variant).

    ``acc`` is the Doppler accumulator behind the unit delay; outputs of an
    update are computed from the *pre-update* accumulator.  ``stale`` is set
    when a rate-aided update had to drop its feedback for being too old.
    """

    acc: float = 0.0
    k1: float = 4.0
    k2: float = 356.0
    k3: float = 26.68
    sf: float = CODE_CARRIER_RATIO
    t: float = 1e-3
    stale: bool = False

    def __post_init__(self) -> None:
        if min(self.k1, self.k2, self.k3, self.sf) <= 0.0:
            raise ValueError("loop gains must be strictly positive")
        if self.t <= 0.0:
            raise ValueError("update period must be positive")

    @classmethod
    def from_bandwidth(
        cls, b_pll: float, b_dll: float, t: float, acc: float = 0.0
    ) -> "AlfaFilterState":
        k1, k2, k3, sf = gains_from_bandwidth(b_pll, b_dll, t)
        return cls(acc=acc, k1=k1, k2=k2, k3=k3, sf=sf, t=t)


def gains_from_bandwidth(
    b_pll: float, b_dll: float, t: float
) -> tuple[float, float, float, float]:
    """Map noise bandwidths to loop gains.

    Second-order carrier loop at damping 0.707 (natural frequency
    ``B/0.53``), first-order code loop, and the carrier-to-code aiding
    scale factor.  Rejects bandwidth/period combinations without a
    comfortable discrete-time stability margin.
    """
    if not 0.0 < b_pll * t < 0.1:
        raise ValueError(
            f"b_pll*t = {b_pll * t:.4g} outside the (0, 0.1) stability margin"
        )
    if b_dll <= 0.0:
        raise ValueError("b_dll must be positive")
    omega_n = b_pll / 0.53
    k3 = 1.414 * omega_n
    k2 = omega_n * omega_n
    k1 = 4.0 * b_dll
    return k1, k2, k3, CODE_CARRIER_RATIO


def _filter_core(
    state: AlfaFilterState, d_tau: float, d_phi: float, assist: float
) -> tuple[ControlParams, float]:
    """Shared difference equations of the two scalar loop filters.

    ``assist`` enters the accumulator in Hz/s.  Outputs use the pre-update
    accumulator; returns the command and the new accumulator value.
    """
    f_pll = _saturate(state.acc + state.k3 * d_phi)
    f_dll = state.k1 * d_tau + state.sf * state.acc
    acc = _saturate(state.acc + state.t * (state.k2 * d_phi + assist))
    return ControlParams(f_dll=f_dll, f_pll=f_pll), acc


def stl_update(
    state: AlfaFilterState,
    d: DiscriminatorOutputs,
    k_f: float | None = None,
) -> tuple[ControlParams, AlfaFilterState]:
    """Classical FLL-assisted PLL step; invalid discriminators count as zero.

    ``k_f`` is the frequency-assist gain in 1/s (default ``0.25/T``).
    """
    if k_f is None:
        k_f = 0.25 / state.t
    d_tau = d.d_tau if d.valid_tau else 0.0
    d_phi = d.d_phi if d.valid_phi else 0.0
    d_fd = d.d_fd if d.valid_fd else 0.0
    theta, acc = _filter_core(state, d_tau, d_phi, k_f * d_fd)
    return theta, replace(state, acc=acc, stale=False)


def alfa_update(
    state: AlfaFilterState,
    d_tau: float,
    d_phi: float,
    fd_dot: float,
    feedback_age: float = 0.0,
    staleness_bound: float = 0.5,
) -> tuple[ControlParams, AlfaFilterState]:
    """Rate-aided filter step: same topology as ``stl_update`` with the
    frequency assist replaced by an external Doppler-rate value (Hz/s),
    held between navigation epochs.

    Feedback older than ``staleness_bound`` seconds is dropped (zero
    assist) and the returned state carries ``stale=True``.  NaN
    discriminator inputs count as zero.
    """
    stale = feedback_age > staleness_bound
    if stale or not math.isfinite(fd_dot):
        fd_dot = 0.0
    if not math.isfinite(d_tau):
        d_tau = 0.0
    if not math.isfinite(d_phi):
        d_phi = 0.0
    theta, acc = _filter_core(state, d_tau, d_phi, fd_dot)
    return theta, replace(state, acc=acc, stale=stale)


# ---------------------------------------------------------------------------
# Per-channel Kalman estimator
# ---------------------------------------------------------------------------

def variance_from_cn0(cn0: float) -> tuple[float, float, float]:
    """Discriminator measurement variances at a given C/N0 (dB-Hz).

    Returns (code chips^2, phase cycles^2, frequency Hz^2), each scaling as
    ``10**(-cn0/10)``.  Inputs outside [10, 60] dB-Hz are clamped with a
    warning.
    """
    if not 10.0 <= cn0 <= 60.0:
        warnings.warn(
            f"C/N0 {cn0:.1f} dB-Hz outside [10, 60]; clamping", stacklevel=2
        )
        cn0 = min(max(cn0, 10.0), 60.0)
    scale = 10.0 ** (-cn0 / 10.0)
    return _VAR0_TAU * scale, _VAR0_PHI * scale, _VAR0_FD * scale


@dataclass(frozen=True)
class KfChannelState:
    """Three-state tracking-error estimator: x = [dtau chips, dphi cycles,
    dfd Hz], referenced to the control currently applied to the NCO."""

    x: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self) -> None:
        for name in ("x", "P", "Q", "R"):
            object.__setattr__(
                self, name, np.asarray(getattr(self, name), dtype=float)
            )
        if self.x.shape != (3,):
            raise ValueError("state vector must have shape (3,)")
        for name in ("P", "Q", "R"):
            m = getattr(self, name)
            if m.shape != (3, 3):
                raise ValueError(f"{name} must be 3x3")
        if not np.allclose(self.P, self.P.T, atol=1e-9):
            raise ValueError("P must be symmetric")
        if np.linalg.eigvalsh(self.P).min() < -1e-9:
            raise ValueError("P must be positive semi-definite")


def kf_init(
    q_fd: float = VDFLL1_QFD,
    *,
    q_tau: float = 1e-6,
    q_phi: float = 1e-4,
    p0: np.ndarray | None = None,
    cn0: float = 45.0,
) -> KfChannelState:
    """Fresh estimator state for one channel.

    ``q_fd`` selects the vector-lock tuning (``VDFLL1_QFD`` or
    ``VDFLL2_QFD``); the code/phase process noises default small relative
    to the Doppler state.  The initial covariance covers half a chip,
    a quarter cycle and tens of Hz unless overridden.
    """
    if p0 is None:
        p0 = np.diag([1.0, 0.25, 1.0e4])
    return KfChannelState(
        x=np.zeros(3),
        P=np.asarray(p0, dtype=float),
        Q=np.diag([q_tau, q_phi, q_fd]),
        R=np.diag(variance_from_cn0(cn0)),
    )


def _transition(t_i: float, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    f = np.array([[1.0, 0.0, alpha * t_i],
                  [0.0, 1.0, t_i],
                  [0.0, 0.0, 1.0]])
    g = np.array([[-t_i, alpha * t_i],
                  [0.0, 0.0],
                  [0.0, 0.0]])
    return f, g


def kf_predict(
    state: KfChannelState,
    u: ControlParams,
    t_i: float,
    alpha: float = CODE_CARRIER_RATIO,
) -> KfChannelState:
    """Propagate one epoch under the control that drove the NCO.

    The code error integrates the Doppler error scaled by the code/carrier
    ratio plus the net effect of the applied commands; phase integrates the
    Doppler error; the Doppler error itself is a random walk.
    """
    f, g = _transition(t_i, alpha)
    x = f @ state.x + g @ np.array([u.f_dll, u.f_pll])
    p = f @ state.P @ f.T + state.Q
    return replace(state, x=x, P=0.5 * (p + p.T))


def kf_update_meas(
    state: KfChannelState,
    z: np.ndarray,
    r: np.ndarray | None = None,
) -> KfChannelState:
    """Measurement update with the identity observation matrix.

    ``z`` holds the three discriminator outputs in state units; NaN entries
    (dead discriminators) are skipped.  Components are folded in as
    sequential scalar updates in Joseph form.  ``r`` replaces the stored
    measurement covariance for this and later epochs when given.
    """
    z = np.asarray(z, dtype=float)
    if z.shape != (3,):
        raise ValueError("measurement must have shape (3,)")
    if r is None:
        r = state.R
    else:
        r = np.asarray(r, dtype=float)
    x = state.x.copy()
    p = state.P.copy()
    eye = np.eye(3)
    for i in range(3):
        if not np.isfinite(z[i]):
            continue
        s = p[i, i] + r[i, i]
        k = p[:, i] / s
        x = x + k * (z[i] - x[i])
        ikh = eye - np.outer(k, eye[i])
        p = ikh @ p @ ikh.T + r[i, i] * np.outer(k, k)
        p = 0.5 * (p + p.T)
    w = np.linalg.eigvalsh(p)
    if w.min() < -1e-9:
        warnings.warn("estimator covariance lost PSD; clamping", stacklevel=2)
        vals, vecs = np.linalg.eigh(p)
        p = (vecs * np.maximum(vals, 0.0)) @ vecs.T
        p = 0.5 * (p + p.T)
    return replace(state, x=x, P=p, R=r)


def kf_rereference(
    state: KfChannelState, f_pll_old: float, f_pll_new: float
) -> KfChannelState:
    """Shift the Doppler-error state when the applied carrier command
    changes.

    The state is defined relative to the command driving the NCO, so a new
    command moves the error by the known difference; the estimation error,
    and therefore P, is unchanged.
    """
    x = state.x.copy()
    x[2] += f_pll_old - f_pll_new
    return replace(state, x=x)


def kf_extract_control(
    state: KfChannelState,
    u_prev: ControlParams,
    t_i: float,
    sf: float = CODE_CARRIER_RATIO,
    code_pullin: bool = True,
) -> tuple[ControlParams, KfChannelState]:
    """Turn the estimated errors into the next NCO command.

    Rate-plus-proportional pull-in: the carrier command absorbs the Doppler
    error and slews out the phase error over one epoch; the code command is
    carrier-aided, optionally with a code pull-in term.  The returned state
    is re-referenced to the new command.
    """
    f_pll = _saturate(u_prev.f_pll + state.x[2] + state.x[1] / t_i)
    f_dll = sf * f_pll
    if code_pullin:
        f_dll += state.x[0] / t_i
    theta = ControlParams(f_dll=f_dll, f_pll=f_pll)
    return theta, kf_rereference(state, u_prev.f_pll, f_pll)


def kf_channel_update(
    state: KfChannelState,
    z: np.ndarray,
    u: ControlParams,
    t_i: float,
    alpha: float = CODE_CARRIER_RATIO,
    r: np.ndarray | None = None,
    code_pullin: bool = True,
) -> tuple[KfChannelState, ControlParams]:
    """One full estimator epoch when the Kalman filter drives the NCO:
    propagate under the previous command, fold in the discriminators,
    extract the next command."""
    state = kf_predict(state, u, t_i, alpha)
    state = kf_update_meas(state, z, r)
    theta, state = kf_extract_control(state, u, t_i, code_pullin=code_pullin)
    return state, theta


# ---------------------------------------------------------------------------
# Observation and control generators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChannelObservation:
    """Pseudorange/Doppler pair one channel hands to the navigation filter."""

    rho_tilde: float
    fd_tilde: float
    t_rx: float
    prn: int

    def __post_init__(self) -> None:
        if not (math.isfinite(self.rho_tilde) and math.isfinite(self.fd_tilde)):
            raise ValueError("non-finite observation")
        if not RHO_MIN_M <= self.rho_tilde <= RHO_MAX_M:
            raise ValueError(
                f"pseudorange {self.rho_tilde:.3e} m outside the MEO "
                "plausibility window"
            )


@dataclass(frozen=True)
class ChannelFeedback:
    """Navigation-filter predictions fed back to one channel.

    ``rho``/``rho_dot`` drive the vector-lock control generator; ``fd_dot``
    drives the rate-aided scalar filter.  ``t`` is the navigation epoch
    that produced the values.
    """

    prn: int
    rho: float
    rho_dot: float
    fd_dot: float
    t: float

    def __post_init__(self) -> None:
        for v in (self.rho, self.rho_dot, self.fd_dot, self.t):
            if not math.isfinite(v):
                raise ValueError("non-finite channel feedback")


def og_generate(
    nco: ChannelNcoState,
    prn: int,
    fd_est: float,
    delta_tau: float = 0.0,
    locked: bool = True,
) -> ChannelObservation | None:
    """Form the channel observation from the NCO clock pair.

    Pseudorange is light speed times (receive time minus replica transmit
    time), corrected by the estimated residual code error ``delta_tau``
    (chips) when a local estimator provides one.  ``fd_est`` is the loop's
    current Doppler estimate.  Returns None for unlocked channels or
    implausible ranges instead of emitting garbage.
    """
    if not locked:
        return None
    rho = SPEED_OF_LIGHT * (nco.t_rx - nco.t_tx)
    rho -= (SPEED_OF_LIGHT / CA_CHIP_RATE) * delta_tau
    if not (RHO_MIN_M <= rho <= RHO_MAX_M and math.isfinite(fd_est)):
        return None
    return ChannelObservation(
        rho_tilde=rho, fd_tilde=fd_est, t_rx=nco.t_rx, prn=prn
    )


def cpg(
    feedback: ChannelFeedback | None,
    nco: ChannelNcoState,
    t_now: float,
    theta_prev: ControlParams = ZERO_CONTROL,
    k_cpg: float = 0.1,
    t_int: float = 1e-3,
    staleness_bound: float = 0.5,
    sf: float = CODE_CARRIER_RATIO,
) -> tuple[ControlParams, bool]:
    """Vector-lock control: map predicted range/range-rate onto NCO commands.

    The carrier command is the Doppler implied by the predicted range rate.
    The code command is carrier-aided plus a proportional correction that
    pulls the replica delay toward the predicted delay with per-epoch gain
    ``k_cpg``.  Stale or missing feedback holds the previous command and
    returns a raised flag.
    """
    if feedback is None or t_now - feedback.t > staleness_bound:
        return theta_prev, True
    rho_pred = feedback.rho + feedback.rho_dot * (t_now - feedback.t)
    f_pll = _saturate(-DOPPLER_PER_MPS * feedback.rho_dot)
    delay_err = rho_pred / SPEED_OF_LIGHT - (nco.t_rx - nco.t_tx)
    f_dll = sf * f_pll - k_cpg * CA_CHIP_RATE * delay_err / t_int
    return ControlParams(f_dll=f_dll, f_pll=f_pll), False
