"""Per-satellite baseband core: NCO state, E/P/L correlation, discriminators
and a C/N0 estimator.

Phase units are cycles throughout; radians appear only inside trig calls.
Discriminator outputs follow the incoming-minus-replica convention: a
positive value means the replica must speed up.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import kernels
from .constants import CA_CHIP_RATE
from .signal import IfBlock, prn_code


@dataclass
class ChannelNcoState:
    """Code and carrier NCO state of one tracking channel.

    tau_nco is the replica code phase in chips on [0, 1023); phi_nco the
    fractional carrier phase in cycles with whole cycles kept in phi_cycles;
    t_rx the receiver clock; t_tx the transmit-time tag that advances at the
    replica code rate and anchors the pseudorange.
    """

    tau_nco: float = 0.0
    f_code: float = CA_CHIP_RATE
    phi_nco: float = 0.0
    phi_cycles: int = 0
    f_carr: float = 0.0
    t_rx: float = 0.0
    t_tx: float = 0.0

    @property
    def phi_total(self) -> float:
        return self.phi_cycles + self.phi_nco


def nco_advance(state: ChannelNcoState, theta, dt: float) -> ChannelNcoState:
    """Advance the NCOs by dt under control theta (f_pll Hz, f_dll chips/s).

    The same call with -dt undoes the step to within 1e-12 relative, which
    the replay tooling relies on.
    """
    f_code = CA_CHIP_RATE + theta.f_dll
    f_carr = theta.f_pll
    tau = math.fmod(state.tau_nco + f_code * dt, 1023.0)
    if tau < 0.0:
        tau += 1023.0
    phi = state.phi_nco + f_carr * dt
    whole = math.floor(phi)
    return ChannelNcoState(
        tau_nco=tau,
        f_code=f_code,
        phi_nco=phi - whole,
        phi_cycles=state.phi_cycles + int(whole),
        f_carr=f_carr,
        t_rx=state.t_rx + dt,
        t_tx=state.t_tx + (f_code / CA_CHIP_RATE) * dt,
    )


@dataclass
class CorrelatorOutputs:
    ie: float
    qe: float
    ip: float
    qp: float
    il: float
    ql: float
    t_int: float
    n_samples: int
    spacing: float

    @property
    def early_power(self) -> float:
        return self.ie * self.ie + self.qe * self.qe

    @property
    def late_power(self) -> float:
        return self.il * self.il + self.ql * self.ql

    @property
    def prompt_power(self) -> float:
        return self.ip * self.ip + self.qp * self.qp


def correlate(block: IfBlock, state: ChannelNcoState, prn: int,
              spacing: float = 0.5, t_int: float = 1e-3) -> CorrelatorOutputs:
    """Integrate E/P/L I-Q products over t_int starting at state.t_rx.

    The replica evolves linearly at the state's f_code/f_carr, exactly as
    nco_advance would move it. The block must cover the integration span on
    its own sample grid.
    """
    if not 0.0 < spacing <= 1.0:
        raise ValueError("correlator spacing must be in (0, 1] chips")
    n = int(round(t_int * block.fs))
    off_f = (state.t_rx - block.t_start) * block.fs
    off = int(round(off_f))
    if abs(off_f - off) > 1e-3 or off < 0 or off + n > block.n:
        raise ValueError(
            f"block [{block.t_start}, {block.t_start + block.duration}) does "
            f"not cover integration [{state.t_rx}, {state.t_rx + t_int})")
    sl = block.samples[off:off + n]
    i = np.ascontiguousarray(np.real(sl), dtype=np.float64)
    q = np.ascontiguousarray(np.imag(sl), dtype=np.float64)
    ie, qe, ip, qp, il, ql = kernels.correlate_epl(
        i, q, prn_code(prn), state.tau_nco, state.f_code,
        state.phi_nco, state.f_carr, block.fs, spacing)
    return CorrelatorOutputs(ie, qe, ip, qp, il, ql, n / block.fs, n, spacing)


# ---------------------------------------------------------------------------
# discriminators

@dataclass
class DiscriminatorOutputs:
    d_tau: float
    d_phi: float
    d_fd: float
    valid_tau: bool
    valid_phi: bool
    valid_fd: bool


def dll_disc(c: CorrelatorOutputs) -> float:
    """Normalized non-coherent early-minus-late power, in chips.

    Scaled by (1 - d/2)/2 so the open-loop gain is one for offsets inside
    +/- d/2 on the correlation triangle. NaN when both sides are dead.
    """
    e, l = c.early_power, c.late_power
    if e + l <= 0.0:
        return float("nan")
    return 0.5 * (1.0 - 0.5 * c.spacing) * (e - l) / (e + l)


def pll_disc(c: CorrelatorOutputs) -> float:
    """Costas two-quadrant arctangent, cycles in (-0.25, +0.25]."""
    if c.ip == 0.0:
        return 0.25 if c.qp != 0.0 else float("nan")
    return math.atan(c.qp / c.ip) / (2.0 * math.pi)


def fll_disc(c_prev: CorrelatorOutputs, c_curr: CorrelatorOutputs) -> float:
    """Cross/dot four-quadrant frequency error, Hz.

    The pair must be consecutive equal-length integrations inside one data
    bit; the scheduler guarantees that.
    """
    cross = c_prev.ip * c_curr.qp - c_curr.ip * c_prev.qp
    dot = c_prev.ip * c_curr.ip + c_prev.qp * c_curr.qp
    if cross == 0.0 and dot == 0.0:
        return float("nan")
    return math.atan2(cross, dot) / (2.0 * math.pi * c_curr.t_int)


def discriminate(c: CorrelatorOutputs,
                 c_prev: CorrelatorOutputs | None = None) -> DiscriminatorOutputs:
    """Bundle the three discriminators; the FLL needs the previous epoch."""
    d_tau = dll_disc(c)
    d_phi = pll_disc(c)
    d_fd = fll_disc(c_prev, c) if c_prev is not None else float("nan")
    return DiscriminatorOutputs(
        d_tau=d_tau, d_phi=d_phi, d_fd=d_fd,
        valid_tau=not math.isnan(d_tau),
        valid_phi=not math.isnan(d_phi),
        valid_fd=not math.isnan(d_fd),
    )


# ---------------------------------------------------------------------------
# C/N0 estimation

class Cn0Estimator:
    """Narrowband/wideband power-ratio C/N0 estimator.

    Consumes prompt I/Q once per integration period, forms one power ratio
    per `window` prompts, and reports the dB-Hz average over roughly a
    one-second smoothing span. Invalid (NaN) until the first full window.
    """

    def __init__(self, t_int: float = 1e-3, window: int = 20,
                 smooth_seconds: float = 1.0):
        self.t_int = float(t_int)
        self.window = int(window)
        n_keep = max(1, int(round(smooth_seconds / (t_int * window))))
        self._ratios = deque(maxlen=n_keep)
        self._wb = 0.0
        self._nb_i = 0.0
        self._nb_q = 0.0
        self._count = 0

    def update(self, ip: float, qp: float) -> float:
        self._wb += ip * ip + qp * qp
        self._nb_i += ip
        self._nb_q += qp
        self._count += 1
        if self._count >= self.window:
            m = float(self.window)
            nb = self._nb_i * self._nb_i + self._nb_q * self._nb_q
            mu = nb / self._wb if self._wb > 0.0 else 1.0
            mu = min(mu, m - 1e-6)
            lam = max((mu - 1.0) / (m - mu), 1e-4)
            self._ratios.append(lam)
            self._wb = 0.0
            self._nb_i = 0.0
            self._nb_q = 0.0
            self._count = 0
        return self.value

    @property
    def valid(self) -> bool:
        return len(self._ratios) > 0

    @property
    def value(self) -> float:
        if not self._ratios:
            return float("nan")
        lam = sum(self._ratios) / len(self._ratios)
        return 10.0 * math.log10(lam / self.t_int)


def estimate_cn0(prompts, t_int: float = 1e-3) -> float:
    """One-shot estimate from an iterable of (ip, qp); NaN if fewer than 20."""
    est = Cn0Estimator(t_int=t_int)
    for ip, qp in prompts:
        est.update(ip, qp)
    return est.value
