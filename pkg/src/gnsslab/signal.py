"""L1 C/A baseband synthesis: spreading codes, per-satellite signal truth,
and 8-bit quantized complex sample blocks.

The truth object stores Doppler and carrier phase on a fixed grid; code
delay is derived from carrier phase through the carrier-to-code ratio, so
code rate and Doppler stay exactly consistent. Synthesis is stateless per
block: the same (truth, t_start, seed) always produces identical bytes.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import kernels
from .constants import CA_CHIP_RATE, L1_FREQ, NAV_BIT_PERIOD, SPEED_OF_LIGHT
from .scenario import ReceiverClock, sat_clock, sat_pva

# G2 output taps per PRN (IS-GPS-200 phase-selector pairs, 1-indexed stages)
_PHASE_SELECT = {
    1: (2, 6), 2: (3, 7), 3: (4, 8), 4: (5, 9), 5: (1, 9), 6: (2, 10),
    7: (1, 8), 8: (2, 9), 9: (3, 10), 10: (2, 3), 11: (3, 4), 12: (5, 6),
    13: (6, 7), 14: (7, 8), 15: (8, 9), 16: (9, 10), 17: (1, 4), 18: (2, 5),
    19: (3, 6), 20: (4, 7), 21: (5, 8), 22: (6, 9), 23: (1, 3), 24: (4, 6),
    25: (5, 7), 26: (6, 8), 27: (7, 9), 28: (8, 10), 29: (1, 6), 30: (2, 7),
    31: (3, 8), 32: (4, 9),
}


@lru_cache(maxsize=None)
def _prn_code_cached(prn: int) -> np.ndarray:
    s1, s2 = _PHASE_SELECT[prn]
    g1 = np.ones(10, dtype=np.int64)
    g2 = np.ones(10, dtype=np.int64)
    bits = np.empty(1023, dtype=np.int64)
    for i in range(1023):
        bits[i] = g1[9] ^ g2[s1 - 1] ^ g2[s2 - 1]
        fb1 = g1[2] ^ g1[9]
        fb2 = g2[1] ^ g2[2] ^ g2[5] ^ g2[7] ^ g2[8] ^ g2[9]
        g1[1:] = g1[:-1]
        g1[0] = fb1
        g2[1:] = g2[:-1]
        g2[0] = fb2
    chips = (1.0 - 2.0 * bits).astype(np.float64)
    chips.flags.writeable = False
    return chips


def prn_code(prn: int) -> np.ndarray:
    """1023-chip C/A Gold code for the PRN, as +/-1 (bit 1 maps to -1)."""
    if not (1 <= int(prn) <= 32):
        raise ValueError(f"prn must be 1..32, got {prn}")
    return _prn_code_cached(int(prn))


# ---------------------------------------------------------------------------
# truth

class SatelliteSignalTruth:
    """Time functions tau/phi/fd/nav_bit/cn0 for one satellite.

    phi (cycles) is the exact trapezoid integral of the gridded Doppler and
    tau (seconds) is slaved to it, tau(t) = tau0 - (phi(t) - phi0)/f_L1, so
    the implied code rate is f_chip*(1 + fd/f_L1) identically. Evaluation is
    a pure function of t (no running state). Navigation bits flip on the
    20 ms receiver-time grid.
    """

    def __init__(self, prn: int, t0: float, dt: float, fd: np.ndarray,
                 phi0: float, tau0: float, cn0: np.ndarray, bits: np.ndarray):
        self.prn = int(prn)
        self.t0 = float(t0)
        self.dt = float(dt)
        self._fd = np.asarray(fd, dtype=float)
        self._phi = phi0 + np.concatenate([
            [0.0], np.cumsum(0.5 * (self._fd[1:] + self._fd[:-1]) * self.dt)])
        self.phi0 = float(phi0)
        self.tau0 = float(tau0)
        self._cn0 = np.asarray(cn0, dtype=float)
        self.bits = np.asarray(bits, dtype=float)
        self.t_end = self.t0 + (self._fd.size - 1) * self.dt

    def _locate(self, t):
        x = (np.asarray(t, dtype=float) - self.t0) / self.dt
        idx = np.clip(np.floor(x).astype(np.int64), 0, self._fd.size - 2)
        return idx, (x - idx) * self.dt

    def fd(self, t):
        idx, d = self._locate(t)
        slope = (self._fd[idx + 1] - self._fd[idx]) / self.dt
        return self._fd[idx] + slope * d

    def phi(self, t):
        idx, d = self._locate(t)
        slope = (self._fd[idx + 1] - self._fd[idx]) / self.dt
        return self._phi[idx] + self._fd[idx] * d + 0.5 * slope * d * d

    def tau(self, t):
        return self.tau0 - (self.phi(t) - self.phi0) / L1_FREQ

    def code_phase(self, t):
        """Absolute code coordinate of the incoming signal, chips."""
        return (np.asarray(t, dtype=float) - self.tau(t)) * CA_CHIP_RATE

    def code_rate(self, t):
        return CA_CHIP_RATE * (1.0 + self.fd(t) / L1_FREQ)

    def nav_bit(self, t):
        idx = np.floor(np.asarray(t, dtype=float) / NAV_BIT_PERIOD + 1e-9)
        return self.bits[np.clip(idx.astype(np.int64), 0, self.bits.size - 1)]

    def cn0(self, t):
        idx, d = self._locate(t)
        slope = (self._cn0[idx + 1] - self._cn0[idx]) / self.dt
        return self._cn0[idx] + slope * d

    def amplitude(self, t, sigma: float, fs: float):
        """Sample amplitude for the scheduled C/N0: sigma*sqrt(2*10^(cn0/10)/fs)."""
        return sigma * np.sqrt(2.0 * 10.0 ** (self.cn0(t) / 10.0) / fs)


class SignalTruth:
    """Per-satellite truth functions for one scenario."""

    def __init__(self, sats: dict, t_end: float):
        self.sats = dict(sats)
        self.t_end = float(t_end)

    def __getitem__(self, prn: int) -> SatelliteSignalTruth:
        return self.sats[prn]

    def prns(self) -> list:
        return sorted(self.sats)


def _cn0_profile(schedule, times: np.ndarray) -> np.ndarray:
    out = np.empty_like(times)
    out[:] = np.nan
    for t0, t1, c0, c1 in schedule.segments:
        m = (times >= t0 - 1e-9) & (times <= t1 + 1e-9)
        out[m] = c0 + (np.clip((times[m] - t0) / (t1 - t0), 0.0, 1.0)) * (c1 - c0)
    if np.any(np.isnan(out)):
        raise ValueError("cn0 schedule does not cover the scenario span")
    return out


def signal_truth_from_scenario(traj, sats, schedule, clock: ReceiverClock = ReceiverClock(),
                               *, t_end: float | None = None, dt: float = 1e-3,
                               seed: int = 1, freeze_satellites: bool = False) -> SignalTruth:
    """Build tau/phi/fd/bit/cn0 truth for every satellite of a scenario.

    schedule may be one Cn0Schedule for all satellites or a dict keyed by
    prn. freeze_satellites pins each satellite at its t=0 state (a test
    mode: a static user then sees exactly zero Doppler).
    """
    t_end = float(t_end if t_end is not None else traj.t_end)
    n = int(round(t_end / dt)) + 1
    times = np.arange(n) * dt
    g = traj.grid(times)
    cdt_u, cdt_u_dot = clock.at(times)

    out = {}
    for sat in sats:
        p_s, v_s, _ = sat_pva(sat, times)
        cdt_s, cdt_s_dot = sat_clock(sat, times)
        if freeze_satellites:
            p_s = np.tile(p_s[0], (n, 1))
            v_s = np.zeros_like(v_s)
        d = p_s - g.p
        rng = np.linalg.norm(d, axis=1)
        e = d / rng[:, None]
        rdot = np.einsum("ij,ij->i", e, v_s - g.v) + cdt_u_dot - cdt_s_dot
        fd = -(L1_FREQ / SPEED_OF_LIGHT) * rdot
        rho0 = rng[0] + cdt_u[0] - cdt_s[0]

        ss = np.random.SeedSequence((seed, sat.prn))
        rng_bits, rng_phase = [np.random.default_rng(c) for c in ss.spawn(2)]
        n_bits = int(math.ceil(t_end / NAV_BIT_PERIOD)) + 2
        bits = rng_bits.choice([-1.0, 1.0], size=n_bits)
        phi0 = float(rng_phase.uniform(0.0, 1.0))

        sched = schedule[sat.prn] if isinstance(schedule, dict) else schedule
        cn0 = _cn0_profile(sched, times)
        out[sat.prn] = SatelliteSignalTruth(sat.prn, 0.0, dt, fd, phi0,
                                            rho0 / SPEED_OF_LIGHT, cn0, bits)
    return SignalTruth(out, t_end)


# ---------------------------------------------------------------------------
# sample blocks

@dataclass
class IfBlock:
    """One span of complex baseband samples.

    Quantized samples hold signed 8-bit integer components (stored in a
    complex64 array); unquantized blocks keep the raw analog values.
    """

    t_start: float
    fs: float
    samples: np.ndarray
    quantized: bool = True

    @property
    def n(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.n / self.fs


AGC_SIGMA_SPAN = 4.0  # the quantizer maps +/- this many noise sigmas to +/-127


def synthesize_block(truth: SignalTruth, t_start: float, duration: float,
                     fs: float, seed: int, *, sigma: float = 1.0,
                     quantize: bool = True, noise: bool = True) -> IfBlock:
    """Synthesize one block: sum of satellite signals plus AWGN, then AGC.

    Deterministic in (truth, t_start, seed); disjoint blocks are independent
    and may be produced in any order. Satellite phase is re-anchored from
    the truth at every navigation-bit segment inside the block.
    """
    n_f = duration * fs
    n = int(round(n_f))
    if abs(n_f - n) > 1e-6 or n <= 0:
        raise ValueError("block duration must be a positive multiple of 1/fs")

    rng = np.random.default_rng(np.random.SeedSequence(
        (int(seed), int(round(t_start * 1e6)))))
    if noise:
        i = sigma * rng.standard_normal(n)
        q = sigma * rng.standard_normal(n)
    else:
        i = np.zeros(n)
        q = np.zeros(n)

    t_stop = t_start + duration
    for prn in truth.prns():
        st = truth[prn]
        a = t_start
        while a < t_stop - 1e-12:
            b = min((math.floor(a / NAV_BIT_PERIOD + 1e-9) + 1) * NAV_BIT_PERIOD,
                    t_stop)
            s0 = int(round((a - t_start) * fs))
            s1 = int(round((b - t_start) * fs))
            if s1 > s0:
                amp = float(st.amplitude(a, sigma, fs)) \
                    * float(st.nav_bit(0.5 * (a + b)))
                tau_abs = float(st.code_phase(a)) % 1023.0
                f_code = float(st.code_rate(a))
                phi = float(st.phi(a)) % 1.0
                f_carr = float(st.fd(a))
                kernels.synth_add(i[s0:s1], q[s0:s1], prn_code(prn),
                                  amp, tau_abs, f_code, phi, f_carr, fs)
            a = b

    if quantize:
        scale = 127.0 / (AGC_SIGMA_SPAN * sigma)
        iq = np.clip(np.rint(i * scale), -127, 127) \
            + 1j * np.clip(np.rint(q * scale), -127, 127)
        return IfBlock(t_start, fs, iq.astype(np.complex64), True)
    return IfBlock(t_start, fs, (i + 1j * q).astype(np.complex64), False)


def write_iq_capture(path, blocks, meta: dict | None = None) -> Path:
    """Write blocks as interleaved little-endian signed 8-bit I/Q.

    A JSON sidecar (same name + '.json') records fs, t_start, sample count
    and any extra metadata (e.g. a scenario hash). Returns the sidecar path.
    """
    path = Path(path)
    fs = None
    t0 = None
    total = 0
    with open(path, "wb") as f:
        for blk in blocks:
            if not blk.quantized:
                raise ValueError("raw capture requires quantized blocks")
            if fs is None:
                fs, t0 = blk.fs, blk.t_start
            inter = np.empty(2 * blk.n, dtype=np.int8)
            inter[0::2] = np.real(blk.samples).astype(np.int8)
            inter[1::2] = np.imag(blk.samples).astype(np.int8)
            f.write(inter.tobytes())
            total += blk.n
    sidecar = path.with_name(path.name + ".json")
    info = {"format": "int8 interleaved I/Q, little-endian",
            "fs_hz": fs, "t_start_s": t0, "n_samples": total}
    info.update(meta or {})
    sidecar.write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return sidecar
