"""Experiment orchestration: scenario to signal to channels to nav filter.

One engine drives all four receiver architectures through a shared epoch
structure: channel integrations at ``t_int``, navigation updates at the
navigation rate (one "chunk" of channel epochs per update), IMU samples in
between. Feedback published at a navigation epoch is visible to channels
from the next chunk on, never earlier. Two fidelities share the engine:
``sample`` runs real correlators on synthesized IF samples; ``measurement``
skips synthesis and injects discriminator-level noise with the correct
early/prompt/late correlation through the compiled tracking kernel.
"""
from __future__ import annotations

import csv
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import kernels, loops
from .channel import correlate, discriminate, nco_advance, ChannelNcoState
from .config import (
    ARCHITECTURES,
    ConfigError,
    ScenarioConfig,
    load_config,
)
from .constants import (
    CA_CHIP_RATE,
    CODE_CARRIER_RATIO,
    DOPPLER_PER_MPS,
    SPEED_OF_LIGHT,
)
from .geodesy import enu_matrix, ecef2llh
from .kernels import (
    MODE_ALFA,
    MODE_CPG,
    MODE_KF,
    MODE_STL,
    O_DTAU,
    O_IP,
    O_QP,
    OUT_COLS,
    S_ACC,
    S_FDLL,
    S_FPLL,
    S_X,
    STATE_SIZE,
)
from .loops import (
    AlfaFilterState,
    ChannelObservation,
    ControlParams,
    alfa_update,
    cpg,
    gains_from_bandwidth,
    kf_init,
    kf_predict,
    kf_rereference,
    kf_channel_update,
    kf_update_meas,
    og_generate,
    stl_update,
    variance_from_cn0,
)
from .navfilter import (
    ModeSwitch,
    NavNoise,
    ekf_propagate,
    ekf_update,
    init_nav,
    ins_mechanize,
    make_feedback,
    sat_epoch,
)
from .scenario import synthesize_imu
from .signal import signal_truth_from_scenario, synthesize_block

KAPPA_M_PER_CHIP = SPEED_OF_LIGHT / CA_CHIP_RATE
WINDOW_S = 0.02  # navigation-bit period; all lock statistics live on it


class RunAbort(RuntimeError):
    """A run died mid-flight; carries the failing epoch and channel."""

    def __init__(self, message: str, *, epoch: int, t: float,
                 channel: int | None = None):
        tag = f"epoch {epoch} (t={t:.3f} s)"
        if channel is not None:
            tag += f", channel prn {channel}"
        super().__init__(f"{message} [{tag}]")
        self.epoch = epoch
        self.t = t
        self.channel = channel


# ---------------------------------------------------------------------------
# metrics primitives
# ---------------------------------------------------------------------------

def rmse(est: np.ndarray, truth: np.ndarray,
         mask: np.ndarray) -> float | None:
    """Root-mean-square of (est - truth) over the masked epochs.

    Returns None when the mask selects nothing: no data is not zero error.
    """
    est = np.asarray(est, dtype=float)
    truth = np.asarray(truth, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if est.shape != truth.shape or est.shape != mask.shape:
        raise ValueError("est, truth and mask must have equal lengths")
    if not mask.any():
        return None
    d = est[mask] - truth[mask]
    return float(np.sqrt(np.mean(d * d)))


def _window_stats(ip: np.ndarray, qp: np.ndarray):
    """Per 20 ms window: NWPR lambda, phase-lock and frequency-coherence
    raw statistics. ip/qp are (n_windows, epochs_per_window)."""
    m = ip.shape[1]
    wb = np.sum(ip * ip + qp * qp, axis=1)
    nbi = ip.sum(axis=1)
    nbq = qp.sum(axis=1)
    nb = nbi * nbi + nbq * nbq
    mu = np.where(wb > 0, nb / np.where(wb > 0, wb, 1.0), 1.0)
    mu = np.minimum(mu, m - 1e-6)
    lam = np.maximum((mu - 1.0) / (m - mu), 1e-4)
    pli = (nbi * nbi - nbq * nbq) / np.maximum(nb, 1e-30)
    dot = np.sum(ip[:, 1:] * ip[:, :-1] + qp[:, 1:] * qp[:, :-1], axis=1)
    cross = np.sum(ip[:, :-1] * qp[:, 1:] - ip[:, 1:] * qp[:, :-1], axis=1)
    return lam, pli, dot, cross


def lock_detector(ip: np.ndarray, qp: np.ndarray, *, t_int: float = 1e-3,
                  prev_state: bool = True, cn0_threshold: float = 22.0,
                  indicator_threshold: float = 0.6) -> bool:
    """Lock decision over one telemetry window of prompt I/Q samples.

    Locked iff the NWPR C/N0 estimate clears ``cn0_threshold`` and the
    normalized prompt phase-lock indicator (IP^2 - QP^2)/(IP^2 + QP^2)
    averaged over the window clears ``indicator_threshold``. Windows
    shorter than 0.5 s cannot support the statistics; the previous state
    is held.
    """
    ip = np.asarray(ip, dtype=float).ravel()
    qp = np.asarray(qp, dtype=float).ravel()
    if ip.size != qp.size:
        raise ValueError("ip and qp must have equal lengths")
    per_win = int(round(WINDOW_S / t_int))
    if ip.size * t_int < 0.5 - 1e-12:
        return prev_state
    n_win = ip.size // per_win
    lam, pli, _, _ = _window_stats(ip[:n_win * per_win].reshape(n_win, per_win),
                                   qp[:n_win * per_win].reshape(n_win, per_win))
    cn0 = 10.0 * math.log10(max(float(lam.mean()), 1e-12) / t_int)
    return bool(cn0 > cn0_threshold and float(pli.mean()) > indicator_threshold)


class _LockTracker:
    """Online windowed lock pipeline for one channel.

    Statistics are aggregated on the 20 ms navigation-bit grid. The C/N0
    estimate smooths the NWPR lambda over ``cn0_window_s``; the lock
    indicator smooths over ``indicator_window_s`` before thresholding.
    Phase-steered windows use the prompt phase-lock indicator; windows
    under vector steering (feed-forward carrier, phase free-running) use a
    frequency-coherence indicator built from consecutive-prompt dot and
    cross products, smoothed before the ratio so it survives low C/N0.
    State flips are debounced and rate-limited.
    """

    def __init__(self, lock_cfg: Mapping, t_int: float):
        self.t_int = t_int
        self.per_win = int(round(WINDOW_S / t_int))
        self.n_cn0 = max(int(round(lock_cfg["cn0_window_s"] / WINDOW_S)), 1)
        self.n_ind = max(int(round(lock_cfg["indicator_window_s"] / WINDOW_S)),
                         1)
        self.debounce = max(int(round(lock_cfg["debounce_s"] / WINDOW_S)), 1)
        self.min_sep = max(
            int(round(lock_cfg["min_flip_separation_s"] / WINDOW_S)), 1)
        self.cn0_thr = lock_cfg["cn0_threshold_dbhz"]
        self.ind_thr = lock_cfg["indicator_threshold"]

        self._lam: list[float] = []
        self._pli: list[float] = []
        self._dot: list[float] = []
        self._cross: list[float] = []
        self._sum = {"lam": 0.0, "pli": 0.0, "dot": 0.0, "cross": 0.0}
        self._i = 0
        self._state = True
        self._pend = 0
        self._last_flip = -(10 ** 9)
        self.locked_series: list[bool] = []
        self.cn0_series: list[float] = []
        self.cn0_est = 50.0

    @property
    def locked(self) -> bool:
        return self._state

    def _roll(self, key: str, buf: list, val: float, span: int) -> float:
        buf.append(val)
        self._sum[key] += val
        if len(buf) > span:
            self._sum[key] -= buf[len(buf) - span - 1]
        n = min(len(buf), span)
        return self._sum[key] / n

    def push(self, ip: np.ndarray, qp: np.ndarray,
             vector_steered: bool) -> None:
        """Fold a whole number of 20 ms windows of prompt I/Q samples."""
        n_win = ip.size // self.per_win
        lam, pli, dot, cross = _window_stats(
            ip[:n_win * self.per_win].reshape(n_win, self.per_win),
            qp[:n_win * self.per_win].reshape(n_win, self.per_win))
        for w in range(n_win):
            self._i += 1
            lam_s = self._roll("lam", self._lam, float(lam[w]), self.n_cn0)
            pli_s = self._roll("pli", self._pli, float(pli[w]), self.n_ind)
            dot_s = self._roll("dot", self._dot, float(dot[w]), self.n_ind)
            cro_s = self._roll("cross", self._cross, float(cross[w]),
                               self.n_ind)
            self.cn0_est = 10.0 * math.log10(max(lam_s, 1e-12) / self.t_int)
            if vector_steered:
                den = max(dot_s * dot_s + cro_s * cro_s, 1e-30)
                ind = (dot_s * dot_s - cro_s * cro_s) / den
            else:
                ind = pli_s
            raw = self.cn0_est > self.cn0_thr and ind > self.ind_thr
            if raw != self._state:
                self._pend += 1
                if (self._pend >= self.debounce
                        and self._i - self._last_flip >= self.min_sep):
                    self._state = raw
                    self._last_flip = self._i
                    self._pend = 0
            else:
                self._pend = 0
            self.locked_series.append(self._state)
            self.cn0_series.append(self.cn0_est)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    """Per satellite x per C/N0 level metrics plus run-level figures.

    ``per_satellite[prn][level]`` holds pseudorange RMSE (m), Doppler RMSE
    (Hz) and lock fraction with the sample counts behind them; RMSE values
    are None when no locked, converged epochs fell inside the level. The
    run block carries the 3D position RMSE and the scalar-to-vector switch
    time. ``metadata`` records everything a comparison needs to validate
    (scenario hash, seed, architecture, tuning).
    """

    metadata: dict
    per_satellite: dict
    per_run: dict

    def to_dict(self) -> dict:
        return {"metadata": self.metadata,
                "per_satellite": self.per_satellite,
                "per_run": self.per_run}

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2)
                        + "\n")
        return path

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        return cls(metadata=dict(d["metadata"]),
                   per_satellite={k: dict(v)
                                  for k, v in d["per_satellite"].items()},
                   per_run=dict(d["per_run"]))

    @classmethod
    def load(cls, path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class RunConfig:
    """One experiment: a scenario, an architecture, a seed, a fidelity."""

    scenario: str | Path | ScenarioConfig
    arch: str
    seed: int | None = None
    out_dir: str | Path | None = None
    fidelity: str = "sample"

    def resolve(self) -> ScenarioConfig:
        if isinstance(self.scenario, ScenarioConfig):
            return self.scenario
        return load_config(self.scenario)

    def validate(self) -> None:
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture '{self.arch}' "
                              f"(one of {', '.join(ARCHITECTURES)})")
        if self.fidelity not in ("sample", "measurement"):
            raise ConfigError(f"unknown fidelity '{self.fidelity}' "
                              "(sample or measurement)")


# ---------------------------------------------------------------------------
# per-channel containers
# ---------------------------------------------------------------------------

@dataclass
class _Chan:
    prn: int
    st: object                       # SatelliteSignalTruth
    rng: np.random.Generator
    tracker: _LockTracker
    state: np.ndarray                # kernel state (measurement fidelity)
    out: np.ndarray                  # (n_epochs, OUT_COLS)
    dphi_true: np.ndarray | None = None
    bits: np.ndarray | None = None
    amp: np.ndarray | None = None
    rho_true_g: np.ndarray | None = None   # at epoch boundaries
    # sample-fidelity live state
    nco: ChannelNcoState | None = None
    theta: ControlParams = field(default_factory=ControlParams)
    fstate: AlfaFilterState | None = None
    kst: object | None = None
    prev_corr: object | None = None
    # per-chunk results
    fd_hat: np.ndarray | None = None       # at chunk ends
    dtau_hat: np.ndarray | None = None
    rho_err: np.ndarray | None = None      # measured-minus-true, m
    mode_hist: np.ndarray | None = None
    stale_hist: np.ndarray | None = None


# ---------------------------------------------------------------------------
# the engine
# ---------------------------------------------------------------------------

class _Engine:
    def __init__(self, scen: ScenarioConfig, arch: str, seed: int,
                 fidelity: str):
        self.scen = scen
        self.arch = arch
        self.seed = int(seed)
        self.fidelity = fidelity
        d = scen.data

        self.t_int = scen.t_int
        self.nav_dt = 1.0 / scen.nav_rate
        self.chunk = int(round(self.nav_dt / self.t_int))
        self.imu_per_nav = int(round(scen.imu_rate / scen.nav_rate))
        self.spacing = d["signal"]["spacing"]
        self.fs = d["signal"]["fs"]
        self.sigma = d["signal"]["sigma"]

        self.traj = scen.build_trajectory()
        self.sats = {s.prn: s for s in scen.build_satellites()}
        self.sched = scen.build_schedule()
        self.clock = scen.build_clock()
        self.n_chunks = int(math.floor(self.traj.t_end / self.nav_dt))
        self.n_epochs = self.n_chunks * self.chunk
        self.truth = signal_truth_from_scenario(
            self.traj, list(self.sats.values()), self.sched, self.clock,
            seed=self.seed)

        imu_rng = np.random.default_rng(np.random.SeedSequence(
            (self.seed, 55)))
        self.imu = synthesize_imu(self.traj, scen.imu_rate,
                                  scen.build_imu_errors(), rng=imu_rng)

        navcfg = d["navigation"]
        st0 = self.traj.at(0.0)
        cdt0, cdt_dot0 = self.clock.at(0.0)
        nav_rng = np.random.default_rng(np.random.SeedSequence(
            (self.seed, 99)))
        self.nav, self.err = init_nav(
            st0.p_u, st0.v_u, st0.q, clk_b=cdt0, clk_d=cdt_dot0, rng=nav_rng,
            sigma_p=navcfg["init"]["sigma_p"],
            sigma_v=navcfg["init"]["sigma_v"],
            sigma_att_deg=navcfg["init"]["sigma_att_deg"])
        self.noise = NavNoise(**navcfg["noise"])
        ms = navcfg["mode_switch"]
        self.switch = ModeSwitch(min_sats=ms["min_sats"],
                                 cov_gate_m2=ms["cov_gate_m2"],
                                 dropout_s=ms["dropout_s"])
        self.warmup = navcfg["ephemeris_warmup"]
        self.clk_jerk_term = navcfg["clock_jerk_term"]

        trk = d["tracking"]
        self.k_f = trk["stl"]["k_f"]
        self.g_stl = gains_from_bandwidth(trk["stl"]["pll_bw"],
                                          trk["stl"]["dll_bw"], self.t_int)
        self.g_alfa = gains_from_bandwidth(trk["alfa"]["pll_bw"],
                                           trk["alfa"]["dll_bw"], self.t_int)
        self.q_fd = {"vdfll1": trk["vdfll1"]["q_fd"],
                     "vdfll2": trk["vdfll2"]["q_fd"]}.get(arch, 0.0)
        self.q_tau = trk["vdfll"]["q_tau"]
        self.q_phi = trk["vdfll"]["q_phi"]
        self.k_cpg = trk["vdfll"]["k_cpg"]
        self.code_pullin = bool(trk["vdfll"]["code_pullin"])
        self.staleness = trk["staleness"]
        self.kf_params = np.array([self.t_int, CODE_CARRIER_RATIO,
                                   1.0 if self.code_pullin else 0.0,
                                   self.q_tau, self.q_phi, self.q_fd])

        tg = np.arange(self.n_epochs + 1) * self.t_int
        tm = tg[:-1] + 0.5 * self.t_int
        self.tgrid = tg
        self.tb = (np.arange(self.n_chunks) + 1.0) * self.nav_dt

        self.channels: dict[int, _Chan] = {}
        for prn in sorted(self.sats):
            st = self.truth[prn]
            fd0 = float(st.fd(0.0))
            ch = _Chan(
                prn=prn, st=st,
                rng=np.random.default_rng(np.random.SeedSequence(
                    (self.seed, 77, prn))),
                tracker=_LockTracker(d["lock"], self.t_int),
                state=np.zeros(STATE_SIZE),
                out=np.zeros((self.n_epochs, OUT_COLS)),
                fd_hat=np.zeros(self.n_chunks),
                dtau_hat=np.zeros(self.n_chunks),
                rho_err=np.zeros(self.n_chunks),
                mode_hist=np.zeros(self.n_chunks, dtype=np.int64),
                stale_hist=np.zeros(self.n_chunks, dtype=bool),
            )
            ch.state[S_FPLL] = fd0
            ch.state[S_FDLL] = CODE_CARRIER_RATIO * fd0
            ch.state[S_ACC] = fd0
            ch.state[S_X + 3:S_X + 12] = np.diag([1.0, 0.25, 1e4]).ravel()
            if fidelity == "measurement":
                ch.dphi_true = np.diff(st.phi(tg))
                ch.bits = st.nav_bit(tm)
                ch.amp = np.sqrt(2.0 * self.t_int
                                 * 10.0 ** (st.cn0(tm) / 10.0))
                ch.rho_true_g = SPEED_OF_LIGHT * st.tau(tg)
            else:
                ch.theta = ControlParams(f_dll=CODE_CARRIER_RATIO * fd0,
                                         f_pll=fd0)
                ch.nco = ChannelNcoState(
                    tau_nco=float(st.code_phase(0.0)) % 1023.0,
                    f_code=CA_CHIP_RATE + ch.theta.f_dll,
                    phi_nco=float(st.phi(0.0)) % 1.0,
                    f_carr=fd0,
                    t_rx=0.0,
                    t_tx=-float(st.tau(0.0)))
                ch.fstate = AlfaFilterState(
                    acc=fd0, k1=self.g_stl[0], k2=self.g_stl[1],
                    k3=self.g_stl[2], sf=self.g_stl[3], t=self.t_int)
                ch.kst = kf_init(self.q_fd or loops.VDFLL1_QFD,
                                 q_tau=self.q_tau, q_phi=self.q_phi)
            self.channels[prn] = ch

        self.aid = None
        self.aid_prev_fd_dot: dict[int, float] = {}
        self.nav_rows: list[dict] = []
        self.stale_events = 0

    # -- per-chunk channel decisions --------------------------------------

    def _chunk_plan(self, ch: _Chan, t0: float):
        """Mode, gains and feedback for the chunk starting at t0."""
        fb = None
        if self.aid is not None:
            fb = self.aid.entries.get(ch.prn)
            if fb is not None and t0 - fb.t > self.staleness:
                fb = None
        vtl = self.switch.mode == "vtl"
        if self.arch == "stl":
            return MODE_STL, self.g_stl, self.k_f, None
        if self.arch == "alfa":
            if vtl and fb is not None:
                prev = self.aid_prev_fd_dot.get(ch.prn, fb.fd_dot)
                assist = 1.5 * fb.fd_dot - 0.5 * prev
                return MODE_ALFA, self.g_alfa, assist, fb
            return MODE_STL, self.g_stl, self.k_f, None
        # vdfll1 / vdfll2
        if vtl and fb is not None:
            return MODE_CPG, self.g_stl, 0.0, fb
        return MODE_KF, self.g_stl, 0.0, None

    def _chunk_measurement(self, c: int) -> None:
        k0 = c * self.chunk
        t0 = k0 * self.t_int
        for ch in self.channels.values():
            mode, g, assist, fb = self._chunk_plan(ch, t0)
            gains = np.array([g[0], g[1], g[2], g[3], assist, self.t_int])
            rkf = np.tile(variance_from_cn0(ch.tracker.cn0_est),
                          (self.chunk, 1))
            if mode == MODE_CPG:
                ends = self.tgrid[k0 + 1:k0 + self.chunk + 1]
                rho_pred = fb.rho + fb.rho_dot * (ends - fb.t)
                derr0 = ((rho_pred - ch.rho_true_g[k0 + 1:k0 + self.chunk + 1])
                         / KAPPA_M_PER_CHIP)
                f_cmd = -DOPPLER_PER_MPS * fb.rho_dot
                cpg_params = np.array([f_cmd, self.k_cpg,
                                       CODE_CARRIER_RATIO, self.t_int])
            else:
                derr0 = np.zeros(self.chunk)
                cpg_params = np.array([0.0, self.k_cpg, CODE_CARRIER_RATIO,
                                       self.t_int])
            noise = ch.rng.standard_normal((self.chunk, 6))
            kernels.track_chunk(
                ch.state, mode, self.spacing, CODE_CARRIER_RATIO, gains,
                self.kf_params, rkf, cpg_params, derr0,
                ch.dphi_true[k0:k0 + self.chunk],
                ch.bits[k0:k0 + self.chunk], ch.amp[k0:k0 + self.chunk],
                noise, k0, ch.out[k0:k0 + self.chunk])
            if not np.isfinite(ch.state[S_FPLL]):
                raise RunAbort("carrier loop state went non-finite",
                               epoch=k0 + self.chunk, t=t0 + self.nav_dt,
                               channel=ch.prn)
            self._finish_chunk(ch, c, mode, fb is None and mode in
                               (MODE_ALFA, MODE_CPG))

    def _chunk_sample(self, c: int, block) -> None:
        k0 = c * self.chunk
        t0 = k0 * self.t_int
        kf_alpha = CODE_CARRIER_RATIO
        for ch in self.channels.values():
            mode, g, assist, fb = self._chunk_plan(ch, t0)
            if mode in (MODE_STL, MODE_ALFA) and not math.isclose(
                    ch.fstate.k1, g[0]):
                ch.fstate = AlfaFilterState(
                    acc=ch.fstate.acc, k1=g[0], k2=g[1], k3=g[2], sf=g[3],
                    t=self.t_int, stale=ch.fstate.stale)
            r = np.diag(variance_from_cn0(ch.tracker.cn0_est))
            for j in range(self.chunk):
                k = k0 + j
                co = correlate(block, ch.nco, ch.prn, spacing=self.spacing,
                               t_int=self.t_int)
                d = discriminate(co, ch.prev_corr if k % 20 != 0 else None)
                ch.prev_corr = co
                nco_next = nco_advance(ch.nco, ch.theta, self.t_int)
                if mode == MODE_STL:
                    theta, ch.fstate = stl_update(ch.fstate, d, k_f=self.k_f)
                elif mode == MODE_ALFA:
                    theta, ch.fstate = alfa_update(
                        ch.fstate, d.d_tau, d.d_phi, assist,
                        feedback_age=t0 - fb.t,
                        staleness_bound=self.staleness)
                else:
                    z = np.array([d.d_tau, d.d_phi, d.d_fd])
                    if mode == MODE_KF:
                        ch.kst, theta = kf_channel_update(
                            ch.kst, z, ch.theta, self.t_int, alpha=kf_alpha,
                            r=r, code_pullin=self.code_pullin)
                    else:
                        ch.kst = kf_predict(ch.kst, ch.theta, self.t_int,
                                            kf_alpha)
                        ch.kst = kf_update_meas(ch.kst, z, r)
                        theta, raised = cpg(
                            fb, nco_next, nco_next.t_rx,
                            theta_prev=ch.theta, k_cpg=self.k_cpg,
                            t_int=self.t_int,
                            staleness_bound=self.staleness)
                        ch.kst = kf_rereference(ch.kst, ch.theta.f_pll,
                                                theta.f_pll)
                ch.nco = nco_next
                ch.theta = theta
                ch.out[k, O_IP] = co.ip
                ch.out[k, O_QP] = co.qp
            self._finish_chunk(ch, c, mode, False)

    def _finish_chunk(self, ch: _Chan, c: int, mode: int,
                      stale: bool) -> None:
        k0 = c * self.chunk
        ch.tracker.push(ch.out[k0:k0 + self.chunk, O_IP],
                        ch.out[k0:k0 + self.chunk, O_QP],
                        vector_steered=(mode == MODE_CPG))
        ch.mode_hist[c] = mode
        ch.stale_hist[c] = stale
        if stale:
            self.stale_events += 1
        t1 = (c + 1) * self.nav_dt
        if self.fidelity == "measurement":
            if self.arch.startswith("vdfll"):
                ch.fd_hat[c] = ch.state[S_FPLL] + ch.state[S_X + 2]
                ch.dtau_hat[c] = ch.state[S_X]
            else:
                ch.fd_hat[c] = ch.state[S_ACC]
                ch.dtau_hat[c] = 0.0
            ch.rho_err[c] = ((ch.out[k0 + self.chunk - 1, O_DTAU]
                              - ch.dtau_hat[c]) * KAPPA_M_PER_CHIP)
        else:
            if self.arch.startswith("vdfll"):
                ch.fd_hat[c] = ch.theta.f_pll + float(ch.kst.x[2])
                ch.dtau_hat[c] = float(ch.kst.x[0])
            else:
                ch.fd_hat[c] = ch.fstate.acc
                ch.dtau_hat[c] = 0.0
            rho_meas = (SPEED_OF_LIGHT * (ch.nco.t_rx - ch.nco.t_tx)
                        - KAPPA_M_PER_CHIP * ch.dtau_hat[c])
            ch.rho_err[c] = rho_meas - SPEED_OF_LIGHT * float(ch.st.tau(t1))

    # -- navigation epoch ---------------------------------------------------

    def _observation(self, ch: _Chan, c: int,
                     t1: float) -> ChannelObservation | None:
        if not ch.tracker.locked:
            return None
        if self.fidelity == "sample":
            return og_generate(ch.nco, ch.prn, ch.fd_hat[c],
                               delta_tau=ch.dtau_hat[c], locked=True)
        rho = SPEED_OF_LIGHT * float(ch.st.tau(t1)) + ch.rho_err[c]
        try:
            return ChannelObservation(rho_tilde=rho, fd_tilde=ch.fd_hat[c],
                                      t_rx=t1, prn=ch.prn)
        except ValueError:
            return None

    def _nav_step(self, c: int) -> None:
        t1 = (c + 1) * self.nav_dt
        i0 = c * self.imu_per_nav
        imu_dt = self.nav_dt / self.imu_per_nav
        for j in range(self.imu_per_nav):
            self.nav = ins_mechanize(self.nav, self.imu[i0 + j], imu_dt)
        mid = self.imu[i0 + self.imu_per_nav // 2]
        self.err = ekf_propagate(self.err, self.nav, mid, self.nav_dt,
                                 self.noise)

        sat_eps = {prn: sat_epoch(s, t1) for prn, s in self.sats.items()}
        valid = set(self.sats) if t1 >= self.warmup - 1e-9 else set()
        tracked = {prn for prn, ch in self.channels.items()
                   if ch.tracker.locked}

        obs = []
        r_map = {}
        for prn in sorted(valid & tracked):
            ch = self.channels[prn]
            ob = self._observation(ch, c, t1)
            if ob is None:
                continue
            if abs(ob.t_rx - t1) > 0.5 * self.t_int + 1e-12:
                raise RunAbort(
                    f"observation timestamp {ob.t_rx:.6f} misaligned with "
                    f"navigation epoch", epoch=(c + 1) * self.chunk, t=t1,
                    channel=prn)
            obs.append(ob)
            var_tau, _, var_fd = variance_from_cn0(ch.tracker.cn0_est)
            r_map[prn] = (KAPPA_M_PER_CHIP ** 2 * var_tau, var_fd)
        if obs:
            self.err, self.nav = ekf_update(self.err, self.nav, obs, sat_eps,
                                            r_map)

        cov_pos = float(np.trace(self.err.P[:3, :3]))
        self.switch.step(t1, tracked, valid, cov_pos)

        imu_next = self.imu[min(i0 + self.imu_per_nav, len(self.imu) - 1)]
        if self.aid is not None:
            self.aid_prev_fd_dot = {prn: e.fd_dot
                                    for prn, e in self.aid.entries.items()}
        if valid:
            self.aid = make_feedback(self.nav, sat_eps, imu_next, t1)
        self._telemetry_row(c, t1, obs, cov_pos)

    def _telemetry_row(self, c, t1, obs, cov_pos):
        row = {
            "t": round(t1, 6),
            "mode": self.switch.mode,
            "p": [float(v) for v in self.nav.p],
            "v": [float(v) for v in self.nav.v],
            "q": [float(v) for v in self.nav.q],
            "clk_b": float(self.nav.clk_b),
            "clk_d": float(self.nav.clk_d),
            "cov_trace_pos": cov_pos,
            "n_obs": len(obs),
        }
        if self.aid is not None and abs(self.aid.t - t1) < 1e-9:
            row["sats"] = {str(p): {"rho": e.rho, "rho_dot": e.rho_dot,
                                    "fd_dot": e.fd_dot}
                           for p, e in sorted(self.aid.entries.items())}
        self.nav_rows.append(row)

    # -- top level ----------------------------------------------------------

    def run(self) -> None:
        for c in range(self.n_chunks):
            t0 = c * self.nav_dt
            try:
                if self.fidelity == "measurement":
                    self._chunk_measurement(c)
                else:
                    block = synthesize_block(self.truth, t0, self.nav_dt,
                                             self.fs, self.seed,
                                             sigma=self.sigma)
                    self._chunk_sample(c, block)
                self._nav_step(c)
            except RunAbort:
                raise
            except Exception as e:
                raise RunAbort(f"{type(e).__name__}: {e}",
                               epoch=(c + 1) * self.chunk,
                               t=t0 + self.nav_dt) from e

    # -- metrics ------------------------------------------------------------

    def _levels(self) -> list[tuple[float, list[tuple[float, float]]]]:
        """Constant-C/N0 plateaus of the schedule, clipped to the run."""
        spans: dict[float, list] = {}
        for t0, t1, c0, c1 in self.sched.segments:
            if c0 == c1:
                hi = min(t1, self.n_epochs * self.t_int)
                if hi > t0:
                    spans.setdefault(float(c0), []).append((float(t0), hi))
        return sorted(spans.items(), reverse=True)

    def _converged_after(self) -> float | None:
        if self.switch.t_switch is None:
            return None
        return self.switch.t_switch + 5.0

    def metrics(self, runtime_s: float) -> MetricsReport:
        conv = self._converged_after()
        lock_t = (np.arange(len(next(iter(self.channels.values()))
                                .tracker.locked_series)) + 1.0) * WINDOW_S
        win_per_chunk = int(round(self.nav_dt / WINDOW_S))

        site = self.traj.at(0.0).p_u
        lat, lon, _ = ecef2llh(site)
        enu = enu_matrix(lat, lon)

        per_sat = {}
        for prn, ch in self.channels.items():
            locked_w = np.asarray(ch.tracker.locked_series, dtype=bool)
            locked_b = locked_w[win_per_chunk - 1::win_per_chunk]
            fd_true = ch.st.fd(self.tb)
            d = self.sats[prn].__dict__
            e0 = sat_epoch(self.sats[prn], 0.0).p - site
            el = math.degrees(math.asin(
                float(enu[:, 2] @ (e0 / np.linalg.norm(e0)))))
            levels = {}
            for level, spans in self._levels():
                m_b = np.zeros(self.n_chunks, dtype=bool)
                m_w = np.zeros(lock_t.size, dtype=bool)
                for a, b in spans:
                    m_b |= (self.tb >= a) & (self.tb <= b)
                    m_w |= (lock_t >= a) & (lock_t <= b)
                if conv is not None:
                    m_b &= self.tb >= conv
                    m_w &= lock_t >= conv
                else:
                    m_b[:] = False
                    m_w[:] = False
                m_rmse = m_b & locked_b
                levels[f"{level:g}"] = {
                    "rho_rmse_m": rmse(ch.rho_err, np.zeros(self.n_chunks),
                                       m_rmse),
                    "fd_rmse_hz": rmse(ch.fd_hat, fd_true, m_rmse),
                    "lock_fraction": (float(locked_w[m_w].mean())
                                      if m_w.any() else None),
                    "n_rmse": int(m_rmse.sum()),
                    "n_lock": int(m_w.sum()),
                }
            per_sat[str(prn)] = {"elevation_deg": round(el, 2),
                                 "levels": levels}
            del d

        pos_err = np.array([np.linalg.norm(
            np.asarray(r["p"]) - self.traj.at(r["t"]).p_u)
            for r in self.nav_rows])
        t_nav = np.array([r["t"] for r in self.nav_rows])
        if conv is None:
            pos_rmse, n_pos = None, 0
        else:
            m = t_nav >= conv
            n_pos = int(m.sum())
            pos_rmse = (float(np.sqrt(np.mean(pos_err[m] ** 2)))
                        if n_pos else None)

        meta = {
            "arch": self.arch,
            "seed": self.seed,
            "fidelity": self.fidelity,
            "scenario": self.scen.name,
            "scenario_hash": self.scen.scenario_hash(),
            "levels_dbhz": [lv for lv, _ in self._levels()],
            "t_int_s": self.t_int,
            "nav_rate_hz": 1.0 / self.nav_dt,
            "duration_s": self.n_epochs * self.t_int,
            "convergence_window_s": 5.0,
            "stale_feedback_chunks": self.stale_events,
        }
        if self.arch.startswith("vdfll"):
            meta["q_fd_hz2"] = self.q_fd
            meta["q_tau_chips2"] = self.q_tau
            meta["q_phi_cycles2"] = self.q_phi
            meta["k_cpg"] = self.k_cpg
        if self.arch == "alfa":
            meta["pll_bw_hz"] = self.scen.data["tracking"]["alfa"]["pll_bw"]
        if self.arch == "stl":
            meta["pll_bw_hz"] = self.scen.data["tracking"]["stl"]["pll_bw"]
            meta["k_f"] = self.k_f

        per_run = {
            "position_rmse_m": pos_rmse,
            "n_pos": n_pos,
            "mode_switch_time_s": self.switch.t_switch,
        }
        return MetricsReport(metadata=meta, per_satellite=per_sat,
                             per_run=per_run)

    # -- file output ---------------------------------------------------------

    def write_outputs(self, out_dir: Path, report: MetricsReport,
                      runtime_s: float) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        report.save(out_dir / "metrics.json")
        with open(out_dir / "telemetry.jsonl", "w") as f:
            for row in self.nav_rows:
                f.write(json.dumps(row, sort_keys=True) + "\n")
        with open(out_dir / "channel_telemetry.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["t", "prn", "locked", "cn0_dbhz", "fd_hat_hz",
                        "fd_err_hz", "rho_err_m", "mode", "stale"])
            win_per_chunk = int(round(self.nav_dt / WINDOW_S))
            mode_names = {MODE_STL: "stl", MODE_ALFA: "alfa",
                          MODE_KF: "kf", MODE_CPG: "cpg"}
            for prn, ch in sorted(self.channels.items()):
                fd_true = ch.st.fd(self.tb)
                locked_w = ch.tracker.locked_series
                cn0_w = ch.tracker.cn0_series
                for c in range(self.n_chunks):
                    wi = (c + 1) * win_per_chunk - 1
                    w.writerow([
                        f"{self.tb[c]:.3f}", prn, int(locked_w[wi]),
                        f"{cn0_w[wi]:.2f}", f"{ch.fd_hat[c]:.6f}",
                        f"{ch.fd_hat[c] - fd_true[c]:.6f}",
                        f"{ch.rho_err[c]:.4f}",
                        mode_names[int(ch.mode_hist[c])],
                        int(ch.stale_hist[c]),
                    ])
        info = {
            "backend": kernels.BACKEND,
            "runtime_s": round(runtime_s, 3),
            "n_epochs": self.n_epochs,
            "n_chunks": self.n_chunks,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
        }
        (out_dir / "run_info.json").write_text(
            json.dumps(info, sort_keys=True, indent=2) + "\n")


def run(config: RunConfig) -> MetricsReport:
    """Execute one experiment; writes output files when out_dir is set.

    Raises ConfigError for bad configuration and RunAbort when a module
    fails mid-run (the abort names the epoch and channel).
    """
    config.validate()
    scen = config.resolve()
    seed = config.seed if config.seed is not None else scen.seed
    t0 = time.perf_counter()
    eng = _Engine(scen, config.arch, seed, config.fidelity)
    eng.run()
    runtime = time.perf_counter() - t0
    report = eng.metrics(runtime)
    if config.out_dir is not None:
        eng.write_outputs(Path(config.out_dir), report, runtime)
    return report


# ---------------------------------------------------------------------------
# comparison of runs
# ---------------------------------------------------------------------------

def compare(reports: Sequence[MetricsReport],
            out_dir: str | Path | None = None) -> dict:
    """Cross-architecture table from reports of the same scenario and seed.

    The first report is the baseline for the delta columns. Emits a CSV
    table and a plot-ready JSON document (RMSE axes annotated log-scale)
    when ``out_dir`` is given. Reports from different scenarios or seeds
    are rejected.
    """
    if not reports:
        raise ValueError("at least one report required")
    base = reports[0]
    for r in reports[1:]:
        if r.metadata["scenario_hash"] != base.metadata["scenario_hash"]:
            raise ValueError(
                "reports come from different scenarios: "
                f"{r.metadata['scenario']} vs {base.metadata['scenario']}")
        if r.metadata["seed"] != base.metadata["seed"]:
            raise ValueError("reports use different seeds: "
                             f"{r.metadata['seed']} vs "
                             f"{base.metadata['seed']}")

    levels = base.metadata["levels_dbhz"]
    rows = []
    for r in reports:
        for prn, sat in sorted(r.per_satellite.items(), key=lambda kv:
                               int(kv[0])):
            for lv in levels:
                cell = sat["levels"][f"{lv:g}"]
                bcell = base.per_satellite[prn]["levels"][f"{lv:g}"]
                rows.append({
                    "arch": r.metadata["arch"],
                    "seed": r.metadata["seed"],
                    "prn": int(prn),
                    "elevation_deg": sat["elevation_deg"],
                    "cn0_dbhz": lv,
                    "rho_rmse_m": cell["rho_rmse_m"],
                    "fd_rmse_hz": cell["fd_rmse_hz"],
                    "lock_fraction": cell["lock_fraction"],
                    "n_rmse": cell["n_rmse"],
                    "delta_rho_m": _delta(cell["rho_rmse_m"],
                                          bcell["rho_rmse_m"]),
                    "delta_fd_hz": _delta(cell["fd_rmse_hz"],
                                          bcell["fd_rmse_hz"]),
                })

    q_settings = {}
    for r in reports:
        if "q_fd_hz2" in r.metadata:
            q_settings[r.metadata["arch"]] = {
                "q_fd_hz2": r.metadata["q_fd_hz2"],
                "q_tau_chips2": r.metadata["q_tau_chips2"],
                "q_phi_cycles2": r.metadata["q_phi_cycles2"],
            }

    doc = {
        "metadata": {
            "scenario": base.metadata["scenario"],
            "scenario_hash": base.metadata["scenario_hash"],
            "seed": base.metadata["seed"],
            "baseline_arch": base.metadata["arch"],
            "architectures": [r.metadata["arch"] for r in reports],
            "q_settings": q_settings,
        },
        "axes": {
            "x": {"label": "C/N0 (dB-Hz)", "values": levels},
            "rho_rmse_m": {"label": "pseudorange RMSE (m)", "scale": "log"},
            "fd_rmse_hz": {"label": "Doppler RMSE (Hz)", "scale": "log"},
            "lock_fraction": {"label": "lock fraction", "scale": "linear"},
        },
        "series": [
            {
                "arch": r.metadata["arch"],
                "prn": int(prn),
                "elevation_deg": sat["elevation_deg"],
                "rho_rmse_m": [sat["levels"][f"{lv:g}"]["rho_rmse_m"]
                               for lv in levels],
                "fd_rmse_hz": [sat["levels"][f"{lv:g}"]["fd_rmse_hz"]
                               for lv in levels],
                "lock_fraction": [sat["levels"][f"{lv:g}"]["lock_fraction"]
                                  for lv in levels],
            }
            for r in reports
            for prn, sat in sorted(r.per_satellite.items(),
                                   key=lambda kv: int(kv[0]))
        ],
        "table": rows,
    }

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        cols = ["arch", "seed", "prn", "elevation_deg", "cn0_dbhz",
                "rho_rmse_m", "fd_rmse_hz", "lock_fraction", "n_rmse",
                "delta_rho_m", "delta_fd_hz"]
        with open(out_dir / "comparison.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=cols)
            w.writeheader()
            w.writerows(rows)
        (out_dir / "comparison.json").write_text(
            json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return doc


def _delta(v, base):
    if v is None or base is None:
        return None
    return v - base
