"""Reference numpy implementations of the hot numeric kernels.

These are the semantics of record: the compiled module must agree with this
file (see the backend equivalence tests). Phases are linearized over a call,
so callers re-anchor code phase and carrier phase per block from their own
state. Carrier phase arguments are fractional cycles.

Besides the sample-domain kernels (synth_add, correlate_epl) this module
holds track_chunk, the measurement-fidelity channel engine: it evolves one
channel through a run of integration epochs entirely in tracking-error
coordinates, modeling the correlator outputs statistically instead of
integrating samples. The state-vector slot layout and output column layout
are shared with the compiled implementation and exported as constants.
"""
from __future__ import annotations

import math

import numpy as np

TWO_PI = 2.0 * np.pi

# track_chunk state-vector slots (float64[STATE_SIZE], mutated in place)
S_DTAU = 0      # code tracking error, chips (incoming minus replica)
S_DPHI = 1      # carrier phase tracking error, cycles
S_FDLL = 2      # applied code-rate command, chips/s relative to nominal
S_FPLL = 3      # applied carrier command, Hz
S_ACC = 4       # scalar loop-filter accumulator, Hz
S_PIP = 5       # previous prompt I (FLL memory)
S_PQP = 6       # previous prompt Q
S_PVALID = 7    # 1.0 once a previous prompt exists
S_X = 8         # Kalman error estimate x[0..2] in slots 8..10
S_P = 11        # Kalman covariance, row-major 3x3 in slots 11..19
STATE_SIZE = 20

# loop-closure modes
MODE_STL = 0    # scalar filter, FLL assist from the frequency discriminator
MODE_ALFA = 1   # scalar filter, external Doppler-rate assist (gains[4])
MODE_KF = 2     # per-channel Kalman filter closes the loop
MODE_CPG = 3    # external range feedback closes the loop; KF estimates only

# track_chunk output columns (float64[n, OUT_COLS])
O_IP = 0        # prompt I after this epoch's integration
O_QP = 1        # prompt Q
O_DTAU = 2      # true code error at epoch end, chips
O_DPHI = 3      # true phase error at epoch end, cycles
O_DFD = 4       # true mean frequency error over the epoch, Hz
O_FDLL = 5      # code-rate command issued at epoch end, chips/s
O_FPLL = 6      # carrier command issued at epoch end, Hz
O_DISC_TAU = 7  # code discriminator output, chips (NaN when dead)
O_DISC_PHI = 8  # phase discriminator output, cycles
O_DISC_FD = 9   # frequency discriminator output, Hz
OUT_COLS = 10

_F_PLL_SAT = 45_000.0


def _sat(f: float) -> float:
    if f > _F_PLL_SAT:
        return _F_PLL_SAT
    if f < -_F_PLL_SAT:
        return -_F_PLL_SAT
    return f


def _tri(x: float) -> float:
    ax = abs(x)
    return 1.0 - ax if ax < 1.0 else 0.0


def _sinc(x: float) -> float:
    if abs(x) < 1e-12:
        return 1.0
    z = math.pi * x
    return math.sin(z) / z


def track_chunk(state: np.ndarray, mode: int, spacing: float,
                code_scale: float, gains: np.ndarray, kf_params: np.ndarray,
                rkf: np.ndarray, cpg_params: np.ndarray, derr0: np.ndarray,
                dphi_true: np.ndarray, bits: np.ndarray, amp: np.ndarray,
                noise: np.ndarray, epoch0: int, out: np.ndarray) -> None:
    """Advance one channel through n epochs at measurement fidelity.

    Error coordinates: the truth enters only through dphi_true (carrier
    cycles the incoming signal advances per epoch); the code advance is
    slaved to it by code_scale, matching the signal synthesizer. Correlator
    outputs are modeled as triangle-correlation signal terms with the exact
    early/prompt/late noise correlation for the given spacing, then fed to
    the same discriminator formulas as the sample-domain channel. Commands
    computed at epoch k drive epoch k+1 (one-epoch latency).

    gains = [k1, k2, k3, sf, assist, t_int]; assist is the FLL gain in
    MODE_STL and the Doppler-rate value in MODE_ALFA. kf_params =
    [t_int, alpha, pullin, q_tau, q_phi, q_fd]; rkf is (n, 3) per-epoch
    measurement variances. cpg_params = [f_pll, k_cpg, sf, t_int]; derr0 is
    the per-epoch predicted-minus-true range error in chips, evaluated at
    each epoch's end. noise is (n, 6) unit normals. The FLL discriminator
    is suppressed whenever epoch0 + k crosses a 20 ms bit boundary.
    """
    n = dphi_true.shape[0]
    k1, k2, k3, sf_g, assist, t_g = (float(v) for v in gains)
    t_kf, alpha, pullin = float(kf_params[0]), float(kf_params[1]), float(kf_params[2])
    q_diag = np.array([kf_params[3], kf_params[4], kf_params[5]], dtype=float)
    cpg_fpll, k_cpg, sf_c, t_c = (float(v) for v in cpg_params)
    t_i = t_g if mode <= MODE_ALFA else (t_kf if mode == MODE_KF else t_c)
    sf = sf_g if mode <= MODE_ALFA else (alpha if mode == MODE_KF else sf_c)

    # Cholesky factor of the E/P/L noise correlation (triangle overlaps)
    c_ep = 1.0 - 0.5 * spacing
    c_el = 1.0 - spacing
    l21 = c_ep
    l22 = math.sqrt(1.0 - c_ep * c_ep)
    l31 = c_el
    l32 = (c_ep - c_el * c_ep) / l22
    l33 = math.sqrt(max(1.0 - l31 * l31 - l32 * l32, 0.0))

    x = state[S_X:S_X + 3]
    p = state[S_P:S_P + 9].reshape(3, 3)
    eye = np.eye(3)

    for k in range(n):
        f_dll = state[S_FDLL]
        f_pll = state[S_FPLL]
        ddphi = dphi_true[k] - f_pll * t_i
        ddtau = dphi_true[k] * code_scale - f_dll * t_i
        dtau_mid = state[S_DTAU] + 0.5 * ddtau
        dphi_mid = state[S_DPHI] + 0.5 * ddphi
        dfd_avg = ddphi / t_i

        xm = math.fmod(dtau_mid + 511.5, 1023.0)
        if xm < 0.0:
            xm += 1023.0
        xm -= 511.5
        re = _tri(xm - 0.5 * spacing)
        rp = _tri(xm)
        rl = _tri(xm + 0.5 * spacing)
        a = amp[k] * bits[k] * _sinc(dfd_avg * t_i)
        cph = math.cos(TWO_PI * dphi_mid)
        sph = math.sin(TWO_PI * dphi_mid)
        zi0, zi1, zi2, zq0, zq1, zq2 = noise[k]
        ie = a * re * cph + zi0
        qe = a * re * sph + zq0
        ip = a * rp * cph + (l21 * zi0 + l22 * zi1)
        qp = a * rp * sph + (l21 * zq0 + l22 * zq1)
        il = a * rl * cph + (l31 * zi0 + l32 * zi1 + l33 * zi2)
        ql = a * rl * sph + (l31 * zq0 + l32 * zq1 + l33 * zq2)

        e_pow = ie * ie + qe * qe
        l_pow = il * il + ql * ql
        if e_pow + l_pow <= 0.0:
            d_tau = float("nan")
        else:
            d_tau = 0.5 * (1.0 - 0.5 * spacing) * (e_pow - l_pow) / (e_pow + l_pow)
        if ip == 0.0:
            d_phi = 0.25 if qp != 0.0 else float("nan")
        else:
            d_phi = math.atan(qp / ip) / TWO_PI
        d_fd = float("nan")
        if state[S_PVALID] != 0.0 and (epoch0 + k) % 20 != 0:
            cross = state[S_PIP] * qp - ip * state[S_PQP]
            dot = state[S_PIP] * ip + state[S_PQP] * qp
            if cross != 0.0 or dot != 0.0:
                d_fd = math.atan2(cross, dot) / (TWO_PI * t_i)
        state[S_PIP] = ip
        state[S_PQP] = qp
        state[S_PVALID] = 1.0

        state[S_DTAU] += ddtau
        state[S_DPHI] += ddphi

        if mode <= MODE_ALFA:
            dt_in = 0.0 if math.isnan(d_tau) else d_tau
            dp_in = 0.0 if math.isnan(d_phi) else d_phi
            if mode == MODE_STL:
                aid = 0.0 if math.isnan(d_fd) else assist * d_fd
            else:
                aid = assist
            acc = state[S_ACC]
            new_fpll = _sat(acc + k3 * dp_in)
            new_fdll = k1 * dt_in + sf * acc
            state[S_ACC] = _sat(acc + t_i * (k2 * dp_in + aid))
        else:
            # predict under the command that drove this epoch
            x[0] += alpha * t_i * x[2] - t_i * f_dll + alpha * t_i * f_pll
            x[1] += t_i * x[2]
            f = np.array([[1.0, 0.0, alpha * t_i],
                          [0.0, 1.0, t_i],
                          [0.0, 0.0, 1.0]])
            p[:] = f @ p @ f.T
            p[0, 0] += q_diag[0]
            p[1, 1] += q_diag[1]
            p[2, 2] += q_diag[2]
            z3 = (d_tau, d_phi, d_fd)
            for i in range(3):
                zi = z3[i]
                if math.isnan(zi):
                    continue
                s = p[i, i] + rkf[k, i]
                g = p[:, i] / s
                x += g * (zi - x[i])
                ikh = eye - np.outer(g, eye[i])
                p[:] = ikh @ p @ ikh.T + rkf[k, i] * np.outer(g, g)
                p[:] = 0.5 * (p + p.T)
            if mode == MODE_KF:
                new_fpll = _sat(f_pll + x[2] + x[1] / t_i)
                new_fdll = sf * new_fpll + pullin * (x[0] / t_i)
            else:
                new_fpll = _sat(cpg_fpll)
                new_fdll = sf * new_fpll \
                    - k_cpg * (derr0[k] - state[S_DTAU]) / t_i
            x[2] += f_pll - new_fpll

        state[S_FDLL] = new_fdll
        state[S_FPLL] = new_fpll
        out[k, O_IP] = ip
        out[k, O_QP] = qp
        out[k, O_DTAU] = state[S_DTAU]
        out[k, O_DPHI] = state[S_DPHI]
        out[k, O_DFD] = dfd_avg
        out[k, O_FDLL] = new_fdll
        out[k, O_FPLL] = new_fpll
        out[k, O_DISC_TAU] = d_tau
        out[k, O_DISC_PHI] = d_phi
        out[k, O_DISC_FD] = d_fd


def synth_add(i_out: np.ndarray, q_out: np.ndarray, code: np.ndarray,
              amp: float, tau0: float, f_code: float,
              phi0: float, f_carr: float, fs: float) -> None:
    """Add one satellite's samples in place.

    tau0 chips and f_code chips/s index the spreading code; phi0 cycles and
    f_carr Hz drive the complex carrier exp(+j*2*pi*phi). amp carries the
    navigation bit sign.
    """
    n = i_out.size
    t = np.arange(n) / fs
    tau = tau0 + f_code * t
    chips = code[np.floor(tau).astype(np.int64) % 1023]
    ph = TWO_PI * (phi0 + f_carr * t)
    i_out += amp * chips * np.cos(ph)
    q_out += amp * chips * np.sin(ph)


def correlate_epl(i_in: np.ndarray, q_in: np.ndarray, code: np.ndarray,
                  tau0: float, f_code: float, phi0: float, f_carr: float,
                  fs: float, spacing: float):
    """Early/prompt/late I-Q accumulations against a local replica.

    The replica wipes the carrier with exp(-j*2*pi*phi) and the early and
    late code taps lead and lag the prompt by spacing/2 chips. Returns
    (ie, qe, ip, qp, il, ql).
    """
    n = i_in.size
    t = np.arange(n) / fs
    tau = tau0 + f_code * t
    ph = TWO_PI * (phi0 + f_carr * t)
    c, s = np.cos(ph), np.sin(ph)
    # x * exp(-j ph) for x = i + jq
    wi = i_in * c + q_in * s
    wq = q_in * c - i_in * s

    half = 0.5 * spacing
    out = []
    for offset in (half, 0.0, -half):
        chips = code[np.floor(tau + offset).astype(np.int64) % 1023]
        out.append(float(chips @ wi))
        out.append(float(chips @ wq))
    return tuple(out)
