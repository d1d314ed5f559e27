# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled fast paths for sample synthesis, correlation and the
measurement-fidelity tracking engine.

Must stay equivalent to gnsslab.kernels._ref; the carrier is advanced by
complex phasor recursion (renormalized periodically) instead of per-sample
trig, which keeps agreement with the reference well inside 1e-9 relative.
"""

from libc.math cimport atan, atan2, cos, fabs, floor, fmod, isnan, sin, sqrt

cdef double TWO_PI = 6.283185307179586476925287
cdef double NAN_D = float("nan")
cdef double F_PLL_SAT = 45000.0


cdef inline long _chip_index(double tau) nogil:
    cdef long idx = <long>floor(tau)
    idx %= 1023
    if idx < 0:
        idx += 1023
    return idx


def synth_add(double[::1] i_out, double[::1] q_out, const double[::1] code,
              double amp, double tau0, double f_code,
              double phi0, double f_carr, double fs):
    """Add one satellite's samples in place (see kernels._ref.synth_add)."""
    cdef Py_ssize_t n = i_out.shape[0]
    cdef Py_ssize_t k
    cdef double t, tau, chip, norm
    cdef double c = cos(TWO_PI * phi0)
    cdef double s = sin(TWO_PI * phi0)
    cdef double dc = cos(TWO_PI * f_carr / fs)
    cdef double ds = sin(TWO_PI * f_carr / fs)
    cdef double c_new
    with nogil:
        for k in range(n):
            t = <double>k / fs
            tau = tau0 + f_code * t
            chip = amp * code[_chip_index(tau)]
            i_out[k] += chip * c
            q_out[k] += chip * s
            c_new = c * dc - s * ds
            s = s * dc + c * ds
            c = c_new
            if (k & 1023) == 1023:
                norm = 1.0 / sqrt(c * c + s * s)
                c *= norm
                s *= norm


def correlate_epl(const double[::1] i_in, const double[::1] q_in, const double[::1] code,
                  double tau0, double f_code, double phi0, double f_carr,
                  double fs, double spacing):
    """E/P/L I-Q accumulations (see kernels._ref.correlate_epl)."""
    cdef Py_ssize_t n = i_in.shape[0]
    cdef Py_ssize_t k
    cdef double t, tau, wi, wq, chip, norm
    cdef double half = 0.5 * spacing
    cdef double c = cos(TWO_PI * phi0)
    cdef double s = sin(TWO_PI * phi0)
    cdef double dc = cos(TWO_PI * f_carr / fs)
    cdef double ds = sin(TWO_PI * f_carr / fs)
    cdef double c_new
    cdef double ie = 0.0, qe = 0.0, ip = 0.0, qp = 0.0, il = 0.0, ql = 0.0
    with nogil:
        for k in range(n):
            t = <double>k / fs
            tau = tau0 + f_code * t
            # wipe the carrier: (i + jq) * exp(-j 2 pi phi)
            wi = i_in[k] * c + q_in[k] * s
            wq = q_in[k] * c - i_in[k] * s
            chip = code[_chip_index(tau + half)]
            ie += chip * wi
            qe += chip * wq
            chip = code[_chip_index(tau)]
            ip += chip * wi
            qp += chip * wq
            chip = code[_chip_index(tau - half)]
            il += chip * wi
            ql += chip * wq
            c_new = c * dc - s * ds
            s = s * dc + c * ds
            c = c_new
            if (k & 1023) == 1023:
                norm = 1.0 / sqrt(c * c + s * s)
                c *= norm
                s *= norm
    return ie, qe, ip, qp, il, ql


# ---------------------------------------------------------------------------
# measurement-fidelity tracking engine (see kernels._ref.track_chunk for the
# semantics of record; slot/column layout constants live there)

cdef inline double _sat(double f) nogil:
    if f > F_PLL_SAT:
        return F_PLL_SAT
    if f < -F_PLL_SAT:
        return -F_PLL_SAT
    return f


cdef inline double _tri(double x) nogil:
    cdef double ax = fabs(x)
    if ax < 1.0:
        return 1.0 - ax
    return 0.0


cdef inline double _sinc(double x) nogil:
    cdef double z
    if fabs(x) < 1e-12:
        return 1.0
    z = 3.14159265358979323846264338327950288 * x
    return sin(z) / z


def track_chunk(double[::1] state, int mode, double spacing,
                double code_scale, const double[::1] gains,
                const double[::1] kf_params, const double[:, ::1] rkf,
                const double[::1] cpg_params, const double[::1] derr0,
                const double[::1] dphi_true, const double[::1] bits,
                const double[::1] amp, const double[:, ::1] noise,
                long epoch0, double[:, ::1] out):
    """Advance one channel through n epochs (see kernels._ref.track_chunk)."""
    cdef Py_ssize_t n = dphi_true.shape[0]
    cdef double k1 = gains[0], k2 = gains[1], k3 = gains[2]
    cdef double sf_g = gains[3], assist = gains[4], t_g = gains[5]
    cdef double t_kf = kf_params[0], alpha = kf_params[1], pullin = kf_params[2]
    cdef double q0 = kf_params[3], q1 = kf_params[4], q2 = kf_params[5]
    cdef double cpg_fpll = cpg_params[0], k_cpg = cpg_params[1]
    cdef double sf_c = cpg_params[2], t_c = cpg_params[3]
    cdef double t_i, sf
    if mode <= 1:
        t_i = t_g
        sf = sf_g
    elif mode == 2:
        t_i = t_kf
        sf = alpha
    else:
        t_i = t_c
        sf = sf_c

    cdef double c_ep = 1.0 - 0.5 * spacing
    cdef double c_el = 1.0 - spacing
    cdef double l21 = c_ep
    cdef double l22 = sqrt(1.0 - c_ep * c_ep)
    cdef double l31 = c_el
    cdef double l32 = (c_ep - c_el * c_ep) / l22
    cdef double l33v = 1.0 - l31 * l31 - l32 * l32
    cdef double l33 = sqrt(l33v) if l33v > 0.0 else 0.0

    cdef double x0 = state[8], x1 = state[9], x2 = state[10]
    cdef double p00 = state[11], p01 = state[12], p02 = state[13]
    cdef double p10 = state[14], p11 = state[15], p12 = state[16]
    cdef double p20 = state[17], p21 = state[18], p22 = state[19]

    cdef Py_ssize_t k
    cdef int i
    cdef double f_dll, f_pll, ddphi, ddtau, dtau_mid, dphi_mid, dfd_avg
    cdef double xm, re, rp, rl, a, cph, sph
    cdef double zi0, zi1, zi2, zq0, zq1, zq2
    cdef double ie, qe, ip, qp, il, ql
    cdef double e_pow, l_pow, d_tau, d_phi, d_fd, cross, dot
    cdef double dt_in, dp_in, aid, acc, new_fpll, new_fdll
    cdef double a02, a12, t00, t01, t02, t10, t11, t12, t20, t21, t22
    cdef double s, g0, g1, g2, zi, r
    cdef double k00, k01, k02, k10, k11, k12, k20, k21, k22
    cdef double zv0, zv1, zv2

    with nogil:
        for k in range(n):
            f_dll = state[2]
            f_pll = state[3]
            ddphi = dphi_true[k] - f_pll * t_i
            ddtau = dphi_true[k] * code_scale - f_dll * t_i
            dtau_mid = state[0] + 0.5 * ddtau
            dphi_mid = state[1] + 0.5 * ddphi
            dfd_avg = ddphi / t_i

            xm = fmod(dtau_mid + 511.5, 1023.0)
            if xm < 0.0:
                xm += 1023.0
            xm -= 511.5
            re = _tri(xm - 0.5 * spacing)
            rp = _tri(xm)
            rl = _tri(xm + 0.5 * spacing)
            a = amp[k] * bits[k] * _sinc(dfd_avg * t_i)
            cph = cos(TWO_PI * dphi_mid)
            sph = sin(TWO_PI * dphi_mid)
            zi0 = noise[k, 0]
            zi1 = noise[k, 1]
            zi2 = noise[k, 2]
            zq0 = noise[k, 3]
            zq1 = noise[k, 4]
            zq2 = noise[k, 5]
            ie = a * re * cph + zi0
            qe = a * re * sph + zq0
            ip = a * rp * cph + (l21 * zi0 + l22 * zi1)
            qp = a * rp * sph + (l21 * zq0 + l22 * zq1)
            il = a * rl * cph + (l31 * zi0 + l32 * zi1 + l33 * zi2)
            ql = a * rl * sph + (l31 * zq0 + l32 * zq1 + l33 * zq2)

            e_pow = ie * ie + qe * qe
            l_pow = il * il + ql * ql
            if e_pow + l_pow <= 0.0:
                d_tau = NAN_D
            else:
                d_tau = 0.5 * (1.0 - 0.5 * spacing) * (e_pow - l_pow) / (e_pow + l_pow)
            if ip == 0.0:
                d_phi = 0.25 if qp != 0.0 else NAN_D
            else:
                d_phi = atan(qp / ip) / TWO_PI
            d_fd = NAN_D
            if state[7] != 0.0 and (epoch0 + k) % 20 != 0:
                cross = state[5] * qp - ip * state[6]
                dot = state[5] * ip + state[6] * qp
                if cross != 0.0 or dot != 0.0:
                    d_fd = atan2(cross, dot) / (TWO_PI * t_i)
            state[5] = ip
            state[6] = qp
            state[7] = 1.0

            state[0] += ddtau
            state[1] += ddphi

            if mode <= 1:
                dt_in = 0.0 if isnan(d_tau) else d_tau
                dp_in = 0.0 if isnan(d_phi) else d_phi
                if mode == 0:
                    aid = 0.0 if isnan(d_fd) else assist * d_fd
                else:
                    aid = assist
                acc = state[4]
                new_fpll = _sat(acc + k3 * dp_in)
                new_fdll = k1 * dt_in + sf * acc
                state[4] = _sat(acc + t_i * (k2 * dp_in + aid))
            else:
                # predict under the command that drove this epoch
                a02 = alpha * t_i
                a12 = t_i
                x0 = x0 + a02 * x2 - t_i * f_dll + a02 * f_pll
                x1 = x1 + a12 * x2
                # P = F P F^T + Q with F = [[1,0,a02],[0,1,a12],[0,0,1]]
                t00 = p00 + a02 * p20
                t01 = p01 + a02 * p21
                t02 = p02 + a02 * p22
                t10 = p10 + a12 * p20
                t11 = p11 + a12 * p21
                t12 = p12 + a12 * p22
                t20 = p20
                t21 = p21
                t22 = p22
                p00 = t00 + t02 * a02 + q0
                p01 = t01 + t02 * a12
                p02 = t02
                p10 = t10 + t12 * a02
                p11 = t11 + t12 * a12 + q1
                p12 = t12
                p20 = t20 + t22 * a02
                p21 = t21 + t22 * a12
                p22 = t22 + q2
                for i in range(3):
                    if i == 0:
                        zi = d_tau
                    elif i == 1:
                        zi = d_phi
                    else:
                        zi = d_fd
                    if isnan(zi):
                        continue
                    r = rkf[k, i]
                    if i == 0:
                        s = p00 + r
                        g0 = p00 / s
                        g1 = p10 / s
                        g2 = p20 / s
                        zv0 = zi - x0
                        x0 += g0 * zv0
                        x1 += g1 * zv0
                        x2 += g2 * zv0
                    elif i == 1:
                        s = p11 + r
                        g0 = p01 / s
                        g1 = p11 / s
                        g2 = p21 / s
                        zv1 = zi - x1
                        x0 += g0 * zv1
                        x1 += g1 * zv1
                        x2 += g2 * zv1
                    else:
                        s = p22 + r
                        g0 = p02 / s
                        g1 = p12 / s
                        g2 = p22 / s
                        zv2 = zi - x2
                        x0 += g0 * zv2
                        x1 += g1 * zv2
                        x2 += g2 * zv2
                    # Joseph form: P = (I - g e_i^T) P (I - g e_i^T)^T + r g g^T
                    if i == 0:
                        t00 = p00 - g0 * p00
                        t01 = p01 - g0 * p01
                        t02 = p02 - g0 * p02
                        t10 = p10 - g1 * p00
                        t11 = p11 - g1 * p01
                        t12 = p12 - g1 * p02
                        t20 = p20 - g2 * p00
                        t21 = p21 - g2 * p01
                        t22 = p22 - g2 * p02
                        p00 = t00 - t00 * g0 + r * g0 * g0
                        p01 = t01 - t00 * g1 + r * g0 * g1
                        p02 = t02 - t00 * g2 + r * g0 * g2
                        p10 = t10 - t10 * g0 + r * g1 * g0
                        p11 = t11 - t10 * g1 + r * g1 * g1
                        p12 = t12 - t10 * g2 + r * g1 * g2
                        p20 = t20 - t20 * g0 + r * g2 * g0
                        p21 = t21 - t20 * g1 + r * g2 * g1
                        p22 = t22 - t20 * g2 + r * g2 * g2
                    elif i == 1:
                        t00 = p00 - g0 * p10
                        t01 = p01 - g0 * p11
                        t02 = p02 - g0 * p12
                        t10 = p10 - g1 * p10
                        t11 = p11 - g1 * p11
                        t12 = p12 - g1 * p12
                        t20 = p20 - g2 * p10
                        t21 = p21 - g2 * p11
                        t22 = p22 - g2 * p12
                        p00 = t00 - t01 * g0 + r * g0 * g0
                        p01 = t01 - t01 * g1 + r * g0 * g1
                        p02 = t02 - t01 * g2 + r * g0 * g2
                        p10 = t10 - t11 * g0 + r * g1 * g0
                        p11 = t11 - t11 * g1 + r * g1 * g1
                        p12 = t12 - t11 * g2 + r * g1 * g2
                        p20 = t20 - t21 * g0 + r * g2 * g0
                        p21 = t21 - t21 * g1 + r * g2 * g1
                        p22 = t22 - t21 * g2 + r * g2 * g2
                    else:
                        t00 = p00 - g0 * p20
                        t01 = p01 - g0 * p21
                        t02 = p02 - g0 * p22
                        t10 = p10 - g1 * p20
                        t11 = p11 - g1 * p21
                        t12 = p12 - g1 * p22
                        t20 = p20 - g2 * p20
                        t21 = p21 - g2 * p21
                        t22 = p22 - g2 * p22
                        p00 = t00 - t02 * g0 + r * g0 * g0
                        p01 = t01 - t02 * g1 + r * g0 * g1
                        p02 = t02 - t02 * g2 + r * g0 * g2
                        p10 = t10 - t12 * g0 + r * g1 * g0
                        p11 = t11 - t12 * g1 + r * g1 * g1
                        p12 = t12 - t12 * g2 + r * g1 * g2
                        p20 = t20 - t22 * g0 + r * g2 * g0
                        p21 = t21 - t22 * g1 + r * g2 * g1
                        p22 = t22 - t22 * g2 + r * g2 * g2
                    # symmetrize
                    t01 = 0.5 * (p01 + p10)
                    t02 = 0.5 * (p02 + p20)
                    t12 = 0.5 * (p12 + p21)
                    p01 = t01
                    p10 = t01
                    p02 = t02
                    p20 = t02
                    p12 = t12
                    p21 = t12
                if mode == 2:
                    new_fpll = _sat(f_pll + x2 + x1 / t_i)
                    new_fdll = sf * new_fpll + pullin * (x0 / t_i)
                else:
                    new_fpll = _sat(cpg_fpll)
                    new_fdll = sf * new_fpll - k_cpg * (derr0[k] - state[0]) / t_i
                x2 += f_pll - new_fpll

            state[2] = new_fdll
            state[3] = new_fpll
            out[k, 0] = ip
            out[k, 1] = qp
            out[k, 2] = state[0]
            out[k, 3] = state[1]
            out[k, 4] = dfd_avg
            out[k, 5] = new_fdll
            out[k, 6] = new_fpll
            out[k, 7] = d_tau
            out[k, 8] = d_phi
            out[k, 9] = d_fd

    state[8] = x0
    state[9] = x1
    state[10] = x2
    state[11] = p00
    state[12] = p01
    state[13] = p02
    state[14] = p10
    state[15] = p11
    state[16] = p12
    state[17] = p20
    state[18] = p21
    state[19] = p22
