import math

import numpy as np
import pytest

from gnsslab.attitude import quat_rotate, quat_to_dcm
from gnsslab.constants import L1_FREQ, MU_EARTH, OMEGA_EARTH, SPEED_OF_LIGHT
from gnsslab.geodesy import llh2ecef
from gnsslab.scenario import (
    Cn0Schedule,
    FigureEightTrajectory,
    ImuErrors,
    SatelliteTruth,
    StaticTrajectory,
    cn0_at,
    doppler_shift,
    doppler_shift_rate,
    gen_figure_eight,
    geometry,
    gravity_ecef,
    sat_clock,
    sat_pva,
    satellite_from_az_el,
    synthesize_imu,
)

SITE = (math.radians(43.60), math.radians(1.44), 150.0)


def default_eight(**kw):
    params = dict(loop_radius=90.0, n_loops=1, v_max=30.0, a_max=10.0, dwell=10.0)
    params.update(kw)
    return FigureEightTrajectory(SITE, **params)


# ---------------------------------------------------------------------------
# trajectory

def test_peak_dynamics_within_commanded_envelope():
    traj = default_eight()
    g = traj.grid(np.arange(0.0, traj.t_end, 0.01))
    speed = np.linalg.norm(g.v, axis=1)
    accel = np.linalg.norm(g.a, axis=1)
    assert 27.0 <= speed.max() <= 30.0 * (1.0 + 1e-12)
    assert 9.0 <= accel.max() <= 10.5


def test_path_closes_on_itself():
    traj = default_eight()
    # integrate the generator's own velocity samples
    ts = np.arange(0.0, traj.t_end, 1e-3)
    g = traj.grid(ts)
    disp = np.trapezoid(g.v, ts, axis=0)
    assert np.linalg.norm(disp) < 1.0
    assert np.linalg.norm(g.p[-1] - g.p[0]) < 1.0


def test_dwells_are_stationary():
    traj = default_eight(dwell=10.0)
    for t in (0.0, 5.0, 9.99, traj.t_end - 9.99, traj.t_end):
        st = traj.at(t)
        assert np.all(st.v_u == 0.0)
        assert np.all(st.a_u == 0.0)
    assert traj.t_motion_start == 10.0
    assert traj.t_end > traj.t_motion_end


def test_motion_duration_is_plausible():
    # 1 loop of the default eight: 4*pi*90 m of road at up to 30 m/s
    traj = default_eight()
    t_mot = traj.t_motion_end - traj.t_motion_start
    assert 38.0 < t_mot < 50.0


def test_velocity_is_position_derivative():
    traj = default_eight()
    h = 5e-4
    ts = np.arange(0.5, traj.t_end - 0.5, 0.25)
    for t in ts:
        p_m = traj.at(t - h).p_u
        p_p = traj.at(t + h).p_u
        v_fd = (p_p - p_m) / (2.0 * h)
        err = np.linalg.norm(v_fd - traj.at(t).v_u)
        assert err < 5e-3, f"t={t}: dp/dt off by {err}"


def test_acceleration_is_velocity_derivative_on_smooth_arcs():
    traj = default_eight()
    h = 5e-4
    # mid-cruise, away from the dwell edges and the circle handover
    for t in (20.0, 25.0, 35.0, 45.0):
        v_m = traj.at(t - h).v_u
        v_p = traj.at(t + h).v_u
        a_fd = (v_p - v_m) / (2.0 * h)
        assert np.linalg.norm(a_fd - traj.at(t).a_u) < 2e-2


def test_quaternion_norm_preserved():
    traj = default_eight()
    g = traj.grid(np.linspace(0.0, traj.t_end, 4001))
    norms = np.linalg.norm(g.q, axis=1)
    assert np.max(np.abs(norms - 1.0)) < 1e-9


def test_yaw_tracks_velocity_heading():
    traj = default_eight()
    for t in np.arange(12.0, traj.t_motion_end - 2.0, 3.0):
        st = traj.at(t)
        speed = np.linalg.norm(st.v_u)
        if speed < 1.0:
            continue
        fwd = quat_rotate(st.q, np.array([1.0, 0.0, 0.0]))
        assert float(fwd @ st.v_u) / speed > 0.999999


def test_yaw_rate_magnitude_on_circle():
    traj = default_eight()
    st = traj.at(25.0)
    speed = np.linalg.norm(st.v_u)
    assert speed == pytest.approx(30.0)
    assert abs(st.omega_b[2]) == pytest.approx(speed / 90.0, rel=1e-12)


def test_zero_loops_is_pure_dwell():
    states = gen_figure_eight(SITE, n_loops=0, dwell=5.0, rate=50.0)
    p0 = states[0].p_u
    for st in states:
        assert np.array_equal(st.p_u, p0)
        assert np.all(st.v_u == 0.0)
        assert np.all(st.a_u == 0.0)


def test_crossing_transit_is_slowed():
    # The turn direction flips at the interior crossing (arc s = 2*pi*r),
    # so the lateral acceleration there changes sign in a step whose size
    # scales with speed squared. The default profile decelerates to v_cross
    # for the transit and the flip happens exactly at that speed.
    traj = default_eight()
    s_flip = 2.0 * math.pi * traj.radius
    ts = np.arange(traj.t_motion_start, traj.t_motion_end, 1e-3)
    g = traj.grid(ts)
    speeds = np.linalg.norm(g.v, axis=1)
    s = np.concatenate([[0.0], np.cumsum(0.5 * (speeds[1:] + speeds[:-1]) * 1e-3)])
    k = int(np.argmin(np.abs(s - s_flip)))
    assert speeds[k] == pytest.approx(10.0, abs=0.05)
    # the sign flip of the lateral component is a step of 2 v^2 / r; at
    # v_cross it is 2.2 m/s^2 where full cruise speed would give 20
    step = np.linalg.norm(g.a[k + 2] - g.a[k - 2])
    assert step < 2.0 * 10.0 ** 2 / traj.radius * 1.5
    assert step > 1.0


def test_crossing_slowdown_can_be_disabled():
    traj = FigureEightTrajectory(SITE, v_cross=None)
    ts = np.arange(traj.t_motion_start + 8.0, traj.t_motion_end - 8.0, 0.01)
    speeds = np.linalg.norm(traj.grid(ts).v, axis=1)
    assert speeds.min() == pytest.approx(30.0, rel=1e-9)
    with pytest.raises(ValueError):
        FigureEightTrajectory(SITE, v_cross=0.0)
    with pytest.raises(ValueError):
        FigureEightTrajectory(SITE, v_cross=31.0)


def test_infeasible_radius_rejected():
    with pytest.raises(ValueError):
        FigureEightTrajectory(SITE, loop_radius=50.0, v_max=30.0, a_max=10.0)
    with pytest.raises(ValueError):
        gen_figure_eight(SITE, rate=5.0)


def test_static_trajectory_constant():
    traj = StaticTrajectory(SITE, duration=20.0)
    g = traj.grid(np.linspace(0.0, 20.0, 101))
    assert np.ptp(g.p, axis=0).max() == 0.0
    assert np.all(g.v == 0.0)
    assert abs(np.linalg.norm(g.q[0]) - 1.0) < 1e-12


# ---------------------------------------------------------------------------
# IMU synthesis

def test_static_imu_measures_gravity_and_earth_rate():
    traj = StaticTrajectory(SITE, duration=1.0)
    samples = synthesize_imu(traj, rate=100.0)
    assert len(samples) == 100
    f = samples[0].f_b
    w = samples[0].omega_b
    assert np.linalg.norm(f) == pytest.approx(9.80, abs=0.05)
    # gyro sees the Earth rate projected into the body frame
    assert np.linalg.norm(w) == pytest.approx(OMEGA_EARTH, rel=1e-6)
    r = quat_to_dcm(traj.at(0.0).q)
    np.testing.assert_allclose(w, r.T @ np.array([0.0, 0.0, OMEGA_EARTH]),
                               atol=1e-12)
    # specific force balances effective gravity
    g_eff = gravity_ecef(traj.at(0.0).p_u)
    np.testing.assert_allclose(r @ f, -g_eff, atol=1e-9)


def test_zero_gravity_constant_velocity_gives_zero_specific_force():
    traj = StaticTrajectory(SITE, duration=1.0)
    samples = synthesize_imu(traj, rate=100.0, gravity="zero",
                             earth_rotation=False)
    for s in samples[:5]:
        np.testing.assert_allclose(s.f_b, 0.0, atol=1e-12)
        np.testing.assert_allclose(s.omega_b, 0.0, atol=1e-15)


def test_imu_bias_and_noise_enter_additively():
    traj = StaticTrajectory(SITE, duration=2.0)
    clean = synthesize_imu(traj, rate=100.0)
    errs = ImuErrors(accel_bias=np.array([0.01, -0.02, 0.03]),
                     gyro_bias=np.array([1e-4, 0.0, -1e-4]))
    biased = synthesize_imu(traj, rate=100.0, errors=errs)
    np.testing.assert_allclose(biased[0].f_b - clean[0].f_b, errs.accel_bias,
                               atol=1e-12)
    np.testing.assert_allclose(biased[0].omega_b - clean[0].omega_b,
                               errs.gyro_bias, atol=1e-15)

    noisy = synthesize_imu(traj, rate=100.0,
                           errors=ImuErrors(accel_noise_density=1e-3),
                           rng=np.random.default_rng(7))
    resid = np.array([s.f_b - c.f_b for s, c in zip(noisy, clean)])
    sigma = np.std(resid)
    assert sigma == pytest.approx(1e-3 * math.sqrt(100.0), rel=0.2)


def test_imu_accepts_state_sequence_and_decimates():
    traj = default_eight(n_loops=0, dwell=1.0)
    states = traj.sample(200.0)
    a = synthesize_imu(states, rate=100.0)
    b = synthesize_imu(traj, rate=100.0)
    assert len(a) == len(b)
    np.testing.assert_allclose(a[3].f_b, b[3].f_b, atol=1e-12)
    with pytest.raises(ValueError):
        synthesize_imu(traj.sample(30.0), rate=100.0)


# ---------------------------------------------------------------------------
# satellites

def constellation():
    els = [11.0, 20.0, 28.0, 35.0, 45.0, 55.0, 65.0, 75.0]
    azs = [40.0, 110.0, 175.0, 250.0, 305.0, 20.0, 135.0, 330.0]
    prns = [29, 25, 19, 12, 2, 6, 17, 24]
    return [satellite_from_az_el(p, math.radians(a), math.radians(e), SITE)
            for p, a, e in zip(prns, azs, els)]


def test_orbit_radius_and_speed_constant():
    for sat in constellation():
        t = np.linspace(0.0, 120.0, 50)
        p, v, a = sat_pva(sat, t)
        np.testing.assert_allclose(np.linalg.norm(p, axis=1), sat.sma, rtol=1e-12)
        v_circ = math.sqrt(MU_EARTH / sat.sma)
        np.testing.assert_allclose(np.linalg.norm(v, axis=1), v_circ, rtol=1e-6)
        np.testing.assert_allclose(a, -MU_EARTH * p / sat.sma ** 3, rtol=1e-9)


def test_sat_kinematics_self_consistent_by_finite_differences():
    rng = np.random.default_rng(11)
    h = 5e-4
    for sat in constellation():
        for t in rng.uniform(0.0, 300.0, 100):
            pm, vm, _ = sat_pva(sat, t - h)
            pp, vp, _ = sat_pva(sat, t + h)
            p0, v0, a0 = sat_pva(sat, t)
            assert np.linalg.norm((pp - pm) / (2 * h) - v0) < 1e-4
            assert np.linalg.norm((vp - vm) / (2 * h) - a0) < 1e-5


def test_az_el_placement_reproduced():
    p_u = llh2ecef(*SITE)
    for sat, el_deg, az_deg in zip(constellation(),
                                   [11, 20, 28, 35, 45, 55, 65, 75],
                                   [40, 110, 175, 250, 305, 20, 135, 330]):
        geo = geometry(p_u, np.zeros(3), sat, 0.0)
        assert math.degrees(geo.elevation) == pytest.approx(el_deg, abs=1e-6)
        from gnsslab.geodesy import enu_matrix
        east, north, _ = enu_matrix(SITE[0], SITE[1]).T
        az = math.degrees(math.atan2(float(geo.e_rho @ east),
                                     float(geo.e_rho @ north))) % 360.0
        assert az == pytest.approx(az_deg, abs=1e-6)
        assert 19e6 < geo.range < 26e6


def test_sat_clock_polynomial():
    sat = SatelliteTruth(5, 26_560e3, 0.9, 0.1, 0.2,
                         clock_bias=30.0, clock_drift=0.5, clock_jerk=0.02)
    b, d = sat_clock(sat, 10.0)
    assert b == pytest.approx(30.0 + 0.5 * 10.0 + 0.5 * 0.02 * 100.0)
    assert d == pytest.approx(0.5 + 0.02 * 10.0)


def test_bad_prn_rejected():
    with pytest.raises(ValueError):
        SatelliteTruth(0, 26_560e3, 0.9, 0.0, 0.0)
    with pytest.raises(ValueError):
        SatelliteTruth(33, 26_560e3, 0.9, 0.0, 0.0)


# ---------------------------------------------------------------------------
# geometry

def test_overhead_satellite_geometry():
    # receiver on the polar axis, satellite straight above it
    p_u = np.array([0.0, 0.0, 6_356_752.0])
    sat = SatelliteTruth(1, 26_560e3, math.pi / 2, math.pi / 2, math.pi / 2)
    p_s, _, _ = sat_pva(sat, 0.0)
    np.testing.assert_allclose(p_s / np.linalg.norm(p_s), [0.0, 0.0, 1.0],
                               atol=1e-12)
    geo = geometry(p_u, np.zeros(3), sat, 0.0)
    assert geo.elevation == pytest.approx(math.pi / 2, abs=1e-9)
    np.testing.assert_allclose(geo.e_rho, [0.0, 0.0, 1.0], atol=1e-12)


def test_radial_motion_has_zero_los_rate():
    sat = constellation()[0]
    p_u = llh2ecef(*SITE)
    geo = geometry(p_u, np.zeros(3), sat, 0.0)
    # make the receiver chase the satellite along the line of sight
    v_u = geo.v_s - 42.0 * geo.e_rho
    geo2 = geometry(p_u, v_u, sat, 0.0)
    np.testing.assert_allclose(geo2.e_rho_dot, 0.0, atol=1e-15)


def test_los_rate_orthogonal_and_matches_finite_difference():
    rng = np.random.default_rng(3)
    sats = constellation()
    h = 5e-4
    for _ in range(1000):
        sat = sats[rng.integers(len(sats))]
        t = float(rng.uniform(0.0, 60.0))
        p_u = llh2ecef(SITE[0] + rng.uniform(-0.01, 0.01),
                       SITE[1] + rng.uniform(-0.01, 0.01),
                       float(rng.uniform(0.0, 2000.0)))
        v_u = rng.normal(0.0, 15.0, 3)
        geo = geometry(p_u, v_u, sat, t)
        assert abs(float(geo.e_rho @ geo.e_rho_dot)) < 1e-12
    # finite-difference check on a moving receiver
    sat = sats[2]
    p_u = llh2ecef(*SITE)
    v_u = np.array([12.0, -5.0, 3.0])
    gm = geometry(p_u - v_u * h, v_u, sat, -h)
    gp = geometry(p_u + v_u * h, v_u, sat, h)
    g0 = geometry(p_u, v_u, sat, 0.0)
    fd = (gp.e_rho - gm.e_rho) / (2 * h)
    assert np.linalg.norm(fd - g0.e_rho_dot) < 1e-9


def test_zero_range_rejected():
    sat = SatelliteTruth(1, 26_560e3, 0.0, 0.0, 0.0)
    p_s, _, _ = sat_pva(sat, 0.0)
    with pytest.raises(ValueError):
        geometry(p_s, np.zeros(3), sat, 0.0)


# ---------------------------------------------------------------------------
# Doppler

def test_doppler_sign_closing_range_is_positive():
    e = np.array([1.0, 0.0, 0.0])
    # satellite flying toward the receiver at 100 m/s
    fd = doppler_shift(e, v_s=np.array([-100.0, 0.0, 0.0]), v_u=np.zeros(3))
    assert fd == pytest.approx(100.0 * L1_FREQ / SPEED_OF_LIGHT)
    assert fd > 0.0


def test_doppler_receiver_clock_drift_term():
    e = np.array([0.0, 0.0, 1.0])
    fd = doppler_shift(e, np.zeros(3), np.zeros(3), clk_drift_u=1.0)
    assert fd == pytest.approx(-L1_FREQ / SPEED_OF_LIGHT)
    assert fd == pytest.approx(-5.25503, abs=1e-4)


def test_doppler_rate_matches_finite_difference():
    traj = default_eight()
    sat = constellation()[4]
    h = 5e-4
    for t in (15.0, 22.0, 30.0, 41.0):
        st_m, st_0, st_p = traj.at(t - h), traj.at(t), traj.at(t + h)
        gm = geometry(st_m.p_u, st_m.v_u, sat, t - h)
        g0 = geometry(st_0.p_u, st_0.v_u, sat, t)
        gp = geometry(st_p.p_u, st_p.v_u, sat, t + h)
        fd_m = doppler_shift(gm.e_rho, gm.v_s, st_m.v_u)
        fd_p = doppler_shift(gp.e_rho, gp.v_s, st_p.v_u)
        rate = doppler_shift_rate(g0.e_rho, g0.e_rho_dot, g0.v_s, st_0.v_u,
                                  g0.a_s, st_0.a_u)
        assert abs((fd_p - fd_m) / (2 * h) - rate) < 1e-3


def test_doppler_spread_is_realistic():
    p_u = llh2ecef(*SITE)
    fds = []
    for sat in constellation():
        geo = geometry(p_u, np.zeros(3), sat, 0.0)
        fds.append(doppler_shift(geo.e_rho, geo.v_s, np.zeros(3)))
    fds = np.array(fds)
    assert np.max(np.abs(fds)) < 6000.0
    assert np.ptp(fds) > 500.0


# ---------------------------------------------------------------------------
# C/N0 schedule

def test_cn0_constant_and_ramp_values():
    sched = Cn0Schedule.single_ramp(50.0, 25.0, ramp_start=40.0,
                                    ramp_duration=10.0, total_duration=60.0)
    assert cn0_at(sched, 10.0) == pytest.approx(50.0)
    assert cn0_at(sched, 50.0) == pytest.approx(25.0)
    sched2 = Cn0Schedule.single_ramp(50.0, 30.0, 40.0, 10.0, 60.0)
    assert cn0_at(sched2, 45.0) == pytest.approx(40.0)


def test_cn0_schedule_validation():
    with pytest.raises(ValueError):
        Cn0Schedule(((0.0, 10.0, 50.0, 50.0), (12.0, 20.0, 50.0, 50.0)))
    with pytest.raises(ValueError):
        Cn0Schedule(((0.0, 0.0, 50.0, 50.0),))
    sched = Cn0Schedule.constant(45.0, 60.0)
    with pytest.raises(ValueError):
        cn0_at(sched, 61.0)
    with pytest.raises(ValueError):
        cn0_at(sched, -1.0)


def test_gravity_models():
    p = llh2ecef(*SITE)
    g = gravity_ecef(p)
    assert 9.75 < np.linalg.norm(g) < 9.85
    # effective gravity points roughly down
    up = p / np.linalg.norm(p)
    assert float(g @ up) < -9.7
    assert np.all(gravity_ecef(p, model="zero") == 0.0)
    with pytest.raises(ValueError):
        gravity_ecef(p, model="j2")
