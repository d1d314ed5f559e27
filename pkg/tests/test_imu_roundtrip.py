"""Round trips between IMU synthesis and strapdown mechanization.

The synthesizer constructs each sample as the algebraic inverse of one
mechanization step, so driving the mechanization with error-free samples
from the true initial state must reproduce the truth: velocity and
attitude to machine precision, position to quadrature error.
"""
import math

import numpy as np
import pytest

from gnsslab.attitude import quat_conj, quat_mult, rotvec_from_quat
from gnsslab.navfilter import NavState, ins_mechanize
from gnsslab.scenario import (
    FigureEightTrajectory,
    ImuErrors,
    StaticTrajectory,
    synthesize_imu,
)

SITE = (math.radians(43.60), math.radians(1.44), 150.0)
RATE = 100.0


def roundtrip(traj, *, errors=None, b_a=None, b_g=None, earth_rotation=True):
    samples = synthesize_imu(traj, RATE, errors, earth_rotation=earth_rotation)
    st = traj.at(0.0)
    nav = NavState(p=st.p_u, v=st.v_u, q=st.q,
                   b_a=np.zeros(3) if b_a is None else b_a,
                   b_g=np.zeros(3) if b_g is None else b_g)
    dt = 1.0 / RATE
    for imu in samples:
        nav = ins_mechanize(nav, imu, dt, earth_rotation=earth_rotation)
    truth = traj.at(len(samples) * dt)
    return nav, truth


def attitude_error(q_est, q_true):
    return np.linalg.norm(rotvec_from_quat(quat_mult(quat_conj(q_est), q_true)))


def test_figure_eight_roundtrip():
    traj = FigureEightTrajectory(SITE, loop_radius=90.0, n_loops=1,
                                 v_max=30.0, a_max=10.0, dwell=10.0)
    nav, truth = roundtrip(traj)
    assert np.linalg.norm(nav.v - truth.v_u) < 1e-6
    assert attitude_error(nav.q, truth.q) < 1e-9
    # position differs only by the trapezoid rule; tight bound on purpose
    assert np.linalg.norm(nav.p - truth.p_u) < 0.5
    assert np.linalg.norm(nav.p - truth.p_u) < 0.02


def test_figure_eight_roundtrip_without_earth_rotation():
    traj = FigureEightTrajectory(SITE, loop_radius=60.0, n_loops=1,
                                 v_max=20.0, a_max=8.0, dwell=5.0)
    nav, truth = roundtrip(traj, earth_rotation=False)
    assert np.linalg.norm(nav.v - truth.v_u) < 1e-6
    assert attitude_error(nav.q, truth.q) < 1e-9
    assert np.linalg.norm(nav.p - truth.p_u) < 0.02


def test_static_roundtrip_holds_position():
    traj = StaticTrajectory(SITE, 30.0)
    nav, truth = roundtrip(traj)
    assert np.linalg.norm(nav.p - truth.p_u) < 1e-4
    assert np.linalg.norm(nav.v - truth.v_u) < 1e-7
    assert attitude_error(nav.q, truth.q) < 1e-10


def test_known_biases_cancel_in_mechanization():
    traj = StaticTrajectory(SITE, 20.0)
    b_a = np.array([0.02, -0.01, 0.03])
    b_g = np.array([1e-4, -2e-4, 5e-5])
    errors = ImuErrors(accel_bias=b_a, gyro_bias=b_g)
    nav, truth = roundtrip(traj, errors=errors, b_a=b_a, b_g=b_g)
    assert np.linalg.norm(nav.p - truth.p_u) < 1e-4
    assert np.linalg.norm(nav.v - truth.v_u) < 1e-7


def test_uncompensated_accel_bias_drifts_quadratically():
    traj = StaticTrajectory(SITE, 20.0)
    b_a = np.array([0.01, 0.0, 0.0])
    errors = ImuErrors(accel_bias=b_a)
    nav, truth = roundtrip(traj, errors=errors)
    drift = np.linalg.norm(nav.p - truth.p_u)
    # 0.5 * |b| * t^2, give or take attitude projection
    assert drift == pytest.approx(0.5 * 0.01 * 20.0 ** 2, rel=0.05)
