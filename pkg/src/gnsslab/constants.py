"""Physical constants and GPS L1 C/A signal parameters used across the package."""
from __future__ import annotations

SPEED_OF_LIGHT = 299_792_458.0  # m/s

# GPS L1 C/A
L1_FREQ = 1_575.42e6            # Hz, carrier frequency
CA_CHIP_RATE = 1.023e6          # chips/s
CA_CODE_LEN = 1023              # chips per code period
CA_CODE_PERIOD = CA_CODE_LEN / CA_CHIP_RATE  # s (1 ms)
NAV_BIT_PERIOD = 0.020          # s (50 bps)

# Code chips per carrier cycle; equals 1/1540 for L1 C/A.
CODE_CARRIER_RATIO = CA_CHIP_RATE / L1_FREQ

# Carrier cycles per m/s of range rate.
DOPPLER_PER_MPS = L1_FREQ / SPEED_OF_LIGHT

# Earth
MU_EARTH = 3.986004418e14       # m^3/s^2, point-mass gravitational parameter
OMEGA_EARTH = 7.2921159e-5      # rad/s, rotation rate

# WGS84 ellipsoid (coordinate conversions only; gravity stays point-mass)
WGS84_A = 6_378_137.0
WGS84_F = 1.0 / 298.257223563
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)
