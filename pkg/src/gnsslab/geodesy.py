"""WGS84 coordinate conversions and local-level frames."""
from __future__ import annotations

import numpy as np

from .constants import WGS84_A, WGS84_E2


def llh2ecef(lat: float, lon: float, height: float) -> np.ndarray:
    """Geodetic latitude/longitude (rad) and height (m) to ECEF meters."""
    sl, cl = np.sin(lat), np.cos(lat)
    n = WGS84_A / np.sqrt(1.0 - WGS84_E2 * sl * sl)
    return np.array(
        [
            (n + height) * cl * np.cos(lon),
            (n + height) * cl * np.sin(lon),
            (n * (1.0 - WGS84_E2) + height) * sl,
        ]
    )


def ecef2llh(p: np.ndarray) -> tuple[float, float, float]:
    """ECEF meters to geodetic (lat rad, lon rad, height m). Bowring iteration."""
    x, y, z = float(p[0]), float(p[1]), float(p[2])
    lon = np.arctan2(y, x)
    rho = np.hypot(x, y)
    if rho < 1e-6:
        # On the polar axis the general iteration divides by cos(lat).
        b = WGS84_A * np.sqrt(1.0 - WGS84_E2)
        return float(np.copysign(np.pi / 2.0, z)), float(lon), float(abs(z) - b)
    lat = np.arctan2(z, rho * (1.0 - WGS84_E2))
    height = 0.0
    for _ in range(6):
        sl = np.sin(lat)
        n = WGS84_A / np.sqrt(1.0 - WGS84_E2 * sl * sl)
        height = rho / np.cos(lat) - n
        lat = np.arctan2(z, rho * (1.0 - WGS84_E2 * n / (n + height)))
    return float(lat), float(lon), float(height)


def enu_axes(lat: float, lon: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unit east/north/up vectors of the local-level frame, in ECEF."""
    sl, cl = np.sin(lat), np.cos(lat)
    so, co = np.sin(lon), np.cos(lon)
    east = np.array([-so, co, 0.0])
    north = np.array([-sl * co, -sl * so, cl])
    up = np.array([cl * co, cl * so, sl])
    return east, north, up


def enu_matrix(lat: float, lon: float) -> np.ndarray:
    """Rotation with columns [east north up]: maps local ENU vectors to ECEF."""
    e, n, u = enu_axes(lat, lon)
    return np.column_stack([e, n, u])
