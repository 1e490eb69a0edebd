"""Coordinate frames and double-difference (DD) ranging geometry.

All filtering runs on ECEF coordinates; the local east-north-up frame is
used for scenario authoring and error reporting only. The Earth model is a
sphere of radius 6 378 137 m, which is sufficient because conversions only
anchor a local frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

EARTH_RADIUS_M = 6_378_137.0


@dataclass(frozen=True)
class EcefPosition:
    """Earth-centered Earth-fixed position in meters."""

    x: float
    y: float
    z: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.z)):
            raise ValueError("ECEF components must be finite")

    def as_array(self) -> NDArray[np.float64]:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "EcefPosition":
        return cls(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class EnuVector:
    """East-north-up vector in meters (or m/s when used as a velocity)."""

    e: float
    n: float
    u: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.e) and math.isfinite(self.n) and math.isfinite(self.u)):
            raise ValueError("ENU components must be finite")

    def as_array(self) -> NDArray[np.float64]:
        return np.array([self.e, self.n, self.u], dtype=np.float64)


@dataclass(frozen=True)
class SatelliteGeometry:
    """A satellite's ECEF position plus its look angles from the base station.

    elevation is in [0, pi/2] radians, azimuth in [0, 2*pi) radians measured
    clockwise from north; both must be recomputable from the position.
    """

    sat_id: int
    position: EcefPosition
    elevation: float
    azimuth: float


def anchor_from_latlon(lat: float, lon: float, height_m: float = 0.0) -> EcefPosition:
    """ECEF point at (lat, lon) radians and height on the spherical Earth."""
    r = EARTH_RADIUS_M + height_m
    return EcefPosition(
        r * math.cos(lat) * math.cos(lon),
        r * math.cos(lat) * math.sin(lon),
        r * math.sin(lat),
    )


def enu_rotation(lat: float, lon: float) -> NDArray[np.float64]:
    """Rotation matrix mapping ECEF deltas to ENU components (rows e, n, u)."""
    sl, cl = math.sin(lat), math.cos(lat)
    so, co = math.sin(lon), math.cos(lon)
    return np.array(
        [
            [-so, co, 0.0],
            [-sl * co, -sl * so, cl],
            [cl * co, cl * so, sl],
        ]
    )


def ecef_to_enu(p: EcefPosition, anchor: EcefPosition, anchor_lat: float, anchor_lon: float) -> EnuVector:
    """Express ``p`` in the ENU frame anchored at ``anchor``."""
    d = p.as_array() - anchor.as_array()
    e, n, u = enu_rotation(anchor_lat, anchor_lon) @ d
    return EnuVector(float(e), float(n), float(u))


def enu_to_ecef(v: EnuVector, anchor: EcefPosition, anchor_lat: float, anchor_lon: float) -> EcefPosition:
    """Inverse of :func:`ecef_to_enu`."""
    d = enu_rotation(anchor_lat, anchor_lon).T @ v.as_array()
    return EcefPosition.from_array(anchor.as_array() + d)


def geometric_range(sat: EcefPosition, rcv: EcefPosition) -> float:
    """Euclidean distance between satellite and receiver, strictly positive."""
    dx = sat.x - rcv.x
    dy = sat.y - rcv.y
    dz = sat.z - rcv.z
    r = math.sqrt(dx * dx + dy * dy + dz * dz)
    if r == 0.0:
        raise ValueError("satellite and receiver positions coincide")
    return r


def dd_range(sat_k: EcefPosition, sat_ref: EcefPosition, rover: EcefPosition, base: EcefPosition) -> float:
    """Double-difference geometric range of satellite k against the pivot.

    (|s_k - rover| - |s_k - base|) - (|s_ref - rover| - |s_ref - base|).
    """
    return (geometric_range(sat_k, rover) - geometric_range(sat_k, base)) - (
        geometric_range(sat_ref, rover) - geometric_range(sat_ref, base)
    )


def dd_range_gradient(
    sat_k: EcefPosition, sat_ref: EcefPosition, rover: EcefPosition, base: EcefPosition
) -> NDArray[np.float64]:
    """Gradient of :func:`dd_range` with respect to the rover position.

    Equals e_ref - e_k, the difference of unit vectors from the rover to the
    pivot and to satellite k, so its norm never exceeds 2.
    """
    x = rover.as_array()
    dk = geometric_range(sat_k, rover)
    dr = geometric_range(sat_ref, rover)
    return (x - sat_k.as_array()) / dk - (x - sat_ref.as_array()) / dr


def elevation_azimuth(sat: EcefPosition, base: EcefPosition, base_lat: float, base_lon: float) -> tuple[float, float]:
    """Elevation and azimuth (radians) of ``sat`` as seen from ``base``."""
    enu = ecef_to_enu(sat, base, base_lat, base_lon)
    horiz = math.hypot(enu.e, enu.n)
    el = math.atan2(enu.u, horiz)
    az = math.atan2(enu.e, enu.n) % (2.0 * math.pi)
    return el, az


def select_reference_satellite(sats: list[SatelliteGeometry]) -> int:
    """Pivot choice for double differencing: highest elevation, ties by id."""
    if not sats:
        raise ValueError("cannot select a reference satellite from an empty list")
    best = min(sats, key=lambda s: (-s.elevation, s.sat_id))
    return best.sat_id
