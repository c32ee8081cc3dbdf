"""Coordinate frames, WGS84 conversions, distances and the sensor-to-world rotation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidCoordinate

# WGS84 ellipsoid
WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
WGS84_B = WGS84_A * (1.0 - WGS84_F)
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)
WGS84_EP2 = WGS84_E2 / (1.0 - WGS84_E2)

SPEED_OF_LIGHT = 299792458.0

ECEF_NORM_MIN = 6.2e6
ECEF_NORM_MAX = 2.7e7


def _wrap_lon(lon: float) -> float:
    lon = (lon + 180.0) % 360.0 - 180.0
    return lon


@dataclass(frozen=True)
class GeodeticPosition:
    """WGS84 latitude/longitude in degrees, altitude in meters above the ellipsoid."""

    latitude: float
    longitude: float
    altitude: float = 0.0

    def __post_init__(self):
        vals = (self.latitude, self.longitude, self.altitude)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidCoordinate(f"non-finite geodetic position {vals}")
        if not -90.0 <= self.latitude <= 90.0:
            raise InvalidCoordinate(f"latitude {self.latitude} outside [-90, 90]")
        if not -180.0 <= self.longitude < 180.0:
            if self.longitude == 180.0:
                object.__setattr__(self, "longitude", -180.0)
            else:
                raise InvalidCoordinate(f"longitude {self.longitude} outside [-180, 180)")


@dataclass(frozen=True)
class EcefPosition:
    x: float
    y: float
    z: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise InvalidCoordinate("non-finite ECEF position")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def norm(self) -> float:
        return math.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)


@dataclass(frozen=True)
class EnuPoint:
    east: float
    north: float
    up: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.east, self.north, self.up])


@dataclass(frozen=True)
class OrientationAngles:
    """Roll, pitch and yaw of the platform sensor frame, in degrees."""

    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        vals = (self.roll, self.pitch, self.yaw)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidCoordinate(f"non-finite orientation {vals}")
        for name in ("roll", "pitch", "yaw"):
            object.__setattr__(self, name, _wrap_lon(getattr(self, name)))


def geodetic_to_ecef(p: GeodeticPosition) -> EcefPosition:
    x, y, z = geodetic_to_ecef_array(p.latitude, p.longitude, p.altitude)
    return EcefPosition(float(x), float(y), float(z))


def geodetic_to_ecef_array(lat, lon, alt):
    """Vectorized WGS84 geodetic -> ECEF; angles in degrees."""
    lat = np.radians(np.asarray(lat, dtype=float))
    lon = np.radians(np.asarray(lon, dtype=float))
    alt = np.asarray(alt, dtype=float)
    if not (np.all(np.isfinite(lat)) and np.all(np.isfinite(lon)) and np.all(np.isfinite(alt))):
        raise InvalidCoordinate("non-finite geodetic input")
    sl, cl = np.sin(lat), np.cos(lat)
    n = WGS84_A / np.sqrt(1.0 - WGS84_E2 * sl * sl)
    x = (n + alt) * cl * np.cos(lon)
    y = (n + alt) * cl * np.sin(lon)
    z = (n * (1.0 - WGS84_E2) + alt) * sl
    return x, y, z


def ecef_to_geodetic_array(x, y, z):
    """Vectorized ECEF -> geodetic (degrees, degrees, meters).

    Bowring's parametric-latitude iteration. Height is taken from the
    z-component near the poles so points on or close to the axis never
    divide by cos(latitude).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y)) and np.all(np.isfinite(z))):
        raise InvalidCoordinate("non-finite ECEF input")
    p = np.hypot(x, y)
    lon = np.arctan2(y, x)
    u = np.arctan2(z * WGS84_A, p * WGS84_B)
    lat = np.arctan2(z, p)
    for _ in range(8):
        lat = np.arctan2(
            z + WGS84_EP2 * WGS84_B * np.sin(u) ** 3,
            p - WGS84_E2 * WGS84_A * np.cos(u) ** 3,
        )
        u_new = np.arctan2((1.0 - WGS84_F) * np.sin(lat), np.cos(lat))
        if np.all(np.abs(u_new - u) < 1e-15):
            u = u_new
            break
        u = u_new
    sl, cl = np.sin(lat), np.cos(lat)
    n = WGS84_A / np.sqrt(1.0 - WGS84_E2 * sl * sl)
    polar = np.abs(sl) > math.sqrt(0.5)
    with np.errstate(divide="ignore", invalid="ignore"):
        h_eq = p / cl - n
        h_pol = z / sl - n * (1.0 - WGS84_E2)
    alt = np.where(polar, h_pol, h_eq)
    lon_deg = np.degrees(lon)
    lon_deg = np.where(lon_deg >= 180.0, lon_deg - 360.0, lon_deg)
    return np.degrees(lat), lon_deg, alt


def ecef_to_geodetic(p: EcefPosition) -> GeodeticPosition:
    lat, lon, alt = ecef_to_geodetic_array(p.x, p.y, p.z)
    return GeodeticPosition(float(lat), float(lon), float(alt))


def _rot_z(psi):
    c, s = math.cos(psi), math.sin(psi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rot_x(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]])


def _rot_y(phi):
    c, s = math.cos(phi), math.sin(phi)
    return np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])


def rotation_matrix(o: OrientationAngles) -> np.ndarray:
    """Sensor-frame to local-world rotation.

    The factors are multiplied in the order yaw (about z), pitch (about x),
    roll (about y); pitch and roll axes are swapped and yaw turns
    counter-clockwise compared with the aviation convention. At zero
    attitude the sensor x axis points east.
    """
    phi = math.radians(o.roll)
    theta = math.radians(o.pitch)
    psi = math.radians(o.yaw)
    return _rot_z(psi) @ _rot_x(theta) @ _rot_y(phi)


def distance(a: GeodeticPosition, b: GeodeticPosition) -> float:
    """Straight-line (chord) distance between two positions, in meters."""
    pa = np.array(geodetic_to_ecef_array(a.latitude, a.longitude, a.altitude))
    pb = np.array(geodetic_to_ecef_array(b.latitude, b.longitude, b.altitude))
    return float(np.linalg.norm(pa - pb))


class LocalFrame:
    """East-north-up frame tangent to the ellipsoid at a fixed origin."""

    def __init__(self, origin: GeodeticPosition):
        self.origin = origin
        self.origin_ecef = np.array(
            geodetic_to_ecef_array(origin.latitude, origin.longitude, origin.altitude)
        )
        lat = math.radians(origin.latitude)
        lon = math.radians(origin.longitude)
        sl, cl = math.sin(lat), math.cos(lat)
        so, co = math.sin(lon), math.cos(lon)
        # rows: east, north, up unit vectors expressed in ECEF
        self.rot = np.array([
            [-so, co, 0.0],
            [-sl * co, -sl * so, cl],
            [cl * co, cl * so, sl],
        ])

    def ecef_to_enu(self, xyz) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=float)
        return (xyz - self.origin_ecef) @ self.rot.T

    def enu_to_ecef(self, enu) -> np.ndarray:
        enu = np.asarray(enu, dtype=float)
        return enu @ self.rot + self.origin_ecef

    def to_enu(self, p: GeodeticPosition) -> np.ndarray:
        xyz = np.array(geodetic_to_ecef_array(p.latitude, p.longitude, p.altitude))
        return self.ecef_to_enu(xyz)

    def to_enu_many(self, lat, lon, alt) -> np.ndarray:
        xyz = np.stack(geodetic_to_ecef_array(lat, lon, alt), axis=-1)
        return self.ecef_to_enu(xyz)

    def to_geodetic(self, enu) -> GeodeticPosition:
        xyz = self.enu_to_ecef(enu)
        lat, lon, alt = ecef_to_geodetic_array(xyz[0], xyz[1], xyz[2])
        return GeodeticPosition(float(lat), float(lon), float(alt))

    def to_point(self, p: GeodeticPosition) -> EnuPoint:
        e, n, u = self.to_enu(p)
        return EnuPoint(float(e), float(n), float(u))
