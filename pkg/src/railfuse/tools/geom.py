"""Rotation and pose algebra, UTM projection and small shared numerics.

Quaternions are Hamilton, stored (w, x, y, z) with the canonical sign w >= 0.
A quaternion q^W_B rotates body-frame vectors into the world frame.
"""
from dataclasses import dataclass, field
import math

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .config import SMALL_ANGLE
from .exceptions import DomainError


def skew(omega):
    """Cross-product matrix: skew(a) @ b == a x b."""
    wx, wy, wz = np.asarray(omega, dtype=float)
    return np.array([
        [0.0, -wz, wy],
        [wz, 0.0, -wx],
        [-wy, wx, 0.0],
    ])


def big_omega(omega):
    """4x4 rate matrix acting on quaternions stored vector-first (x, y, z, w).

    gamma_dot = 0.5 * big_omega(w) @ gamma is the Hamilton product
    gamma ⊗ [0, w] written in that ordering.
    """
    omega = np.asarray(omega, dtype=float)
    out = np.zeros((4, 4))
    out[:3, :3] = -skew(omega)
    out[:3, 3] = omega
    out[3, :3] = -omega
    return out


def quat_left(q):
    """Matrix L(q) with q ⊗ p == L(q) @ p (w-first storage)."""
    w, x, y, z = q.as_array() if isinstance(q, Quat) else q
    return np.array([
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ])


def quat_right(q):
    """Matrix R(q) with p ⊗ q == R(q) @ p (w-first storage)."""
    w, x, y, z = q.as_array() if isinstance(q, Quat) else q
    return np.array([
        [w, -x, -y, -z],
        [x, w, z, -y],
        [y, -z, w, x],
        [z, y, -x, w],
    ])


@dataclass(frozen=True)
class Quat:
    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self):
        n = math.sqrt(self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z)
        if not n > 0.0 or not math.isfinite(n):
            raise ValueError(f"cannot normalize quaternion ({self.w}, {self.x}, {self.y}, {self.z})")
        s = -1.0 / n if self.w < 0.0 else 1.0 / n
        object.__setattr__(self, "w", float(self.w * s))
        object.__setattr__(self, "x", float(self.x * s))
        object.__setattr__(self, "y", float(self.y * s))
        object.__setattr__(self, "z", float(self.z * s))

    @classmethod
    def identity(cls):
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, wxyz):
        w, x, y, z = (float(c) for c in wxyz)
        return cls(w, x, y, z)

    @classmethod
    def from_xyzw(cls, xyzw):
        x, y, z, w = (float(c) for c in xyzw)
        return cls(w, x, y, z)

    def as_array(self):
        return np.array([self.w, self.x, self.y, self.z])

    def as_xyzw(self):
        return np.array([self.x, self.y, self.z, self.w])

    @property
    def vec(self):
        return np.array([self.x, self.y, self.z])

    def __mul__(self, other):
        if not isinstance(other, Quat):
            return NotImplemented
        return Quat.from_array(quat_left(self) @ other.as_array())

    def inverse(self):
        return Quat(self.w, -self.x, -self.y, -self.z)

    def matrix(self):
        w, x, y, z = self.w, self.x, self.y, self.z
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])

    def to_rot3(self):
        return Rot3(self.matrix())

    def rotate(self, v):
        """Rotate a 3-vector or an (N, 3) array."""
        v = np.asarray(v, dtype=float)
        return v @ self.matrix().T

    def log(self):
        return so3_log(self)

    def angle_to(self, other):
        return float(np.linalg.norm(so3_log(self.inverse() * other)))

    def slerp(self, other, s):
        """Spherical interpolation, s in [0, 1]."""
        if s <= 0.0:
            return self
        if s >= 1.0:
            return other
        return self * so3_exp(s * so3_log(self.inverse() * other))

    def yaw(self):
        m = self.matrix()
        return math.atan2(m[1, 0], m[0, 0])


@dataclass(frozen=True)
class Rot3:
    matrix: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float).reshape(3, 3)
        err = np.abs(m.T @ m - np.eye(3)).max()
        if err > 1e-6 or np.linalg.det(m) <= 0.0:
            raise ValueError(f"not a rotation matrix (orthogonality error {err:.2e})")
        if err > 1e-12:
            # project back onto SO(3)
            u, _, vt = np.linalg.svd(m)
            m = u @ vt
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls):
        return cls(np.eye(3))

    @classmethod
    def from_yaw(cls, yaw):
        c, s = math.cos(yaw), math.sin(yaw)
        return cls(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]))

    def to_quat(self):
        return Quat.from_xyzw(Rotation.from_matrix(self.matrix).as_quat())

    def __matmul__(self, other):
        if isinstance(other, Rot3):
            return Rot3(self.matrix @ other.matrix)
        return np.asarray(other, dtype=float) @ self.matrix.T

    @property
    def T(self):
        return Rot3(self.matrix.T)


@dataclass(frozen=True)
class Pose:
    rotation: Quat = field(default_factory=Quat.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls(Rot3(T[:3, :3]).to_quat(), T[:3, 3].copy())

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation.matrix()
        T[:3, 3] = self.translation
        return T

    def __mul__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return Pose(self.rotation * other.rotation,
                    self.translation + self.rotation.rotate(other.translation))

    def inverse(self):
        r_inv = self.rotation.inverse()
        return Pose(r_inv, -r_inv.rotate(self.translation))

    def apply(self, points):
        """Map points (3,) or (N, 3) from this pose's child frame to its parent."""
        return self.rotation.rotate(points) + self.translation

    def interpolate(self, other, s):
        return Pose(self.rotation.slerp(other.rotation, s),
                    (1.0 - s) * self.translation + s * other.translation)

    def is_finite(self):
        return bool(np.all(np.isfinite(self.translation)) and np.all(np.isfinite(self.rotation.as_array())))


def so3_exp(omega):
    """Unit quaternion of the rotation vector omega."""
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return Quat(1.0 - t2 / 8.0 + t2 * t2 / 384.0, *(0.5 * omega * (1.0 - t2 / 24.0)))
    half = 0.5 * theta
    v = math.sin(half) / theta * omega
    return Quat(math.cos(half), v[0], v[1], v[2])


def so3_log(q):
    """Rotation vector of a unit quaternion, angle in [0, pi]."""
    v = q.vec
    n = float(np.linalg.norm(v))
    if n < SMALL_ANGLE:
        return 2.0 * v / q.w
    return 2.0 * math.atan2(n, q.w) / n * v


def right_jacobian(phi):
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    K = skew(phi)
    if theta < 1e-5:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    return (np.eye(3) - (1 - math.cos(theta)) / theta ** 2 * K
            + (theta - math.sin(theta)) / theta ** 3 * K @ K)


def right_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    K = skew(phi)
    if theta < 1e-5:
        return np.eye(3) + 0.5 * K + K @ K / 12.0
    return (np.eye(3) + 0.5 * K
            + (1 / theta ** 2 - (1 + math.cos(theta)) / (2 * theta * math.sin(theta))) * K @ K)


def slerp_many(q0, q1, s):
    """Vectorized slerp for an array of fractions s; returns (N, 3, 3) matrices."""
    key = Rotation.from_quat(np.vstack([q0.as_xyzw(), q1.as_xyzw()]))
    return Slerp([0.0, 1.0], key)(np.clip(np.asarray(s, dtype=float), 0.0, 1.0)).as_matrix()


def symmetrize(P):
    return 0.5 * (P + P.T)


# --- UTM on WGS-84 (Krüger series to fourth order in n) ---

WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
UTM_K0 = 0.9996
UTM_FALSE_EASTING = 500000.0
UTM_FALSE_NORTHING_SOUTH = 10000000.0

_N = WGS84_F / (2.0 - WGS84_F)
_E = 2.0 * math.sqrt(_N) / (1.0 + _N)
_A = WGS84_A / (1.0 + _N) * (1.0 + _N ** 2 / 4.0 + _N ** 4 / 64.0)
_ALPHA = (
    _N / 2 - 2 * _N ** 2 / 3 + 5 * _N ** 3 / 16 + 41 * _N ** 4 / 180,
    13 * _N ** 2 / 48 - 3 * _N ** 3 / 5 + 557 * _N ** 4 / 1440,
    61 * _N ** 3 / 240 - 103 * _N ** 4 / 140,
    49561 * _N ** 4 / 161280,
)
_BETA = (
    _N / 2 - 2 * _N ** 2 / 3 + 37 * _N ** 3 / 96 - _N ** 4 / 360,
    _N ** 2 / 48 + _N ** 3 / 15 - 437 * _N ** 4 / 1440,
    17 * _N ** 3 / 480 - 37 * _N ** 4 / 840,
    4397 * _N ** 4 / 161280,
)
_DELTA = (
    2 * _N - 2 * _N ** 2 / 3 - 2 * _N ** 3 + 116 * _N ** 4 / 45,
    7 * _N ** 2 / 3 - 8 * _N ** 3 / 5 - 227 * _N ** 4 / 45,
    56 * _N ** 3 / 15 - 136 * _N ** 4 / 35,
    4279 * _N ** 4 / 630,
)


@dataclass(frozen=True)
class UtmPoint:
    easting: float
    northing: float
    zone: int
    north: bool = True
    altitude: float = 0.0

    def __post_init__(self):
        if not 1 <= self.zone <= 60:
            raise DomainError(f"invalid UTM zone {self.zone}")
        if not 100000.0 < self.easting < 900000.0:
            raise DomainError(f"easting {self.easting:.1f} m outside zone {self.zone}")

    def local(self, origin):
        """Offset from another point of the same zone, as an (east, north, up) vector."""
        if origin.zone != self.zone or origin.north != self.north:
            raise DomainError("points belong to different UTM zones")
        return np.array([self.easting - origin.easting,
                         self.northing - origin.northing,
                         self.altitude - origin.altitude])

    def to_dict(self):
        return {
            "easting": self.easting,
            "northing": self.northing,
            "zone": self.zone,
            "north": self.north,
            "altitude": self.altitude,
        }


def utm_zone(lon):
    return int(math.floor((lon + 180.0) / 6.0)) % 60 + 1


def _central_meridian(zone):
    return math.radians(6.0 * zone - 183.0)


def utm_from_wgs84(lat, lon, alt=0.0, zone=None):
    """Forward UTM projection; ``zone`` pins the zone instead of deriving it from lon."""
    if not -80.0 < lat < 84.0:
        raise DomainError(f"latitude {lat} outside the UTM band (-80, 84)")
    if not -180.0 <= lon < 180.0:
        raise DomainError(f"longitude {lon} outside [-180, 180)")
    zone = utm_zone(lon) if zone is None else int(zone)
    phi = math.radians(lat)
    dlam = math.radians(lon) - _central_meridian(zone)
    dlam = (dlam + math.pi) % (2.0 * math.pi) - math.pi

    sin_phi = math.sin(phi)
    t = math.sinh(math.atanh(sin_phi) - _E * math.atanh(_E * sin_phi))
    xi_p = math.atan2(t, math.cos(dlam))
    eta_p = math.atanh(math.sin(dlam) / math.sqrt(1.0 + t * t))

    xi, eta = xi_p, eta_p
    for j, a in enumerate(_ALPHA, start=1):
        xi += a * math.sin(2 * j * xi_p) * math.cosh(2 * j * eta_p)
        eta += a * math.cos(2 * j * xi_p) * math.sinh(2 * j * eta_p)

    easting = UTM_FALSE_EASTING + UTM_K0 * _A * eta
    northing = UTM_K0 * _A * xi
    north = lat >= 0.0
    if not north:
        northing += UTM_FALSE_NORTHING_SOUTH
    return UtmPoint(easting, northing, zone, north, float(alt))


def wgs84_from_utm(point):
    """Inverse UTM projection; returns (lat, lon, alt) in degrees and meters."""
    northing = point.northing if point.north else point.northing - UTM_FALSE_NORTHING_SOUTH
    xi = northing / (UTM_K0 * _A)
    eta = (point.easting - UTM_FALSE_EASTING) / (UTM_K0 * _A)

    xi_p, eta_p = xi, eta
    for j, b in enumerate(_BETA, start=1):
        xi_p -= b * math.sin(2 * j * xi) * math.cosh(2 * j * eta)
        eta_p -= b * math.cos(2 * j * xi) * math.sinh(2 * j * eta)

    chi = math.asin(math.sin(xi_p) / math.cosh(eta_p))
    phi = chi
    for j, d in enumerate(_DELTA, start=1):
        phi += d * math.sin(2 * j * chi)
    lam = _central_meridian(point.zone) + math.atan2(math.sinh(eta_p), math.cos(xi_p))
    lon = (math.degrees(lam) + 180.0) % 360.0 - 180.0
    return math.degrees(phi), lon, point.altitude
