"""Sensor simulation over the synthetic rail world.

Every stream is a deterministic function of the scenario and its seeds: the
random generator of a sample is keyed by (run seed, stream, index), so the
same sample is produced regardless of the order in which streams are read.
"""
from dataclasses import dataclass, field
import math

import numpy as np
import structlog

from ..tools.config import GRAVITY, ScenarioConfig
from ..tools.exceptions import ConfigError
from ..tools.geom import Pose, Quat, Rot3, UtmPoint, utm_from_wgs84, wgs84_from_utm
from ..tools.scan import LidarId, RawScan, SceneLabel
from .preintegration import ImuSample, NavState, OdometerSample
from .rail_world import World, cast_rays

log = structlog.get_logger(__name__)

GRAVITY_VEC = np.array([0.0, 0.0, GRAVITY])
SUN_ELEVATION = math.radians(8.0)
SUN_SPREAD = math.radians(0.5)
BLEED_GRAZING_COS = 0.5
BLEED_PROBABILITY = 0.5
ROSETTE_REVOLUTIONS = 20.37
GOLDEN = 0.6180339887498949
INTENSITY_BY_LABEL = {
    SceneLabel.GROUND: 20.0, SceneLabel.RAIL_HEAD: 120.0, SceneLabel.POLE: 60.0,
    SceneLabel.CATENARY: 80.0, SceneLabel.STRUCTURE: 40.0, SceneLabel.BLEED: 10.0, SceneLabel.SUN: 250.0,
}
_STREAMS = {"imu": 1, "odo": 2, "gnss": 3, LidarId.UP: 4, LidarId.DOWN: 5}
_INTENSITY_LUT = np.zeros(max(SceneLabel) + 1)
for _label, _value in INTENSITY_BY_LABEL.items():
    _INTENSITY_LUT[_label] = _value


def _rng(seed, stream, index):
    return np.random.default_rng([int(seed), _STREAMS[stream], int(index)])


def _pitch_quat(angle):
    return Quat(math.cos(angle / 2.0), 0.0, math.sin(angle / 2.0), 0.0)


def lidar_extrinsics(sensors, rail_height):
    """Sensor-to-body poses. ``mount_height`` is the down sensor's height above the ground."""
    tilt = math.radians(sensors.lidar_tilt)
    lx, ly = sensors.lidar_lever
    z_down = sensors.mount_height - rail_height - sensors.body_height
    return {
        LidarId.DOWN: Pose(_pitch_quat(tilt), [lx, ly, z_down]),
        LidarId.UP: Pose(_pitch_quat(-tilt), [lx, ly, z_down + sensors.lidar_separation]),
    }


class SpeedProfile:
    """Smoothstep speed between (t, v) knots, closed-form arc length."""

    def __init__(self, knots, start_s):
        knots = np.asarray(knots, dtype=float).reshape(-1, 2)
        self.t = knots[:, 0]
        self.v = knots[:, 1]
        self.start_s = float(start_s)
        seg = np.diff(self.t) * (self.v[:-1] + 0.5 * np.diff(self.v))
        self.s_knots = self.start_s + np.concatenate([[0.0], np.cumsum(seg)])

    def __call__(self, t):
        """(s, s_dot, s_ddot) at times t."""
        t = np.asarray(t, dtype=float)
        s = np.empty_like(t)
        sd = np.empty_like(t)
        sdd = np.zeros_like(t)
        before = t < self.t[0]
        after = t >= self.t[-1]
        s[before] = self.start_s + self.v[0] * (t[before] - self.t[0])
        sd[before] = self.v[0]
        s[after] = self.s_knots[-1] + self.v[-1] * (t[after] - self.t[-1])
        sd[after] = self.v[-1]
        mid = ~(before | after)
        if mid.any():
            j = np.searchsorted(self.t, t[mid], side="right") - 1
            T = self.t[j + 1] - self.t[j]
            dv = self.v[j + 1] - self.v[j]
            tau = (t[mid] - self.t[j]) / T
            s[mid] = self.s_knots[j] + T * (self.v[j] * tau + dv * (tau ** 3 - 0.5 * tau ** 4))
            sd[mid] = self.v[j] + dv * (3 * tau ** 2 - 2 * tau ** 3)
            sdd[mid] = dv / T * 6 * tau * (1 - tau)
        return s, sd, sdd


@dataclass
class Kinematics:
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    R: np.ndarray
    omega: np.ndarray
    speed: np.ndarray


class GroundTruth:
    """Body trajectory riding the track, in W0."""

    def __init__(self, world, sensors, run):
        self.world = world
        self.track = world.track
        self.sensors = sensors
        self.profile = SpeedProfile(run.speed_profile, run.start_s)
        self.bias_a = np.asarray(sensors.bias_a, dtype=float)
        self.bias_g = np.asarray(sensors.bias_g, dtype=float)
        self.c_odo = float(sensors.odo_scale)
        s, _, _ = self.profile(np.linspace(0.0, run.duration + 1.0, 2001))
        if s.min() < 0.0 or s.max() > self.track.length:
            raise ConfigError(f"run leaves the track: s in [{s.min():.1f}, {s.max():.1f}] m, "
                              f"track length {self.track.length:.1f} m")

    def kinematics(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        s, sd, sdd = self.profile(t)
        tr = self.track
        d1 = tr.center(s, 1)
        d2 = tr.center(s, 2)
        p = tr.center(s) + np.array([0.0, 0.0, self.sensors.body_height])
        v = sd[:, None] * d1
        a = sdd[:, None] * d1 + (sd ** 2)[:, None] * d2
        R = tr.rotation(s)
        phi = tr.roll(s)
        psi_dot = sd * tr.yaw_rate(s)
        phi_dot = sd * tr.roll_rate(s)
        omega = np.column_stack([phi_dot, psi_dot * np.sin(phi), psi_dot * np.cos(phi)])
        speed = sd * np.linalg.norm(d1, axis=1)
        return Kinematics(p, v, a, R, omega, speed)

    def state(self, t):
        k = self.kinematics(t)
        return NavState(k.p[0], k.v[0], _quat(k.R[0]), self.bias_a, self.bias_g, self.c_odo)

    def pose(self, t):
        k = self.kinematics(t)
        return Pose(_quat(k.R[0]), k.p[0])

    def positions(self, times):
        return self.kinematics(times).p


def _quat(R):
    return Rot3(R).to_quat()


def _in_windows(t, windows):
    return any(a <= t < b for a, b in windows)


def simulate_inertial(truth, sensors, t, index=0, seed=0):
    """Specific force and angular rate in the body frame, with biases and white noise."""
    k = truth.kinematics(t)
    R = k.R[0]
    accel = R.T @ (k.a[0] + GRAVITY_VEC) + truth.bias_a
    gyro = k.omega[0] + truth.bias_g
    if not sensors.noise_free:
        rng = _rng(seed, "imu", index)
        root = math.sqrt(sensors.imu_rate)
        accel = accel + rng.normal(0.0, sensors.sigma_a * root, 3)
        gyro = gyro + rng.normal(0.0, sensors.sigma_w * root, 3)
    return ImuSample(float(t), accel, gyro)


def simulate_odometer(truth, sensors, t, index=0, seed=0):
    """Signed encoder pulse rate of the true forward speed over the scale, slip applied."""
    speed = float(truth.kinematics(t).speed[0]) / truth.c_odo
    for a, b, factor in sensors.slip_episodes:
        if a <= t < b:
            speed *= factor
    if not sensors.noise_free:
        speed += _rng(seed, "odo", index).normal(0.0, sensors.odo_noise)
    pulses = speed * sensors.pulses_per_turn / (math.pi * sensors.wheel_diameter)
    return OdometerSample(float(t), pulses, sensors.pulses_per_turn, sensors.wheel_diameter)


@dataclass(frozen=True)
class GnssReading:
    """Receiver output: WGS-84 position with its reported 1-sigma accuracy."""
    t: float
    lat: float
    lon: float
    alt: float
    sigma_h: float
    sigma_v: float
    quality: str = "SPP"


def simulate_gnss(truth, sensors, t, index=0, seed=0):
    """SPP fix of the antenna (body origin), or None inside an outage window."""
    if _in_windows(t, sensors.gnss_outages):
        return None
    p = truth.positions(t)[0]
    if not sensors.noise_free:
        rng = _rng(seed, "gnss", index)
        p = p + rng.normal(0.0, [sensors.gnss_sigma_h, sensors.gnss_sigma_h, sensors.gnss_sigma_v])
    lat0, lon0, alt0 = sensors.gnss_origin
    origin = utm_from_wgs84(lat0, lon0, alt0)
    point = UtmPoint(origin.easting + p[0], origin.northing + p[1], origin.zone, origin.north, alt0 + p[2])
    lat, lon, alt = wgs84_from_utm(point)
    return GnssReading(float(t), lat, lon, alt, sensors.gnss_sigma_h, sensors.gnss_sigma_v)


# --- LiDAR ---

def rosette_directions(n, fov_h, fov_v, petals, frame_index):
    """Unit ray directions in the sensor frame along a rose curve, in sampling order."""
    u = np.arange(n) / n
    theta = 2.0 * math.pi * (ROSETTE_REVOLUTIONS * u + GOLDEN * frame_index / petals)
    rho = np.cos(petals * theta)
    az = 0.5 * math.radians(fov_h) * rho * np.cos(theta)
    el = 0.5 * math.radians(fov_v) * rho * np.sin(theta)
    return np.column_stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])


def _sun_points(rng, sensors, R_wl, n):
    az = math.radians(sensors.sun_azimuth)
    sun_w = np.array([math.cos(az) * math.cos(SUN_ELEVATION), math.sin(az) * math.cos(SUN_ELEVATION),
                      math.sin(SUN_ELEVATION)])
    sun_l = R_wl.T @ sun_w
    el = math.asin(sun_l[2])
    azl = math.atan2(sun_l[1], sun_l[0])
    if abs(azl) > math.radians(sensors.lidar_fov_h) / 2 or abs(el) > math.radians(sensors.lidar_fov_v) / 2:
        return np.zeros((0, 3))
    az_j = azl + rng.normal(0.0, SUN_SPREAD, n)
    el_j = el + rng.normal(0.0, SUN_SPREAD, n)
    dirs = np.column_stack([np.cos(el_j) * np.cos(az_j), np.cos(el_j) * np.sin(az_j), np.sin(el_j)])
    return dirs * rng.uniform(2.0, 40.0, n)[:, None]


def simulate_scan(world, truth, sensors, lidar_id, frame_index, extrinsics=None, seed=0):
    """Ray-cast one rosette frame of a LiDAR; points are in the sensor frame at their own time."""
    lidar_id = LidarId(lidar_id)
    extrinsics = extrinsics or lidar_extrinsics(sensors, world.cfg.rail_height)
    T_bl = extrinsics[lidar_id]
    period = sensors.frame_period
    t0 = frame_index * period
    n = sensors.lidar_points_up if lidar_id is LidarId.UP else sensors.lidar_points_down
    rng = _rng(seed, lidar_id, frame_index)

    d_l = rosette_directions(n, sensors.lidar_fov_h, sensors.lidar_fov_v, sensors.lidar_petals, frame_index)
    t_off = np.arange(n) / n * period
    k = truth.kinematics(t0 + t_off)
    R_bl = T_bl.rotation.matrix()
    origins = k.p + np.einsum("nij,j->ni", k.R, T_bl.translation)
    dirs = np.einsum("nij,nj->ni", k.R, d_l @ R_bl.T)

    s_now = float(truth.profile(np.array([t0]))[0][0])
    boxes, cylinders = world.primitives_near(s_now, sensors.lidar_max_range + 10.0, 20.0,
                                             rails=lidar_id is LidarId.DOWN)
    hits = cast_rays(origins, dirs, world.ground_z, boxes, cylinders, sensors.lidar_max_range)
    ok = hits.kind >= 0
    ranges = hits.t.copy()
    if not sensors.noise_free:
        ranges = ranges + rng.normal(0.0, sensors.lidar_range_noise, n)
    xyz = d_l * ranges[:, None]
    labels = hits.label.astype(np.int8)
    key = np.arange(n, dtype=float)

    extra_xyz, extra_t, extra_label, extra_key = [], [], [], []
    if sensors.bleed_enabled:
        pole = ok & (hits.label == int(SceneLabel.POLE))
        idx = np.flatnonzero(pole)
        if len(idx):
            hit_w = origins[idx] + dirs[idx] * hits.t[idx, None]
            axes = np.stack([cylinders[i].base for i in hits.index[idx]])
            radial = hit_w - axes
            radial[:, 2] = 0.0
            radial /= np.maximum(np.linalg.norm(radial, axis=1), 1e-12)[:, None]
            grazing = np.abs(np.einsum("ni,ni->n", radial, dirs[idx])) < BLEED_GRAZING_COS
            chosen = idx[grazing & (rng.random(len(idx)) < BLEED_PROBABILITY)]
            if len(chosen):
                depth = ranges[chosen] + rng.uniform(0.1, 0.45, len(chosen))
                extra_xyz.append(d_l[chosen] * depth[:, None])
                extra_t.append(t_off[chosen])
                extra_label.append(np.full(len(chosen), int(SceneLabel.BLEED)))
                extra_key.append(chosen + 0.5)
    if sensors.sun_enabled and lidar_id is LidarId.UP:
        R_wl = k.R[0] @ R_bl
        sun = _sun_points(rng, sensors, R_wl, sensors.sun_points)
        if len(sun):
            ts = np.sort(rng.uniform(0.0, period, len(sun)))
            extra_xyz.append(sun)
            extra_t.append(ts)
            extra_label.append(np.full(len(sun), int(SceneLabel.SUN)))
            extra_key.append(ts / period * n + 0.25)

    xyz, t_out, labels, key = xyz[ok], t_off[ok], labels[ok], key[ok]
    if extra_xyz:
        xyz = np.vstack([xyz] + extra_xyz)
        t_out = np.concatenate([t_out] + extra_t)
        labels = np.concatenate([labels] + [e.astype(np.int8) for e in extra_label])
        key = np.concatenate([key] + extra_key)
    order = np.argsort(key, kind="stable")
    intensity = _INTENSITY_LUT[labels.astype(int)]
    points = np.column_stack([xyz, intensity, t_out])[order]
    return RawScan(points, lidar_id, t0, period, labels[order])


# --- streams ---

@dataclass
class SensorFrame:
    index: int
    t0: float
    t1: float
    imu: list = field(default_factory=list)
    odometer: list = field(default_factory=list)
    gnss: list = field(default_factory=list)
    scans: dict = field(default_factory=dict)


class RailSim:
    """World, truth and every sensor stream of one scenario."""

    def __init__(self, scenario=None):
        self.scenario = scenario or ScenarioConfig()
        self.world = World(self.scenario.world)
        self.sensors = self.scenario.sensors
        self.run = self.scenario.run
        self.truth = GroundTruth(self.world, self.sensors, self.run)
        self.extrinsics = lidar_extrinsics(self.sensors, self.scenario.world.rail_height)
        self.seed = self.run.seed
        self.n_frames = int(round(self.run.duration * self.sensors.lidar_rate))
        log.info("RailSim initialized", scenario=self.run.name, frames=self.n_frames, seed=self.seed,
                 noise_free=self.sensors.noise_free)

    def _grid(self, rate, t0, t1, closed=False):
        i0 = int(math.ceil(t0 * rate - 1e-9))
        i1 = int(math.floor(t1 * rate + 1e-9))
        out = []
        for i in range(i0, i1 + 1):
            t = i / rate
            if t < t0 - 1e-12 or t > t1 + 1e-12 or (not closed and t >= t1 - 1e-12):
                continue
            out.append((i, t))
        return out

    def imu(self, t0, t1):
        s = self.sensors
        return [simulate_inertial(self.truth, s, t, i, self.seed) for i, t in self._grid(s.imu_rate, t0, t1)
                if not _in_windows(t, s.imu_dropouts)]

    def odometer(self, t0, t1):
        s = self.sensors
        return [simulate_odometer(self.truth, s, t, i, self.seed) for i, t in self._grid(s.odo_rate, t0, t1)]

    def gnss(self, t0, t1):
        """Fixes in (t0, t1]."""
        s = self.sensors
        out = []
        for i, t in self._grid(s.gnss_rate, t0, t1, closed=True):
            if t <= t0 + 1e-12:
                continue
            fix = simulate_gnss(self.truth, s, t, i, self.seed)
            if fix is not None:
                out.append(fix)
        return out

    def scan(self, lidar_id, frame_index):
        return simulate_scan(self.world, self.truth, self.sensors, lidar_id, frame_index, self.extrinsics, self.seed)

    def frame(self, index):
        period = self.sensors.frame_period
        t0, t1 = index * period, (index + 1) * period
        return SensorFrame(index, t0, t1, self.imu(t0, t1), self.odometer(t0, t1), self.gnss(t0, t1),
                           {lid: self.scan(lid, index) for lid in (LidarId.UP, LidarId.DOWN)})

    def frames(self):
        for index in range(self.n_frames):
            yield self.frame(index)
