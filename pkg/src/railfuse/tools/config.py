"""Defaults and configuration sections.

Scenario files are YAML with the sections ``world``, ``sensors``,
``filters``, ``frontend``, ``backend``, ``mapping`` and ``run``. Every key
maps onto a field of the matching dataclass below; unknown keys are an error.
"""
from dataclasses import dataclass, field, fields, asdict
import logging
import math
from pathlib import Path

import yaml

from .exceptions import ConfigError

# geometry
SMALL_ANGLE = 1e-8
GRAVITY = 9.81
STANDARD_GAUGE = 1.435
RAIL_HEAD_WIDTH = 0.07
RAIL_HEIGHT = 0.17

# preintegration
REPREINT_BA = 1e-2
REPREINT_BG = 1e-3
IMU_GAP_FACTOR = 2.5

# cloud pipeline
R_MIN = 1.0
GRID_CELL = 1.0
GRID_MIN_COUNT = 3
HIDDEN_ANGLE_PHI = math.radians(3.0)
HIDDEN_RADIUS_D = 0.5
CURVATURE_HALF_WINDOW = 5
CURVATURE_EDGE = 0.005
CURVATURE_PLANAR = 0.001
FEATURE_SECTORS = 6
E_EPS = 20
E_RHO = 80

# rail geometry
BED_MIN_POINTS = 50
BED_HALF_WIDTH = 1.6
STRIP_HALF_WIDTH = 0.3
HEIGHT_BIN = 0.5
LINE_INLIER = 0.05
LINE_ITERATIONS = 200
LINE_MIN_POINTS = 10
LINE_MIN_INLIER_RATIO = 0.3
GROW_SEED_LENGTH = 3.0
GROW_MAX_LENGTH = 20.0
GROW_NEIGHBOR_RADIUS = 0.3
PLANE_INLIER = 0.02
PLANE_ITERATIONS = 200
PLANE_MIN_POINTS = 20
RANSAC_SEED = 7
DESCRIPTOR_X_RANGE = (3.0, 33.0)
DESCRIPTOR_Y_RANGE = (-20.0, 20.0)
DESCRIPTOR_BIN = 0.5

# lidar odometry
KNN = 5
MAX_NN_DIST = 1.0
HUBER_DELTA = 0.1
SCAN_MATCH_ITERATIONS = 10
SCAN_MATCH_STEP_TOL = 1e-6
E_LAMBDA = 50.0
LOCAL_MAP_KEYFRAMES = 10
LIDAR_SIGMA = 0.05
PLANE_SIGMA = 0.02
DESCRIPTOR_WEIGHT = 1.0

# backend
WINDOW_SIZE = 20
KEYFRAME_DISTANCE = 1.0
KEYFRAME_ANGLE = math.radians(5.0)
LM_ITERATIONS = 15
LM_STEP_TOL = 1e-6
GNSS_PERIOD = 10.0
GNSS_HUBER = 2.0
GNSS_ASSOC_TOL = 0.05
ALIGN_MIN_PAIRS = 10
ALIGN_MIN_ARC = 20.0
ALIGN_FREEZE_ARC = 200.0
DAMPING_EPS = 1e-9

# mapping
SUBMAP_SIZE = 10
NDT_VOXEL = 1.0
NDT_ITERATIONS = 25
ICP_ITERATIONS = 30
ICP_TOLERANCE = 1e-4
ICP_TRIM = 0.9
ICP_REJECT_RMS = 0.5
MAP_VOXEL = 0.2

# metrics
MATCH_TOL = 0.01
MIN_MATCHES = 10

SCENARIO_DIR = Path(__file__).resolve().parents[2] / "static" / "scenarios"


def _section_from_dict(cls, data, section):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section '{section}' must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {', '.join(unknown)}")
    values = {}
    for key, value in data.items():
        # YAML lists become tuples so sections stay hashable and read-only
        values[key] = _freeze(value)
    return cls(**values)


def _freeze(value):
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    if isinstance(value, dict):
        return {k: _freeze(v) for k, v in value.items()}
    return value


def _thaw(value):
    if isinstance(value, tuple):
        return [_thaw(v) for v in value]
    if isinstance(value, dict):
        return {k: _thaw(v) for k, v in value.items()}
    return value


class _Section:
    def to_dict(self):
        return {k: _thaw(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data):
        return _section_from_dict(cls, data, cls.SECTION)

    def _require(self, condition, message):
        if not condition:
            raise ConfigError(f"{self.SECTION}: {message}")


@dataclass(frozen=True)
class WorldConfig(_Section):
    """Track layout and trackside furniture.

    ``segments`` is a sequence of mappings with keys ``length`` (m),
    ``radius`` (m, signed, 0 for straight), ``cant`` (m) and ``tag``
    (``feature-rich`` or ``corridor``).
    """
    SECTION = "world"

    segments: tuple = ({"length": 500.0, "radius": 0.0, "cant": 0.0, "tag": "feature-rich"},)
    transition_length: float = 30.0
    gauge: float = STANDARD_GAUGE
    rail_height: float = RAIL_HEIGHT
    rail_head_width: float = RAIL_HEAD_WIDTH
    pole_spacing: float = 50.0
    pole_offset: float = 3.1
    pole_height: float = 7.5
    pole_radius: float = 0.15
    catenary_height: float = 6.0
    catenary_sag: float = 0.3
    structure_spacing: float = 35.0
    start_heading: float = 30.0
    seed: int = 42

    def __post_init__(self):
        self._require(len(self.segments) > 0, "at least one segment is required")
        for i, seg in enumerate(self.segments):
            extra = set(seg) - {"length", "radius", "cant", "tag"}
            self._require(not extra, f"segment {i} has unknown key(s) {sorted(extra)}")
            self._require(float(seg.get("length", 0.0)) > 0.0, f"segment {i} length must be positive")
            radius = float(seg.get("radius", 0.0))
            self._require(radius == 0.0 or abs(radius) > 100.0, f"segment {i} radius must exceed 100 m")
            self._require(seg.get("tag", "feature-rich") in ("feature-rich", "corridor"),
                          f"segment {i} tag must be 'feature-rich' or 'corridor'")
        self._require(self.gauge > 0.0, "gauge must be positive")
        self._require(self.pole_spacing > 0.0, "pole_spacing must be positive")
        self._require(self.transition_length >= 0.0, "transition_length must be non-negative")


@dataclass(frozen=True)
class SensorConfig(_Section):
    SECTION = "sensors"

    lidar_fov_h: float = 81.7
    lidar_fov_v: float = 25.1
    lidar_tilt: float = 12.7
    lidar_rate: float = 10.0
    lidar_range_noise: float = 0.02
    lidar_max_range: float = 90.0
    lidar_points_up: int = 8000
    lidar_points_down: int = 15000
    lidar_petals: int = 37
    lidar_lever: tuple = (1.2, 0.0)
    lidar_separation: float = 0.3
    mount_height: float = 2.6
    body_height: float = 1.6
    imu_rate: float = 200.0
    sigma_a: float = 0.02
    sigma_w: float = 0.002
    sigma_ba: float = 2e-4
    sigma_bg: float = 2e-5
    sigma_po: float = 0.02
    sigma_so: float = 1e-4
    bias_a: tuple = (0.02, -0.015, 0.03)
    bias_g: tuple = (0.001, -0.0008, 0.0005)
    imu_dropouts: tuple = ()
    odo_rate: float = 100.0
    pulses_per_turn: int = 1024
    wheel_diameter: float = 0.86
    odo_scale: float = 1.0
    odo_noise: float = 0.02
    slip_episodes: tuple = ()
    gnss_rate: float = 1.0
    gnss_sigma_h: float = 1.2
    gnss_sigma_v: float = 2.5
    gnss_outages: tuple = ()
    gnss_origin: tuple = (32.35, 116.28, 30.0)
    sun_enabled: bool = True
    sun_azimuth: float = 0.0
    sun_points: int = 60
    bleed_enabled: bool = True
    noise_free: bool = False

    def __post_init__(self):
        for name in ("lidar_rate", "imu_rate", "odo_rate", "gnss_rate", "lidar_fov_h", "lidar_fov_v",
                     "wheel_diameter", "lidar_max_range", "mount_height"):
            self._require(getattr(self, name) > 0, f"{name} must be positive")
        self._require(self.pulses_per_turn > 0, "pulses_per_turn must be positive")
        self._require(len(self.lidar_lever) == 2, "lidar_lever is the horizontal (x, y) lever of the LiDAR pair")
        self._require(self.mount_height > self.body_height, "mount_height is above ground and must exceed body_height")
        for name in ("sigma_a", "sigma_w", "sigma_ba", "sigma_bg", "sigma_po", "sigma_so"):
            self._require(getattr(self, name) > 0, f"{name} must be strictly positive")
        for window in self.imu_dropouts + self.gnss_outages:
            self._require(len(window) == 2 and window[1] > window[0], f"bad time window {window}")
        for episode in self.slip_episodes:
            self._require(len(episode) == 3 and episode[1] > episode[0], f"bad slip episode {episode}")

    @property
    def frame_period(self):
        return 1.0 / self.lidar_rate


@dataclass(frozen=True)
class FilterConfig(_Section):
    SECTION = "filters"

    r_min: float = R_MIN
    grid_cell: float = GRID_CELL
    grid_min_count: int = GRID_MIN_COUNT
    hidden_angle_phi: float = HIDDEN_ANGLE_PHI
    hidden_radius_d: float = HIDDEN_RADIUS_D
    curvature_edge_thresh: float = CURVATURE_EDGE
    curvature_planar_thresh: float = CURVATURE_PLANAR
    curvature_half_window: int = CURVATURE_HALF_WINDOW
    sectors: int = FEATURE_SECTORS
    e_eps: float = E_EPS
    e_rho: float = E_RHO

    def __post_init__(self):
        for name in ("r_min", "grid_cell", "hidden_radius_d", "curvature_edge_thresh",
                     "curvature_planar_thresh", "e_eps", "e_rho"):
            self._require(getattr(self, name) > 0, f"{name} must be positive")
        self._require(0.0 < self.hidden_angle_phi < math.pi / 2, "hidden_angle_phi must lie in (0, pi/2)")
        self._require(self.grid_min_count >= 1, "grid_min_count must be at least 1")


@dataclass(frozen=True)
class FrontendConfig(_Section):
    SECTION = "frontend"

    knn: int = KNN
    max_nn_dist: float = MAX_NN_DIST
    huber_delta: float = HUBER_DELTA
    max_iterations: int = SCAN_MATCH_ITERATIONS
    step_tol: float = SCAN_MATCH_STEP_TOL
    e_lambda: float = E_LAMBDA
    local_map_keyframes: int = LOCAL_MAP_KEYFRAMES
    lidar_sigma: float = LIDAR_SIGMA
    plane_sigma: float = PLANE_SIGMA
    descriptor_weight: float = DESCRIPTOR_WEIGHT
    use_rail_plane: bool = True
    use_descriptor: bool = True

    def __post_init__(self):
        self._require(self.knn >= 3, "knn must be at least 3")
        self._require(self.max_iterations > 0, "max_iterations must be positive")
        self._require(self.lidar_sigma > 0 and self.plane_sigma > 0, "sigmas must be positive")
        self._require(self.huber_delta >= 0, "huber_delta must be non-negative (0 disables)")


@dataclass(frozen=True)
class BackendConfig(_Section):
    SECTION = "backend"

    window_size: int = WINDOW_SIZE
    keyframe_distance: float = KEYFRAME_DISTANCE
    keyframe_angle: float = KEYFRAME_ANGLE
    lm_iterations: int = LM_ITERATIONS
    lm_step_tol: float = LM_STEP_TOL
    gnss_period: float = GNSS_PERIOD
    gnss_huber: float = GNSS_HUBER
    gnss_assoc_tol: float = GNSS_ASSOC_TOL
    gnss_residual_mode: str = "verbatim"
    align_min_pairs: int = ALIGN_MIN_PAIRS
    align_min_arc: float = ALIGN_MIN_ARC
    align_freeze_arc: float = ALIGN_FREEZE_ARC
    use_gnss: bool = True
    use_odometer: bool = True
    use_lidar: bool = True

    def __post_init__(self):
        self._require(self.window_size >= 2, "window_size must be at least 2")
        self._require(self.gnss_residual_mode in ("verbatim", "plain"),
                      "gnss_residual_mode must be 'verbatim' or 'plain'")
        self._require(self.keyframe_distance > 0 and self.keyframe_angle > 0, "keyframe thresholds must be positive")


@dataclass(frozen=True)
class MapConfig(_Section):
    SECTION = "mapping"

    submap_size: int = SUBMAP_SIZE
    ndt_voxel: float = NDT_VOXEL
    ndt_iterations: int = NDT_ITERATIONS
    icp_iterations: int = ICP_ITERATIONS
    icp_tolerance: float = ICP_TOLERANCE
    icp_trim: float = ICP_TRIM
    icp_reject_rms: float = ICP_REJECT_RMS
    map_voxel: float = MAP_VOXEL
    register_submaps: bool = True

    def __post_init__(self):
        self._require(self.submap_size >= 1, "submap_size must be positive")
        self._require(0.0 < self.icp_trim <= 1.0, "icp_trim must lie in (0, 1]")
        self._require(self.ndt_voxel > 0 and self.map_voxel > 0, "voxel sizes must be positive")


@dataclass(frozen=True)
class RunConfig(_Section):
    """Run control. ``speed_profile`` is a sequence of ``[t, v]`` knots (s, m/s)."""
    SECTION = "run"

    name: str = "scenario"
    duration: float = 60.0
    speed_profile: tuple = ((0.0, 0.0), (1.0, 0.0), (8.0, 10.0))
    start_s: float = 20.0
    seed: int = 1
    output_dir: str = "out"
    trajectory: str = "trajectory.tum"
    diagnostics: str = "diagnostics.jsonl"
    metrics: str = "metrics.txt"
    export_map: str = ""
    manifest: str = "submaps.txt"
    align_yaw: bool = False
    queue_size: int = 8

    def __post_init__(self):
        self._require(self.duration > 0, "duration must be positive")
        self._require(len(self.speed_profile) >= 1, "speed_profile needs at least one knot")
        times = [k[0] for k in self.speed_profile]
        self._require(all(b > a for a, b in zip(times, times[1:])), "speed_profile times must increase")
        self._require(self.queue_size >= 1, "queue_size must be positive")


@dataclass(frozen=True)
class ScenarioConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    sensors: SensorConfig = field(default_factory=SensorConfig)
    filters: FilterConfig = field(default_factory=FilterConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    mapping: MapConfig = field(default_factory=MapConfig)
    run: RunConfig = field(default_factory=RunConfig)

    _SECTIONS = {
        "world": WorldConfig,
        "sensors": SensorConfig,
        "filters": FilterConfig,
        "frontend": FrontendConfig,
        "backend": BackendConfig,
        "mapping": MapConfig,
        "run": RunConfig,
    }

    @classmethod
    def from_dict(cls, data):
        data = data or {}
        unknown = sorted(set(data) - set(cls._SECTIONS))
        if unknown:
            raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
        return cls(**{name: section.from_dict(data.get(name)) for name, section in cls._SECTIONS.items()})

    @classmethod
    def from_yaml(cls, path):
        path = Path(path)
        logging.info(f"Loading scenario from {path}")
        try:
            with path.open("r", encoding="utf-8") as fh:
                data = yaml.safe_load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"invalid YAML in {path}: {e}") from e
        return cls.from_dict(data)

    def to_dict(self):
        return {name: getattr(self, name).to_dict() for name in self._SECTIONS}

    def override(self, section, **values):
        """Copy with some keys of one section replaced; ``None`` values are ignored."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        current = getattr(self, section).to_dict()
        current.update(values)
        data = self.to_dict()
        data[section] = current
        return ScenarioConfig.from_dict(data)
