from dataclasses import dataclass, field
from enum import Enum, IntEnum

import numpy as np

from .geom import Pose


class LidarId(str, Enum):
    UP = "up"
    DOWN = "down"


class SceneLabel(IntEnum):
    """Ground-truth tag the simulator attaches to every return."""
    NONE = 0
    GROUND = 1
    RAIL_HEAD = 2
    POLE = 3
    CATENARY = 4
    STRUCTURE = 5
    BLEED = 6
    SUN = 7


# column layout of RawScan.points
X, Y, Z, INTENSITY, T_OFFSET = range(5)


@dataclass
class RawScan:
    """One LiDAR frame in the sensor frame.

    ``points`` is an (N, 5) array of x, y, z, intensity, t_offset where
    t_offset is seconds since ``frame_time``. ``labels`` is optional
    simulator ground truth and follows every subset operation.
    """
    points: np.ndarray
    lidar_id: LidarId
    frame_time: float
    frame_period: float = 0.1
    labels: np.ndarray = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.size == 0:
            pts = np.zeros((0, 5))
        if pts.ndim != 2 or pts.shape[1] != 5:
            raise ValueError(f"scan points must be (N, 5), got {pts.shape}")
        self.points = pts
        self.lidar_id = LidarId(self.lidar_id)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int8)
            if len(self.labels) != len(pts):
                raise ValueError("labels must match points")

    def __len__(self):
        return len(self.points)

    @property
    def xyz(self):
        return self.points[:, :3]

    @property
    def t_offset(self):
        return self.points[:, T_OFFSET]

    @property
    def ranges(self):
        return np.linalg.norm(self.points[:, :3], axis=1)

    def subset(self, mask):
        labels = None if self.labels is None else self.labels[mask]
        return RawScan(self.points[mask], self.lidar_id, self.frame_time, self.frame_period, labels)

    def with_xyz(self, xyz):
        pts = self.points.copy()
        pts[:, :3] = xyz
        return RawScan(pts, self.lidar_id, self.frame_time, self.frame_period, self.labels)

    def validate(self):
        if not np.all(np.isfinite(self.points)):
            raise ValueError("scan contains non-finite values")
        t = self.t_offset
        if len(t) and (t.min() < 0.0 or t.max() > self.frame_period + 1e-9):
            raise ValueError("t_offset outside the frame period")
        return self

    def to_dict(self):
        return {
            "lidar_id": self.lidar_id.value,
            "frame_time": self.frame_time,
            "n_points": len(self),
        }


@dataclass
class FeatureCloud:
    """Edge and planar features of one de-skewed scan, in the frame-end sensor frame."""
    edges: np.ndarray
    planars: np.ndarray
    lidar_id: LidarId
    frame_time: float = 0.0
    pose_hint: Pose = field(default_factory=Pose.identity)
    edge_labels: np.ndarray = None

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=float).reshape(-1, 3)
        self.planars = np.asarray(self.planars, dtype=float).reshape(-1, 3)
        self.lidar_id = LidarId(self.lidar_id)

    @property
    def n_edge(self):
        return len(self.edges)

    @property
    def n_planar(self):
        return len(self.planars)

    @classmethod
    def empty(cls, lidar_id, frame_time=0.0):
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), lidar_id, frame_time)

    def transformed(self, pose):
        """Features mapped through ``pose`` (child frame to parent)."""
        return FeatureCloud(pose.apply(self.edges) if self.n_edge else self.edges,
                            pose.apply(self.planars) if self.n_planar else self.planars,
                            self.lidar_id, self.frame_time, self.pose_hint, self.edge_labels)

    def to_dict(self):
        return {
            "lidar_id": self.lidar_id.value,
            "frame_time": self.frame_time,
            "n_edge": self.n_edge,
            "n_planar": self.n_planar,
        }
