"""Rail-track extraction, rail plane and the height descriptor.

Clouds are (N, 3) arrays. Track-bed gating works in a level frame obtained by
undoing the sensor's downward mount pitch; everything returned is expressed
in the frame of the input cloud.
"""
from dataclasses import dataclass, field
import math

import numpy as np
import structlog
from scipy.spatial import cKDTree

from ..tools.config import (BED_HALF_WIDTH, BED_MIN_POINTS, DESCRIPTOR_BIN, DESCRIPTOR_X_RANGE,
                            DESCRIPTOR_Y_RANGE, GROW_MAX_LENGTH, GROW_NEIGHBOR_RADIUS,
                            GROW_SEED_LENGTH, HEIGHT_BIN, LINE_INLIER, LINE_ITERATIONS,
                            LINE_MIN_INLIER_RATIO, LINE_MIN_POINTS, PLANE_INLIER, PLANE_ITERATIONS,
                            PLANE_MIN_POINTS, RAIL_HEAD_WIDTH, RAIL_HEIGHT, RANSAC_SEED,
                            STANDARD_GAUGE, STRIP_HALF_WIDTH)
from ..tools.exceptions import BedNotFound, LineFitFailed, PlaneDegenerate

log = structlog.get_logger(__name__)

PARALLEL_TOL = math.radians(2.0)
RAIL_TOP_TOL = 0.04


def _pitch(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass
class TrackBed:
    """Track-bed points and the two rail candidate strips (indices into the cloud)."""
    bed: np.ndarray
    left: np.ndarray
    right: np.ndarray
    cloud: np.ndarray = field(repr=False, default=None)

    @property
    def left_points(self):
        return self.cloud[self.left]

    @property
    def right_points(self):
        return self.cloud[self.right]


@dataclass
class RailLine:
    point: np.ndarray
    direction: np.ndarray
    inliers: np.ndarray

    def distance(self, xyz):
        diff = np.asarray(xyz, dtype=float) - self.point
        return np.linalg.norm(np.cross(diff, self.direction), axis=-1)

    def along(self, xyz):
        return (np.asarray(xyz, dtype=float) - self.point) @ self.direction


@dataclass
class RailTracks:
    left: RailLine
    right: RailLine
    gauge_est: float

    def __post_init__(self):
        cos = abs(float(self.left.direction @ self.right.direction))
        if math.acos(min(cos, 1.0)) > PARALLEL_TOL:
            raise LineFitFailed("both", "rail lines are not parallel")

    def to_dict(self):
        return {
            "n_left": len(self.left.inliers),
            "n_right": len(self.right.inliers),
            "gauge_est": self.gauge_est,
        }


@dataclass
class RailPlane:
    """Plane n_p . x + d_p = 0 through both rail heads."""
    n_p: np.ndarray
    d_p: float
    support_count: int = PLANE_MIN_POINTS

    def __post_init__(self):
        n = np.asarray(self.n_p, dtype=float).reshape(3)
        norm = float(np.linalg.norm(n))
        if not norm > 0:
            raise ValueError("plane normal must be non-zero")
        self.n_p = n / norm
        self.d_p = float(self.d_p) / norm

    @property
    def m(self):
        return np.concatenate([self.n_p, [self.d_p]])

    def distance(self, xyz):
        return np.asarray(xyz, dtype=float) @ self.n_p + self.d_p

    def to_dict(self):
        return {"n_p": self.n_p.tolist(), "d_p": self.d_p, "support_count": self.support_count}


def detect_track_bed(cloud, mount_height, mount_angle, gauge=STANDARD_GAUGE,
                     rail_height=RAIL_HEIGHT):
    """Gate the track bed below the sensor and collect candidate rail-head points.

    ``mount_angle`` is the downward pitch of the sensor. Within each strip at
    +/- gauge/2 only points near the local maximum height of their 0.5 m
    longitudinal bin are kept.
    """
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(cloud) == 0:
        raise BedNotFound("empty cloud")
    level = cloud @ _pitch(mount_angle).T
    x, y, z = level[:, 0], level[:, 1], level[:, 2]
    z_bed = -mount_height
    in_bed = ((x > 0.0) & (np.abs(y) < BED_HALF_WIDTH)
              & (z > z_bed - 0.3) & (z < z_bed + rail_height + 0.3))
    bed = np.flatnonzero(in_bed)
    if len(bed) < BED_MIN_POINTS:
        raise BedNotFound(f"only {len(bed)} points in the track-bed band")

    strips = []
    for sign in (1.0, -1.0):
        idx = bed[np.abs(y[bed] - sign * gauge / 2.0) < STRIP_HALF_WIDTH]
        if len(idx) == 0:
            strips.append(idx)
            continue
        bins = np.floor(x[idx] / HEIGHT_BIN).astype(np.int64)
        _, inv = np.unique(bins, return_inverse=True)
        inv = inv.reshape(-1)
        top = np.full(inv.max() + 1, -np.inf)
        np.maximum.at(top, inv, z[idx])
        # rail head sits above the ballast; keep the top layer of each bin
        keep = z[idx] >= top[inv] - RAIL_TOP_TOL
        strips.append(idx[keep])
    log.debug("track bed detected", bed=len(bed), left=len(strips[0]), right=len(strips[1]))
    return TrackBed(bed, strips[0], strips[1], cloud)


def _ransac_line(points, rng, inlier=LINE_INLIER, iterations=LINE_ITERATIONS):
    n = len(points)
    best = None
    best_count = 0
    for _ in range(iterations):
        i, j = rng.choice(n, size=2, replace=False)
        d = points[j] - points[i]
        norm = np.linalg.norm(d)
        if norm < 1e-6:
            continue
        d /= norm
        dist = np.linalg.norm(np.cross(points - points[i], d), axis=1)
        mask = dist < inlier
        count = int(mask.sum())
        if count > best_count:
            best, best_count = mask, count
    return best, best_count


def _pca_line(points):
    centroid = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centroid, full_matrices=False)
    direction = vt[0]
    if direction[0] < 0:
        direction = -direction
    return centroid, direction


def _fit_one(points, side, seed):
    if len(points) < LINE_MIN_POINTS:
        raise LineFitFailed(side, f"{len(points)} candidate points, need {LINE_MIN_POINTS}")
    rng = np.random.default_rng(seed)
    mask, count = _ransac_line(points, rng)
    if mask is None or count / len(points) < LINE_MIN_INLIER_RATIO:
        ratio = 0.0 if mask is None else count / len(points)
        raise LineFitFailed(side, f"inlier ratio {ratio:.2f} below {LINE_MIN_INLIER_RATIO}")
    inliers = points[mask]
    centroid, direction = _pca_line(inliers)
    return RailLine(centroid, direction, inliers)


def fit_rail_lines(candidates, seed=RANSAC_SEED):
    """One RANSAC line per candidate strip, refined by least squares on its inliers."""
    left = _fit_one(candidates.left_points, "left", seed)
    right = _fit_one(candidates.right_points, "right", seed + 1)
    gauge = float(right.distance(left.point))
    tracks = RailTracks(left, right, gauge)
    log.debug("rail lines fitted", **tracks.to_dict())
    return tracks


def _grow_one(cloud, tree, line, radius, max_dist):
    near = line.distance(cloud) <= max_dist
    if not near.any():
        return RailLine(line.point, line.direction, np.zeros((0, 3)))
    s = line.along(cloud)
    s0 = float(line.along(line.inliers).min()) if len(line.inliers) else float(s[near].min())
    eligible = near & (s >= s0 - radius) & (s <= s0 + GROW_MAX_LENGTH)
    grown = eligible & (s <= s0 + GROW_SEED_LENGTH)
    frontier = np.flatnonzero(grown)
    while len(frontier):
        neighbours = tree.query_ball_point(cloud[frontier], radius)
        cand = np.unique(np.concatenate([np.asarray(nb, dtype=np.int64) for nb in neighbours]))
        cand = cand[eligible[cand] & ~grown[cand]]
        grown[cand] = True
        frontier = cand
    return RailLine(line.point, line.direction, cloud[np.flatnonzero(grown)])


def grow_rail_points(cloud, tracks, radius=GROW_NEIGHBOR_RADIUS, max_dist=RAIL_HEAD_WIDTH):
    """Breadth-first growth from a 3 m seed along each fitted line, clipped at 20 m."""
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
    tree = cKDTree(cloud)
    left = _grow_one(cloud, tree, tracks.left, radius, max_dist)
    right = _grow_one(cloud, tree, tracks.right, radius, max_dist)
    log.debug("rail points grown", left=len(left.inliers), right=len(right.inliers))
    return RailTracks(left, right, tracks.gauge_est)


def fit_rail_plane(tracks, up=(0.0, 0.0, 1.0), seed=RANSAC_SEED):
    """RANSAC plane through both rails, normal oriented along ``up``."""
    left, right = tracks.left.inliers, tracks.right.inliers
    if len(left) < PLANE_MIN_POINTS or len(right) < PLANE_MIN_POINTS:
        raise PlaneDegenerate(f"rail support {len(left)}/{len(right)}, need {PLANE_MIN_POINTS} each")
    points = np.vstack([left, right])
    side = np.concatenate([np.zeros(len(left), bool), np.ones(len(right), bool)])
    rng = np.random.default_rng(seed)
    best, best_count = None, 0
    for _ in range(PLANE_ITERATIONS):
        i, j, k = rng.choice(len(points), size=3, replace=False)
        n = np.cross(points[j] - points[i], points[k] - points[i])
        norm = np.linalg.norm(n)
        if norm < 1e-9:
            continue
        n /= norm
        mask = np.abs((points - points[i]) @ n) < PLANE_INLIER
        count = int(mask.sum())
        if count > best_count:
            best, best_count = mask, count
    if best is None:
        raise PlaneDegenerate("no non-degenerate sample")
    n_left, n_right = int((best & ~side).sum()), int((best & side).sum())
    if min(n_left, n_right) < 3:
        raise PlaneDegenerate(f"plane supported by a single rail ({n_left}/{n_right})")
    inliers = points[best]
    centroid = inliers.mean(axis=0)
    _, sv, vt = np.linalg.svd(inliers - centroid, full_matrices=False)
    if sv[1] < 1e-2 * sv[0]:
        raise PlaneDegenerate("inliers are collinear")
    n = vt[2]
    if n @ np.asarray(up, dtype=float) < 0:
        n = -n
    return RailPlane(n, -float(n @ centroid), best_count)


def plane_transform(m, T):
    """Plane coefficients after the point map x' = R x + t."""
    n = np.asarray(m[:3], dtype=float)
    R = T.rotation.matrix()
    n_new = R @ n
    return np.concatenate([n_new, [m[3] - n_new @ T.translation]])


def plane_residual(m_k, m_k1, T_rel):
    """r_P = m_{k+1} - transform(T_rel, m_k); T_rel maps frame-k points into frame k+1."""
    a = m_k.m if isinstance(m_k, RailPlane) else np.asarray(m_k, dtype=float)
    b = m_k1.m if isinstance(m_k1, RailPlane) else np.asarray(m_k1, dtype=float)
    return b - plane_transform(a, T_rel)


@dataclass
class HeightDescriptor:
    grid: np.ndarray
    x_range: tuple = DESCRIPTOR_X_RANGE
    y_range: tuple = DESCRIPTOR_Y_RANGE
    bin_side: float = DESCRIPTOR_BIN

    @property
    def n_rows(self):
        return self.grid.shape[0]


def _descriptor_shape(x_range, y_range, bin_side):
    return (int(round((x_range[1] - x_range[0]) / bin_side)),
            int(round((y_range[1] - y_range[0]) / bin_side)))


def build_height_descriptor(cloud, ground_z=0.0, x_range=DESCRIPTOR_X_RANGE,
                            y_range=DESCRIPTOR_Y_RANGE, bin_side=DESCRIPTOR_BIN):
    """Per-bin maximum height above ``ground_z``; rows run along x, empty bins are 0."""
    rows, cols = _descriptor_shape(x_range, y_range, bin_side)
    grid = np.zeros((rows, cols))
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(cloud):
        r = np.floor((cloud[:, 0] - x_range[0]) / bin_side).astype(np.int64)
        c = np.floor((cloud[:, 1] - y_range[0]) / bin_side).astype(np.int64)
        ok = (r >= 0) & (r < rows) & (c >= 0) & (c < cols)
        h = np.maximum(cloud[ok, 2] - ground_z, 0.0)
        np.maximum.at(grid, (r[ok], c[ok]), h)
    return HeightDescriptor(grid, tuple(x_range), tuple(y_range), bin_side)


def _row_cosine(a, b):
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    out = np.ones(len(a))
    both_empty = (na == 0) & (nb == 0)
    full = (na > 0) & (nb > 0)
    out[both_empty] = 0.0
    out[full] = 1.0 - np.einsum("ij,ij->i", a[full], b[full]) / (na[full] * nb[full])
    return out


def descriptor_residual(D_k, D_k1):
    """Mean row cosine distance; both-empty rows count 0 and one-empty rows count 1."""
    a = D_k.grid if isinstance(D_k, HeightDescriptor) else np.asarray(D_k, dtype=float)
    b = D_k1.grid if isinstance(D_k1, HeightDescriptor) else np.asarray(D_k1, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"descriptor shapes differ: {a.shape} vs {b.shape}")
    return float(np.clip(_row_cosine(a, b).mean(), 0.0, 1.0))


def shift_rows(grid, shift_rows_f):
    """Grid sampled at fractional row r + shift by linear interpolation; returns (grid, valid)."""
    n = grid.shape[0]
    src = np.arange(n) + shift_rows_f
    valid = (src >= 0.0) & (src <= n - 1)
    lo = np.clip(np.floor(src).astype(np.int64), 0, n - 1)
    hi = np.clip(lo + 1, 0, n - 1)
    w = (src - lo)[:, None]
    out = (1.0 - w) * grid[lo] + w * grid[hi]
    return out, valid


def shifted_descriptor_residual(D_k, D_k1, displacement):
    """Residual of D_k1 against D_k moved by a longitudinal displacement (m), overlap rows only."""
    shifted, valid = shift_rows(D_k.grid, displacement / D_k.bin_side)
    if not valid.any():
        return 1.0, 0
    values = _row_cosine(shifted[valid], D_k1.grid[valid])
    return float(np.clip(values.mean(), 0.0, 1.0)), int(valid.sum())


class RailExtractor:
    """Full rail chain for down-view scans: bed, lines, growth, plane."""

    def __init__(self, mount_height, mount_angle, gauge=STANDARD_GAUGE, rail_height=RAIL_HEIGHT):
        self.mount_height = mount_height
        self.mount_angle = mount_angle
        self.gauge = gauge
        self.rail_height = rail_height
        self.up = _pitch(mount_angle).T @ np.array([0.0, 0.0, 1.0])

    def extract(self, cloud):
        bed = detect_track_bed(cloud, self.mount_height, self.mount_angle, self.gauge, self.rail_height)
        tracks = grow_rail_points(cloud, fit_rail_lines(bed))
        plane = fit_rail_plane(tracks, up=self.up)
        return tracks, plane
