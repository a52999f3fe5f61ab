"""Feature correspondences and the fused two-LiDAR scan matcher.

Poses are body poses in the odometry frame W, perturbed as
p <- p + dp and R <- R Exp(dtheta); the 6-vector ordering is [dp, dtheta].
Feature points live in their LiDAR frame and reach the body through the
LiDAR extrinsic.
"""
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations
import math

import numpy as np
import structlog
from scipy.spatial import cKDTree

from ..tools.config import FrontendConfig
from ..tools.geom import Pose, so3_exp
from ..tools.scan import LidarId

log = structlog.get_logger(__name__)

XI_F_VALUES = (1, 50, 100)
XI_D_VALUES = (1, 10)
XI_P_MAX = 1e3
MIN_IMU_INCREMENT = 1e-6


def point_to_line(p, e1, e2):
    """Distance from p to the line through e1 and e2."""
    p, e1, e2 = (np.asarray(v, dtype=float) for v in (p, e1, e2))
    base = np.linalg.norm(e1 - e2)
    if base < 1e-12:
        raise ValueError("line anchors coincide")
    return float(np.linalg.norm(np.cross(p - e1, p - e2)) / base)


def point_to_plane(p, r1, r2, r3):
    """Distance from p to the plane through r1, r2 and r3."""
    p, r1, r2, r3 = (np.asarray(v, dtype=float) for v in (p, r1, r2, r3))
    n = np.cross(r1 - r2, r1 - r3)
    norm = np.linalg.norm(n)
    if norm < 1e-12:
        raise ValueError("plane anchors are collinear")
    return float(abs((p - r1) @ n) / norm)


class CorrKind(str, Enum):
    EDGE = "edge"
    PLANAR = "planar"


@dataclass
class Correspondence:
    kind: CorrKind
    query: np.ndarray
    anchors: np.ndarray
    local: np.ndarray = None

    def __post_init__(self):
        self.query = np.asarray(self.query, dtype=float)
        self.anchors = np.asarray(self.anchors, dtype=float)
        expected = 2 if self.kind == CorrKind.EDGE else 3
        if self.anchors.shape != (expected, 3):
            raise ValueError(f"{self.kind.value} correspondence needs {expected} anchors")

    @property
    def distance(self):
        if self.kind == CorrKind.EDGE:
            return point_to_line(self.query, *self.anchors)
        return point_to_plane(self.query, *self.anchors)

    def geometry(self):
        """(anchor point, unit direction or normal)."""
        a = self.anchors
        if self.kind == CorrKind.EDGE:
            d = a[1] - a[0]
            return a[0], d / np.linalg.norm(d)
        n = np.cross(a[0] - a[1], a[0] - a[2])
        return a[0], n / np.linalg.norm(n)


@dataclass(frozen=True)
class FavorFactors:
    xi_f: int = 1
    xi_d: int = 1
    xi_p: float = 1.0

    def __post_init__(self):
        if self.xi_f not in XI_F_VALUES:
            raise ValueError(f"xi_f must be one of {XI_F_VALUES}")
        if self.xi_d not in XI_D_VALUES:
            raise ValueError(f"xi_d must be one of {XI_D_VALUES}")
        if not self.xi_p > 0:
            raise ValueError("xi_p must be positive")

    @property
    def weight(self):
        return 1.0 / (self.xi_f * self.xi_d * self.xi_p)

    def to_dict(self):
        return {"xi_f": self.xi_f, "xi_d": self.xi_d, "xi_p": self.xi_p}


class LocalMap:
    """World-frame features of recent keyframes with one KD-tree per class."""

    def __init__(self, edges=None, planars=None):
        self.edges = np.zeros((0, 3)) if edges is None else np.asarray(edges, dtype=float).reshape(-1, 3)
        self.planars = np.zeros((0, 3)) if planars is None else np.asarray(planars, dtype=float).reshape(-1, 3)
        self.edge_tree = cKDTree(self.edges) if len(self.edges) else None
        self.planar_tree = cKDTree(self.planars) if len(self.planars) else None

    @classmethod
    def from_keyframes(cls, entries):
        """``entries`` are (world-frame FeatureCloud, ...) already transformed."""
        edges = [fc.edges for fc in entries if fc.n_edge]
        planars = [fc.planars for fc in entries if fc.n_planar]
        return cls(np.vstack(edges) if edges else None, np.vstack(planars) if planars else None)

    def __len__(self):
        return len(self.edges) + len(self.planars)


def _skew_batch(v):
    out = np.zeros((len(v), 3, 3))
    out[:, 0, 1], out[:, 0, 2] = -v[:, 2], v[:, 1]
    out[:, 1, 0], out[:, 1, 2] = v[:, 2], -v[:, 0]
    out[:, 2, 0], out[:, 2, 1] = -v[:, 1], v[:, 0]
    return out


def _edge_anchors(nbrs):
    """Two points on the principal line of each neighbourhood at its extreme projections."""
    centroid = nbrs.mean(axis=1)
    X = nbrs - centroid[:, None, :]
    _, sv, vt = np.linalg.svd(X, full_matrices=False)
    d = vt[:, 0, :]
    s = np.einsum("nkj,nj->nk", X, d)
    lo, hi = s.min(axis=1), s.max(axis=1)
    valid = (sv[:, 0] > 1e-9) & (sv[:, 1] <= sv[:, 0] / math.sqrt(3.0)) & (hi - lo > 1e-6)
    anchors = np.stack([centroid + lo[:, None] * d, centroid + hi[:, None] * d], axis=1)
    return anchors, valid


def _planar_anchors(nbrs, max_dev=0.2):
    """Three widest-spread neighbours projected onto the fitted plane."""
    centroid = nbrs.mean(axis=1)
    X = nbrs - centroid[:, None, :]
    _, _, vt = np.linalg.svd(X, full_matrices=False)
    n = vt[:, 2, :]
    flat = np.abs(np.einsum("nkj,nj->nk", X, n)).max(axis=1) <= max_dev
    tris = nbrs[:, np.array(list(combinations(range(nbrs.shape[1]), 3)))]
    area = np.linalg.norm(np.cross(tris[:, :, 1] - tris[:, :, 0], tris[:, :, 2] - tris[:, :, 0]), axis=2)
    best = area.argmax(axis=1)
    pts = tris[np.arange(len(nbrs)), best]
    offset = np.einsum("nkj,nj->nk", pts - centroid[:, None, :], n)
    pts = pts - offset[:, :, None] * n[:, None, :]
    valid = flat & (area[np.arange(len(nbrs)), best] > 1e-6)
    return pts, valid


@dataclass
class MatchSet:
    """Vectorized correspondences of one class: body-frame points, anchor point, direction or normal."""
    kind: CorrKind
    local: np.ndarray
    world: np.ndarray
    anchors: np.ndarray
    a: np.ndarray
    u: np.ndarray

    def __len__(self):
        return len(self.local)

    def to_list(self):
        return [Correspondence(self.kind, self.world[i], self.anchors[i], self.local[i])
                for i in range(len(self))]


def _match(kind, pts, tree, ref, to_world, extrinsic, knn, max_dist):
    if tree is None or len(pts) == 0 or len(ref) < knn:
        return None
    world = to_world.apply(pts)
    dist, idx = tree.query(world, k=knn)
    keep = dist[:, -1] <= max_dist
    if not keep.any():
        return None
    nbrs = ref[idx[keep]]
    if kind == CorrKind.EDGE:
        anchors, valid = _edge_anchors(nbrs)
        d = anchors[:, 1] - anchors[:, 0]
        u = d / np.maximum(np.linalg.norm(d, axis=1), 1e-12)[:, None]
    else:
        anchors, valid = _planar_anchors(nbrs)
        nrm = np.cross(anchors[:, 0] - anchors[:, 1], anchors[:, 0] - anchors[:, 2])
        u = nrm / np.maximum(np.linalg.norm(nrm, axis=1), 1e-12)[:, None]
    if not valid.any():
        return None
    local = extrinsic.apply(pts[keep][valid])
    return MatchSet(kind, local, world[keep][valid], anchors[valid], anchors[valid][:, 0], u[valid])


def match_features(features, local_map, pose_guess, extrinsic=None, knn=5, max_dist=1.0):
    """MatchSets (edge, planar) of ``features`` placed at ``pose_guess``; missing classes are skipped."""
    extrinsic = extrinsic or Pose.identity()
    to_world = pose_guess * extrinsic
    sets = (_match(CorrKind.EDGE, features.edges, local_map.edge_tree, local_map.edges,
                   to_world, extrinsic, knn, max_dist),
            _match(CorrKind.PLANAR, features.planars, local_map.planar_tree, local_map.planars,
                   to_world, extrinsic, knn, max_dist))
    return [s for s in sets if s is not None]


def find_correspondences(features, local_map, pose_guess, extrinsic=None, knn=5, max_dist=1.0):
    """Edge and planar correspondences of ``features`` placed at ``pose_guess``."""
    out = []
    for s in match_features(features, local_map, pose_guess, extrinsic, knn, max_dist):
        out += s.to_list()
    return out


def lidar_residual(corrs):
    """Sum of squared point-to-line and point-to-plane distances."""
    return float(sum(c.distance ** 2 for c in corrs))


def degeneracy_factor(H, e_lambda):
    """(smallest eigenvalue of H, 10 if it is at most e_lambda else 1)."""
    H = np.asarray(H, dtype=float)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError("information matrix must be square")
    if not np.allclose(H, H.T, rtol=1e-9, atol=1e-9 * max(1.0, np.abs(H).max())):
        raise ValueError("information matrix must be symmetric")
    lam = float(np.linalg.eigvalsh(H)[0])
    return lam, 10 if lam <= e_lambda else 1


def pose_factor_raw(p_imu_incr, p_lidar_incr):
    n_imu = float(np.linalg.norm(p_imu_incr))
    if n_imu <= MIN_IMU_INCREMENT:
        return 1.0
    return float(np.linalg.norm(p_lidar_incr)) / n_imu


def pose_factor(p_imu_incr, p_lidar_incr):
    """Symmetrized increment ratio max(r, 1/r); 1 when the IMU increment is negligible."""
    ratio = pose_factor_raw(p_imu_incr, p_lidar_incr)
    ratio = max(ratio, 1.0 / XI_P_MAX)
    return min(max(ratio, 1.0 / ratio), XI_P_MAX)


def fused_residual(r_up, factors_up, r_down, factors_down):
    return r_up * factors_up.weight + r_down * factors_down.weight


def calibrate_e_lambda(good, degenerate):
    """Midpoint of the margin between well-conditioned and degenerate lambda_min samples."""
    good = np.asarray(list(good), dtype=float)
    degenerate = np.asarray(list(degenerate), dtype=float)
    if len(good) == 0 or len(degenerate) == 0:
        raise ValueError("calibration needs both well-conditioned and degenerate samples")
    hi_deg = float(np.percentile(degenerate, 95))
    lo_good = float(np.percentile(good, 5))
    if hi_deg >= lo_good:
        log.warning("lambda distributions overlap", degenerate_p95=hi_deg, good_p5=lo_good)
    return 0.5 * (hi_deg + lo_good)


def _linearize(sets, pose, huber):
    """Normal equations (H, g) and robust cost of matched features at ``pose``."""
    H = np.zeros((6, 6))
    g = np.zeros(6)
    cost = 0.0
    R = pose.rotation.matrix()
    for s in sets:
        q = s.local @ R.T + pose.translation
        M = -np.einsum("ij,njk->nik", R, _skew_batch(s.local))
        diff = q - s.a
        if s.kind == CorrKind.EDGE:
            P = np.eye(3)[None] - np.einsum("ni,nj->nij", s.u, s.u)
            r = np.einsum("nij,nj->ni", P, diff)
            J = np.concatenate([P, np.einsum("nij,njk->nik", P, M)], axis=2)
            dist = np.linalg.norm(r, axis=1)
        else:
            r = np.einsum("ni,ni->n", s.u, diff)[:, None]
            J = np.concatenate([s.u, np.einsum("ni,nij->nj", s.u, M)], axis=1)[:, None, :]
            dist = np.abs(r[:, 0])
        if huber > 0:
            w = np.where(dist <= huber, 1.0, huber / np.maximum(dist, 1e-12))
            cost += float(np.where(dist <= huber, dist ** 2, 2 * huber * dist - huber ** 2).sum())
        else:
            w = np.ones_like(dist)
            cost += float((dist ** 2).sum())
        H += np.einsum("n,nki,nkj->ij", w, J, J)
        g += np.einsum("n,nki,nk->i", w, J, r)
    return H, g, cost


def _apply(pose, dx):
    return Pose(pose.rotation * so3_exp(dx[3:]), pose.translation + dx[:3])


@dataclass
class ScanMatchResult:
    pose: Pose
    H: np.ndarray
    converged: bool
    iterations: int
    cost: float = 0.0
    n_corr: int = 0
    factors: dict = field(default_factory=dict)
    lambda_min: dict = field(default_factory=dict)
    xi_p_raw: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "cost": self.cost,
            "n_corr": self.n_corr,
            "lambda_min": self.lambda_min,
            "xi_p_raw": self.xi_p_raw,
            **{f"factors_{k}": v.to_dict() for k, v in self.factors.items()},
        }


class ScanMatcher:
    """Weighted Gauss-Newton over the body pose against a LocalMap."""

    def __init__(self, cfg=None, extrinsics=None):
        self.cfg = cfg or FrontendConfig()
        self.extrinsics = extrinsics or {LidarId.UP: Pose.identity(), LidarId.DOWN: Pose.identity()}

    def _sets(self, features, local_map, pose):
        return match_features(features, local_map, pose, self.extrinsics[features.lidar_id],
                                    self.cfg.knn, self.cfg.max_nn_dist)

    def solve(self, clouds, local_map, init, weights=None):
        """Gauss-Newton with correspondences re-found every iteration.

        ``clouds`` is a list of FeatureCloud; ``weights`` maps lidar id to a
        scalar weight on its residual (default 1).
        """
        cfg = self.cfg
        weights = weights or {}
        pose = init
        converged = False
        it = 0
        H = np.zeros((6, 6))
        cost = 0.0
        n_corr = 0
        for it in range(1, cfg.max_iterations + 1):
            H = np.zeros((6, 6))
            g = np.zeros(6)
            cost = 0.0
            n_corr = 0
            for fc in clouds:
                sets = self._sets(fc, local_map, pose)
                n_corr += sum(len(s) for s in sets)
                if not sets:
                    continue
                w = weights.get(fc.lidar_id, 1.0)
                Hi, gi, ci = _linearize(sets, pose, cfg.huber_delta)
                H += w * Hi
                g += w * gi
                cost += w * ci
            if n_corr < 6:
                break
            dx = -np.linalg.solve(H + 1e-9 * np.eye(6), g)
            pose = _apply(pose, dx)
            if np.linalg.norm(dx) < cfg.step_tol:
                converged = True
                break
        log.debug("scan match finished", iterations=it, converged=converged, n_corr=n_corr, cost=cost)
        return pose, 0.5 * (H + H.T), converged, it, cost, n_corr

    def match(self, up, down, local_map, init, prev_position, xi_f):
        """Per-LiDAR solves set the degeneracy and pose factors, then the fused solve runs.

        ``xi_f`` maps lidar id to its failure factor; ``prev_position`` is the
        body position of the previous frame, the base of both increments.
        """
        factors, lambdas, raws = {}, {}, {}
        imu_incr = init.translation - prev_position
        clouds = [fc for fc in (up, down) if fc is not None]
        for fc in clouds:
            pose_i, H_i, _, _, _, _ = self.solve([fc], local_map, init)
            lam, xi_d = degeneracy_factor(H_i, self.cfg.e_lambda)
            lidar_incr = pose_i.translation - prev_position
            raw = pose_factor_raw(imu_incr, lidar_incr)
            factors[fc.lidar_id.value] = FavorFactors(xi_f[fc.lidar_id], xi_d, pose_factor(imu_incr, lidar_incr))
            lambdas[fc.lidar_id.value] = lam
            raws[fc.lidar_id.value] = raw
        weights = {fc.lidar_id: factors[fc.lidar_id.value].weight for fc in clouds}
        pose, H, converged, it, cost, n_corr = self.solve(clouds, local_map, init, weights)
        result = ScanMatchResult(pose, H, converged, it, cost, n_corr, factors, lambdas, raws)
        log.debug("frame matched", converged=converged, iterations=it, n_corr=n_corr, lambda_min=lambdas)
        return result
