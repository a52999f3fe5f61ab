"""Two-stage mapping: 10-keyframe submaps, scan-to-submap ICP fallback and
submap-to-submap NDT registration, both started from GNSS-derived poses."""
from dataclasses import dataclass

import numpy as np
import structlog
from scipy.spatial import cKDTree

from ..tools.config import MapConfig
from ..tools.exceptions import ExportError, RegistrationRejected
from ..tools.geom import Pose, Rot3, skew, so3_exp
from ..tools.sys_op import format_manifest_line, write_manifest, write_ply

log = structlog.get_logger(__name__)

NDT_MIN_POINTS = 5
NDT_COV_FLOOR = 1e-3
STRUCTURE_MIN_STD = 0.05


def voxel_downsample(points, intensity, voxel):
    """Centroid per occupied voxel, ordered by first occurrence."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    intensity = np.asarray(intensity, dtype=float).reshape(-1)
    if len(points) == 0 or voxel <= 0:
        return points, intensity
    keys = np.floor(points / voxel).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    counts = np.bincount(inverse)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, points)
    isum = np.bincount(inverse, weights=intensity)
    order = np.argsort(first, kind="stable")
    return (sums / counts[:, None])[order], (isum / counts)[order]


@dataclass
class VoxelStats:
    count: np.ndarray
    total: np.ndarray
    outer: np.ndarray

    def means(self):
        return self.total / self.count[:, None]

    def covariances(self):
        mu = self.means()
        cov = self.outer / self.count[:, None, None] - np.einsum("ni,nj->nij", mu, mu)
        return 0.5 * (cov + np.transpose(cov, (0, 2, 1)))


class Submap:
    """Keyframe clouds merged in the frame of the first keyframe."""

    def __init__(self, submap_id, size, voxel):
        self.id = submap_id
        self.size = size
        self.voxel = voxel
        self.keyframe_ids = []
        self.t_first = None
        self.anchor = None
        self.points = np.zeros((0, 3))
        self.intensity = np.zeros(0)
        self.degenerate = False
        self._stats = {}

    @property
    def sealed(self):
        return len(self.keyframe_ids) >= self.size

    def __len__(self):
        return len(self.points)

    def push_keyframe(self, keyframe_id, cloud, pose, intensity=None, t=0.0):
        """Merge a body-frame cloud observed at world ``pose``; returns the sealed flag."""
        if self.sealed:
            raise ValueError(f"submap {self.id} is sealed")
        if not pose.is_finite():
            raise ValueError("keyframe pose is not finite")
        if self.anchor is None:
            self.anchor = pose
            self.t_first = t
        cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
        intensity = np.zeros(len(cloud)) if intensity is None else np.asarray(intensity, dtype=float)
        local = (self.anchor.inverse() * pose).apply(cloud) if len(cloud) else cloud
        self.keyframe_ids.append(keyframe_id)
        if len(local):
            self.points = np.vstack([self.points, local])
            self.intensity = np.concatenate([self.intensity, intensity])
            self._accumulate(local)
        return self.sealed

    def _accumulate(self, local):
        keys = np.floor(local / self.voxel).astype(np.int64)
        uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        count = np.bincount(inverse)
        total = np.zeros((len(uniq), 3))
        np.add.at(total, inverse, local)
        outer = np.zeros((len(uniq), 3, 3))
        np.add.at(outer, inverse, np.einsum("ni,nj->nij", local, local))
        for k, key in enumerate(map(tuple, uniq)):
            if key in self._stats:
                c, s, o = self._stats[key]
                self._stats[key] = (c + count[k], s + total[k], o + outer[k])
            else:
                self._stats[key] = (count[k], total[k], outer[k])

    def stats(self, min_points=NDT_MIN_POINTS):
        """Per-voxel statistics for voxels with at least ``min_points`` returns, deterministic order."""
        keys = sorted(k for k, v in self._stats.items() if v[0] >= min_points)
        if not keys:
            return VoxelStats(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3, 3)))
        return VoxelStats(np.array([self._stats[k][0] for k in keys], dtype=float),
                          np.array([self._stats[k][1] for k in keys]),
                          np.array([self._stats[k][2] for k in keys]))

    def world_points(self):
        return self.anchor.apply(self.points) if len(self.points) else self.points


# --- ICP ---

def _kabsch(src, dst):
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    U, _, Vt = np.linalg.svd((src - mu_s).T @ (dst - mu_d))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return R, mu_d - R @ mu_s


def _is_structureless(cloud):
    if len(cloud) < 10:
        return True
    std = np.sqrt(np.clip(np.linalg.eigvalsh(np.cov(cloud.T)), 0.0, None))
    return std[0] < STRUCTURE_MIN_STD


def gnss_assisted_icp(cloud, submap, gnss_init, cfg=None):
    """Point-to-point trimmed ICP of a body-frame cloud against a submap.

    Returns the world pose of the cloud; raises RegistrationRejected when the
    final trimmed RMS exceeds the bound or the cloud has no 3D structure.
    """
    cfg = cfg or MapConfig()
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
    if _is_structureless(cloud) or len(submap) < 10:
        raise RegistrationRejected(float("inf"), cfg.icp_reject_rms)
    tree = cKDTree(submap.points)
    T = (submap.anchor.inverse() * gnss_init).matrix()
    rms = float("inf")
    n_keep = max(int(cfg.icp_trim * len(cloud)), 3)
    for it in range(cfg.icp_iterations):
        moved = cloud @ T[:3, :3].T + T[:3, 3]
        dist, idx = tree.query(moved)
        keep = np.argsort(dist, kind="stable")[:n_keep]
        rms = float(np.sqrt(np.mean(dist[keep] ** 2)))
        R, t = _kabsch(moved[keep], submap.points[idx[keep]])
        step = np.eye(4)
        step[:3, :3], step[:3, 3] = R, t
        T = step @ T
        if np.linalg.norm(t) < cfg.icp_tolerance and np.linalg.norm(R - np.eye(3)) < cfg.icp_tolerance:
            break
    moved = cloud @ T[:3, :3].T + T[:3, 3]
    dist, _ = tree.query(moved)
    rms = float(np.sqrt(np.mean(np.sort(dist)[:n_keep] ** 2)))
    if rms > cfg.icp_reject_rms:
        log.warning("ICP registration rejected", rms=rms, bound=cfg.icp_reject_rms, submap=submap.id)
        raise RegistrationRejected(rms, cfg.icp_reject_rms)
    log.debug("ICP converged", rms=rms, iterations=it + 1, submap=submap.id)
    return submap.anchor * Pose.from_matrix(T)


# --- NDT ---

@dataclass
class NdtResult:
    pose: Pose
    score: float
    initial_score: float
    iterations: int
    matched: int
    degenerate: bool = False

    def to_dict(self):
        return {"score": self.score, "initial_score": self.initial_score, "iterations": self.iterations,
                "matched": self.matched, "degenerate": self.degenerate}


def _regularize(covs):
    lam, U = np.linalg.eigh(covs)
    lam = np.maximum(lam, NDT_COV_FLOOR)
    return np.einsum("nij,nj,nkj->nik", U, lam, U)


class _NdtTarget:
    def __init__(self, means, covs, radius):
        self.means = means
        self.covs = covs
        self.radius = radius
        self.tree = cKDTree(means) if len(means) else None

    def terms(self, R, t, src_means, src_covs, with_derivatives=True):
        """Distribution-to-distribution score -sum exp(-d^T C d / 2), gradient and Hessian."""
        x = src_means @ R.T + t
        if self.tree is None or len(x) == 0:
            return 0.0, np.zeros(6), np.zeros((6, 6)), 0
        dist, idx = self.tree.query(x, distance_upper_bound=self.radius)
        ok = np.isfinite(dist)
        if not ok.any():
            return 0.0, np.zeros(6), np.zeros((6, 6)), 0
        x, idx = x[ok], idx[ok]
        d = x - self.means[idx]
        C = np.linalg.inv(np.einsum("ij,njk,lk->nil", R, src_covs[ok], R) + self.covs[idx])
        Cd = np.einsum("nij,nj->ni", C, d)
        e = np.exp(-0.5 * np.einsum("ni,ni->n", d, Cd))
        score = -float(e.sum())
        if not with_derivatives:
            return score, None, None, int(ok.sum())
        J = np.zeros((len(x), 3, 6))
        J[:, :, :3] = np.eye(3)
        J[:, :, 3:] = -np.stack([skew(p) for p in x])
        JtCd = np.einsum("nij,ni->nj", J, Cd)
        grad = np.einsum("n,nj->j", e, JtCd)
        JtCJ = np.einsum("nia,nij,njb->nab", J, C, J)
        H = np.einsum("n,nab->ab", e, JtCJ - np.einsum("na,nb->nab", JtCd, JtCd))
        lam = np.linalg.eigvalsh(H)
        if lam.min() <= 1e-9 * max(abs(lam.max()), 1e-12):
            H = np.einsum("n,nab->ab", e, JtCJ)
        return score, grad, H, int(ok.sum())


def register_submaps(sub_a, sub_b, gnss_init, cfg=None):
    """NDT of sub_b onto sub_a from the GNSS-derived world anchor of sub_b.

    Returns an NdtResult whose pose is the refined world anchor of sub_b.
    With no usable overlap, or a score that never drops below its value at
    ``gnss_init``, the GNSS anchor is kept and the result flagged.
    """
    cfg = cfg or MapConfig()
    sa, sb = sub_a.stats(), sub_b.stats()
    target = _NdtTarget(sa.means(), _regularize(sa.covariances()) if len(sa.count) else np.zeros((0, 3, 3)),
                        1.5 * cfg.ndt_voxel)
    src_means = sb.means()
    src_covs = _regularize(sb.covariances()) if len(sb.count) else np.zeros((0, 3, 3))
    T0 = (sub_a.anchor.inverse() * gnss_init).matrix()
    R, t = T0[:3, :3], T0[:3, 3]
    score, grad, H, matched = target.terms(R, t, src_means, src_covs)
    initial = score
    it = 0
    for it in range(1, cfg.ndt_iterations + 1):
        if matched < 3 or np.linalg.norm(grad) < 1e-12:
            break
        step = -np.linalg.solve(H + 1e-9 * np.eye(6), grad)
        improved = False
        for _ in range(8):
            dR = so3_exp(step[3:]).matrix()
            R_new, t_new = dR @ R, dR @ t + step[:3]
            new_score, _, _, new_matched = target.terms(R_new, t_new, src_means, src_covs, False)
            if new_matched >= 3 and new_score < score:
                improved = True
                break
            step = 0.5 * step
        if not improved:
            break
        R, t = R_new, t_new
        score, grad, H, matched = target.terms(R, t, src_means, src_covs)
        if np.linalg.norm(step) < 1e-6:
            break
    reason = None
    if matched < 3:
        reason = "too few matched voxels"
    elif not score < initial:
        reason = "score did not improve"
    else:
        lam = np.linalg.eigvalsh(target.terms(R, t, src_means, src_covs)[2])
        if lam.min() <= 1e-6 * max(lam.max(), 1e-12):
            reason = "ill-conditioned hessian"
    degenerate = reason is not None
    if degenerate:
        log.warning("NDT degenerate, keeping GNSS anchor", submap_a=sub_a.id, submap_b=sub_b.id,
                    matched=matched, reason=reason)
        pose = gnss_init
    else:
        T = np.eye(4)
        T[:3, :3], T[:3, 3] = R, t
        pose = sub_a.anchor * Pose(Rot3(T[:3, :3]).to_quat(), T[:3, 3])
    return NdtResult(pose, score, initial, it, matched, degenerate)


# --- manager ---

class MapManager:
    """Active submap plus the sealed ones; seals every ``submap_size`` keyframes."""

    def __init__(self, cfg=None):
        self.cfg = cfg or MapConfig()
        self.submaps = []
        self.rejected = 0
        log.info("MapManager initialized", submap_size=self.cfg.submap_size, ndt_voxel=self.cfg.ndt_voxel,
                 register=self.cfg.register_submaps)

    @property
    def active(self):
        if not self.submaps or self.submaps[-1].sealed:
            self.submaps.append(Submap(len(self.submaps), self.cfg.submap_size, self.cfg.ndt_voxel))
        return self.submaps[-1]

    @property
    def sealed(self):
        return [s for s in self.submaps if s.sealed]

    def push(self, keyframe_id, cloud, pose, intensity=None, t=0.0):
        cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
        intensity = np.zeros(len(cloud)) if intensity is None else intensity
        cloud, intensity = voxel_downsample(cloud, intensity, self.cfg.map_voxel)
        submap = self.active
        if submap.push_keyframe(keyframe_id, cloud, pose, intensity, t):
            log.info("submap sealed", submap=submap.id, points=len(submap))
            self._register(submap)
        return submap

    def _register(self, submap):
        if not self.cfg.register_submaps or submap.id == 0:
            return None
        result = register_submaps(self.submaps[submap.id - 1], submap, submap.anchor, self.cfg)
        submap.anchor = result.pose
        submap.degenerate = result.degenerate
        log.info("submap registered", submap=submap.id, **result.to_dict())
        return result

    def relocalize(self, cloud, gnss_init):
        """Scan-to-submap fallback against the most recent submap holding points."""
        candidates = [s for s in reversed(self.submaps) if len(s)]
        if not candidates:
            raise RegistrationRejected(float("inf"), self.cfg.icp_reject_rms)
        try:
            return gnss_assisted_icp(cloud, candidates[0], gnss_init, self.cfg)
        except RegistrationRejected:
            self.rejected += 1
            raise

    def export_map(self, path, frame=None):
        return export_map(self.submaps, path, frame)

    def manifest_lines(self, frame=None):
        """Manifest entries; ``frame`` (a GnssExtrinsic) places anchors in W0."""
        return [format_manifest_line(s.id, s.t_first, frame.pose_to_w0(s.anchor) if frame else s.anchor,
                                     len(s), s.degenerate)
                for s in self.submaps if s.anchor is not None]


def export_map(submaps, path, frame=None):
    """Write every submap placed at its anchor as one binary PLY, optionally mapped into W0."""
    submaps = [s for s in submaps if s.anchor is not None]
    if not submaps:
        raise ExportError(path, "no submaps to export")
    points = np.vstack([s.world_points() for s in submaps])
    if frame is not None:
        points = frame.to_w0(points)
    intensity = np.concatenate([s.intensity for s in submaps])
    ids = np.concatenate([np.full(len(s), s.id, dtype=np.uint32) for s in submaps])
    return write_ply(path, points, intensity, ids)


def export_manifest(manager, path, frame=None):
    return write_manifest(path, manager.manifest_lines(frame))
