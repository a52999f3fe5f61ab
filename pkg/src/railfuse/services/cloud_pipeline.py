"""Scan denoising, de-skew and curvature feature extraction.

Every filter returns a subset of its input in the original order; the point
order is the sensor sampling order, which the curvature step relies on.
"""
import math

import numpy as np
import structlog
from scipy.ndimage import uniform_filter1d
from scipy.spatial import cKDTree

from ..tools.config import FilterConfig
from ..tools.geom import Pose, Quat, slerp_many
from ..tools.scan import FeatureCloud

log = structlog.get_logger(__name__)


def remove_close_points(scan, r_min):
    """Keep returns with range >= r_min."""
    if not r_min > 0:
        raise ValueError("r_min must be positive")
    return scan.subset(scan.ranges >= r_min)


def grid_outlier_filter(scan, cell, min_count):
    """Drop every point of a voxel that holds fewer than min_count returns."""
    if not cell > 0:
        raise ValueError("cell must be positive")
    if len(scan) == 0:
        return scan
    keys = np.floor(scan.xyz / cell).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    return scan.subset(counts[inverse.reshape(-1)] >= min_count)


def hidden_sector_mask(xyz, phi, d):
    """True for points inside the hidden sector behind some other point.

    The sector of a point P is the cone with apex P, axis along the
    sensor-to-P ray, half-angle phi and radius d.
    """
    n = len(xyz)
    hidden = np.zeros(n, dtype=bool)
    if n < 2:
        return hidden
    pairs = cKDTree(xyz).query_pairs(d, output_type="ndarray")
    if len(pairs) == 0:
        return hidden
    norms = np.linalg.norm(xyz, axis=1)
    axis = xyz / np.maximum(norms, 1e-12)[:, None]
    cos_phi = math.cos(phi)
    for src, dst in ((pairs[:, 0], pairs[:, 1]), (pairs[:, 1], pairs[:, 0])):
        diff = xyz[dst] - xyz[src]
        dist = np.linalg.norm(diff, axis=1)
        ok = dist > 1e-12
        cos = np.einsum("ij,ij->i", diff[ok], axis[src[ok]]) / dist[ok]
        hidden[dst[ok][cos >= cos_phi]] = True
    return hidden


def hidden_sector_filter(scan, phi, d):
    if not 0.0 < phi < math.pi / 2:
        raise ValueError("phi must lie in (0, pi/2)")
    if not d > 0:
        raise ValueError("d must be positive")
    return scan.subset(~hidden_sector_mask(scan.xyz, phi, d))


def deskew(scan, delta, extrinsic=None, translation=None):
    """Move every point into the sensor frame at frame end.

    The body motion over the frame is ``delta`` (rotation gamma, translation
    phi unless ``translation`` overrides it), interpolated linearly in
    translation and spherically in rotation at each point's t_offset.
    ``extrinsic`` is the sensor pose in the body frame.
    """
    span = delta.dt_total
    t = scan.t_offset
    if len(t) and (t.min() < -1e-9 or t.max() > span + 1e-9):
        raise ValueError(f"t_offset outside the preintegrated span [0, {span:.4f}] s")
    if len(scan) == 0:
        return scan
    extrinsic = extrinsic or Pose.identity()
    t_end = np.asarray(delta.phi if translation is None else translation, dtype=float)
    s = t / span if span > 0 else np.ones_like(t)

    R_bl = extrinsic.rotation.matrix()
    p_b = scan.xyz @ R_bl.T + extrinsic.translation
    Rs = slerp_many(Quat.identity(), delta.gamma, s)
    p_start = np.einsum("nij,nj->ni", Rs, p_b) + s[:, None] * t_end
    R_end = delta.gamma.matrix()
    p_end_b = (p_start - t_end) @ R_end
    p_end = (p_end_b - extrinsic.translation) @ R_bl
    return scan.with_xyz(p_end)


def curvature(xyz, half_window):
    """Smoothness along sampling order; NaN where the window does not fit."""
    n = len(xyz)
    k = half_window
    c = np.full(n, np.nan)
    if n < 2 * k + 1:
        return c
    window = 2 * k + 1
    sums = uniform_filter1d(xyz, size=window, axis=0, mode="constant") * window
    diff = sums - window * xyz
    norms = np.linalg.norm(xyz, axis=1)
    valid = slice(k, n - k)
    c[valid] = np.linalg.norm(diff[valid], axis=1) / (2 * k * np.maximum(norms[valid], 1e-9))
    return c


def _pick(order, c, passes, cap, k, taken):
    picked = []
    for i in order:
        if len(picked) >= cap:
            break
        if taken[i] or not passes(c[i]):
            continue
        picked.append(i)
        taken[max(i - k, 0):i + k + 1] = True
    return picked


def extract_features(scan, cfg=None, e_eps=None, e_rho=None):
    """Edge (high curvature) and planar (low curvature) features with per-sector caps."""
    cfg = cfg or FilterConfig()
    e_eps = cfg.e_eps if e_eps is None else e_eps
    e_rho = cfg.e_rho if e_rho is None else e_rho
    if len(scan) == 0:
        return FeatureCloud.empty(scan.lidar_id, scan.frame_time)
    xyz = scan.xyz
    k = cfg.curvature_half_window
    c = curvature(xyz, k)
    idx = np.flatnonzero(np.isfinite(c))
    if len(idx) == 0:
        return FeatureCloud.empty(scan.lidar_id, scan.frame_time)

    edge_cap = max(int(math.ceil(2 * e_eps / cfg.sectors)), 1)
    planar_cap = max(int(math.ceil(4 * e_rho / cfg.sectors)), 1)
    edge_taken = np.zeros(len(xyz), dtype=bool)
    planar_taken = np.zeros(len(xyz), dtype=bool)
    edges, planars = [], []
    for sector in np.array_split(idx, cfg.sectors):
        if len(sector) == 0:
            continue
        # stable sorts keep the result a pure function of input order
        by_desc = sector[np.argsort(-c[sector], kind="stable")]
        edges += _pick(by_desc, c, lambda v: v > cfg.curvature_edge_thresh, edge_cap, k, edge_taken)
        by_asc = sector[np.argsort(c[sector], kind="stable")]
        planar_taken |= edge_taken
        planars += _pick(by_asc, c, lambda v: v < cfg.curvature_planar_thresh, planar_cap, k, planar_taken)

    edges = np.sort(np.asarray(edges, dtype=int))
    planars = np.sort(np.asarray(planars, dtype=int))
    labels = None if scan.labels is None else scan.labels[edges]
    return FeatureCloud(xyz[edges], xyz[planars], scan.lidar_id, scan.frame_time, edge_labels=labels)


def failure_factor(n_edge, n_planar, e_eps, e_rho):
    """1 when both feature counts clear their thresholds, 100 when neither does, 50 otherwise."""
    if n_edge > e_eps and n_planar > e_rho:
        return 1
    if n_edge < e_eps and n_planar < e_rho:
        return 100
    return 50


def calibrate_failure_thresholds(clouds):
    """Thresholds at 10% of the mean feature counts over feature-rich scenes."""
    clouds = list(clouds)
    if not clouds:
        raise ValueError("no calibration clouds given")
    e_eps = 0.1 * float(np.mean([c.n_edge for c in clouds]))
    e_rho = 0.1 * float(np.mean([c.n_planar for c in clouds]))
    log.info("failure thresholds calibrated", e_eps=e_eps, e_rho=e_rho, scenes=len(clouds))
    return e_eps, e_rho


class CloudPipeline:
    """Denoise, de-skew and extract features for one LiDAR."""

    def __init__(self, cfg, extrinsic):
        self.cfg = cfg
        self.extrinsic = extrinsic
        log.info("CloudPipeline initialized", r_min=cfg.r_min, grid_cell=cfg.grid_cell,
                 phi=cfg.hidden_angle_phi, d=cfg.hidden_radius_d)

    def denoise(self, scan):
        cfg = self.cfg
        n_in = len(scan)
        scan = remove_close_points(scan, cfg.r_min)
        scan = grid_outlier_filter(scan, cfg.grid_cell, cfg.grid_min_count)
        scan = hidden_sector_filter(scan, cfg.hidden_angle_phi, cfg.hidden_radius_d)
        log.debug("scan denoised", lidar=scan.lidar_id.value, n_in=n_in, n_out=len(scan))
        return scan

    def process(self, scan, delta, translation=None):
        """Return (features, de-skewed clean scan, failure factor)."""
        clean = deskew(self.denoise(scan), delta, self.extrinsic, translation)
        features = extract_features(clean, self.cfg)
        xi_f = failure_factor(features.n_edge, features.n_planar, self.cfg.e_eps, self.cfg.e_rho)
        log.debug("features extracted", lidar=scan.lidar_id.value, n_edge=features.n_edge,
                  n_planar=features.n_planar, xi_f=xi_f)
        return features, clean, xi_f
