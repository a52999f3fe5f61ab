"""Sliding-window factor graph over NavStates.

Every factor returns a whitened residual and one Jacobian per referenced
node with respect to the 16-dim node tangent [p, v, theta, ba, bg, c].
The window solves with Levenberg-Marquardt and folds the oldest node into a
square-root information prior by Schur complement.
"""
from dataclasses import dataclass, field
import math
import time

import numpy as np
import structlog

from ..tools.config import (ALIGN_MIN_ARC, ALIGN_MIN_PAIRS, DAMPING_EPS, GNSS_PERIOD,
                            BackendConfig, FrontendConfig)
from ..tools.exceptions import UnobservableAlignment
from ..tools.geom import Pose, Rot3, right_jacobian_inv, skew, utm_from_wgs84
from .preintegration import (A, BA, BG, ERR_DIM, GRAVITY_W, TAN_DIM, TBA, TBG, TP, TT, TV,
                             BodyOdoExtrinsic, NavState, _correction, needs_reintegration,
                             preint_residual, reintegrate, residual_jacobians)
from .rail_geometry import plane_residual, shifted_descriptor_residual

log = structlog.get_logger(__name__)

LM_MAX_DAMPING_TRIES = 10
ODOMETER_ROWS = np.r_[0:15, 18]


# --- GNSS ---

@dataclass(frozen=True)
class GnssFix:
    """SPP fix already projected into the local UTM plane W0."""
    t: float
    position: np.ndarray
    covariance: np.ndarray
    quality: str = "SPP"

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        cov = np.asarray(self.covariance, dtype=float).reshape(3, 3)
        if not np.allclose(cov, cov.T) or np.linalg.eigvalsh(cov)[0] < -1e-12:
            raise ValueError("GNSS covariance must be symmetric PSD")
        object.__setattr__(self, "covariance", cov)


@dataclass(frozen=True)
class GnssExtrinsic:
    """Pure-yaw rotation and translation mapping the odometry frame W into W0."""
    yaw: float = 0.0
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float).reshape(3))

    @property
    def R(self):
        return Rot3.from_yaw(self.yaw).matrix

    def to_w0(self, p_w):
        return np.asarray(p_w, dtype=float) @ self.R.T + self.p

    def from_w0(self, p_w0):
        return (np.asarray(p_w0, dtype=float) - self.p) @ self.R

    def pose_to_w0(self, pose):
        return Pose(Rot3.from_yaw(self.yaw).to_quat(), self.p) * pose

    def to_dict(self):
        return {"yaw": self.yaw, "p": self.p.tolist()}


class GnssProjector:
    """Projects receiver readings into W0.

    The UTM zone is pinned by the origin (or the first reading when no origin
    is given) so a run crossing a zone boundary stays in one plane.
    """

    def __init__(self, origin=None):
        self.origin = None
        if origin is not None:
            lat, lon, alt = origin
            self.origin = utm_from_wgs84(lat, lon, alt)
            log.info("GNSS origin pinned", zone=self.origin.zone, easting=round(self.origin.easting, 3),
                     northing=round(self.origin.northing, 3))

    def project(self, reading):
        if self.origin is None:
            self.origin = utm_from_wgs84(reading.lat, reading.lon, reading.alt)
            log.info("GNSS origin taken from first fix", zone=self.origin.zone)
        point = utm_from_wgs84(reading.lat, reading.lon, reading.alt, zone=self.origin.zone)
        cov = np.diag([reading.sigma_h ** 2, reading.sigma_h ** 2, reading.sigma_v ** 2])
        return GnssFix(reading.t, point.local(self.origin), cov, reading.quality)


def _arc_length(points):
    points = np.asarray(points, dtype=float)
    if len(points) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(points, axis=0), axis=1).sum())


def align_gnss_extrinsic(P_w0, P_b, min_pairs=ALIGN_MIN_PAIRS, min_arc=ALIGN_MIN_ARC):
    """Yaw and translation with P_w0 ~ R(yaw) P_b + p from paired positions."""
    P_w0 = np.asarray(P_w0, dtype=float).reshape(-1, 3)
    P_b = np.asarray(P_b, dtype=float).reshape(-1, 3)
    if len(P_w0) != len(P_b):
        raise ValueError("position lists differ in length")
    if len(P_b) < min_pairs:
        raise UnobservableAlignment(f"{len(P_b)} pairs, need {min_pairs}")
    arc = _arc_length(P_b)
    if arc < min_arc:
        raise UnobservableAlignment(f"arc length {arc:.1f} m below {min_arc:.1f} m")
    a = P_b[:, :2] - P_b[:, :2].mean(axis=0)
    b = P_w0[:, :2] - P_w0[:, :2].mean(axis=0)
    if float((a * a).sum()) < 1e-9:
        raise UnobservableAlignment("zero horizontal baseline")
    cross = float((a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]).sum())
    dot = float((a * b).sum())
    yaw = math.atan2(cross, dot)
    R = Rot3.from_yaw(yaw).matrix
    p = (P_w0 - P_b @ R.T).mean(axis=0)
    log.info("GNSS extrinsic aligned", yaw_deg=math.degrees(yaw), p=p.tolist(), pairs=len(P_b), arc=arc)
    return GnssExtrinsic(yaw, p)


def _gnss_world_residual(fix, x_k, ext, delta, gravity, mode):
    """Residual expressed in W (rotated body residual) and the fix in W."""
    p_fix = ext.from_w0(fix.position)
    if mode == "plain":
        return p_fix - x_k.p
    dt = delta.dt_total
    alpha, _, _, _ = _correction(delta, x_k.ba - delta.lin_ba, x_k.bg - delta.lin_bg, 0.0)
    return p_fix - x_k.p - x_k.v * dt + 0.5 * gravity * dt * dt - x_k.R @ alpha


def gnss_residual(fix, x_k, ext, delta=None, gravity=GRAVITY_W, mode="verbatim", whiten=True):
    """Body-frame GNSS residual.

    ``verbatim``: the fix belongs to the end of ``delta`` and is compared with
    the position predicted from x_k through the preintegrated alpha.
    ``plain``: the fix belongs to x_k itself.
    """
    if mode == "verbatim" and delta is None:
        raise ValueError("verbatim GNSS residual needs the preintegrated delta")
    R_k = x_k.R
    r = R_k.T @ _gnss_world_residual(fix, x_k, ext, delta, gravity, mode)
    if not whiten:
        return r
    cov_b = R_k.T @ ext.R.T @ fix.covariance @ ext.R @ R_k
    L = np.linalg.cholesky(cov_b)
    return np.linalg.solve(L, r)


def gnss_insertion_policy(now, last_insert, est_cov=None, fix_cov=None, period=GNSS_PERIOD):
    """True for the first fix and whenever ``period`` seconds passed since the last insertion."""
    if last_insert is None:
        return True
    return now - last_insert >= period


# --- marginalization ---

def schur_marginalize(H, b, keep, marg):
    """Eliminate the ``marg`` indices from normal equations H dx = -b."""
    H = np.asarray(H, dtype=float)
    b = np.asarray(b, dtype=float)
    keep = np.asarray(keep, dtype=int)
    marg = np.asarray(marg, dtype=int)
    Hmm = 0.5 * (H[np.ix_(marg, marg)] + H[np.ix_(marg, marg)].T)
    lam, U = np.linalg.eigh(Hmm)
    if lam.min() < DAMPING_EPS:
        log.warning("damped inversion during marginalization", min_eigenvalue=float(lam.min()))
        lam = lam + DAMPING_EPS
    Hmm_inv = (U / lam) @ U.T
    Hkm = H[np.ix_(keep, marg)]
    H_new = H[np.ix_(keep, keep)] - Hkm @ Hmm_inv @ Hkm.T
    b_new = b[keep] - Hkm @ Hmm_inv @ b[marg]
    return 0.5 * (H_new + H_new.T), b_new


def sqrt_information(H, b, rel_eps=1e-12):
    """(J, r) with J^T J = H and J^T r = b on the numerically supported subspace."""
    lam, U = np.linalg.eigh(0.5 * (H + H.T))
    keep = lam > max(rel_eps * max(lam.max(), 0.0), 1e-14)
    s = np.sqrt(lam[keep])
    J = s[:, None] * U[:, keep].T
    r = (U[:, keep].T @ b) / s
    return J, r


# --- factors ---

class Factor:
    kind = "factor"
    huber = 0.0

    def __init__(self, nodes):
        self.nodes = tuple(nodes)

    def linearize(self, states):
        raise NotImplementedError

    def residual(self, states):
        return self.linearize(states)[0]


class PriorFactor(Factor):
    """r = r0 + J (x [-] x_lin) over one or more nodes at fixed linearization points."""
    kind = "prior"

    def __init__(self, nodes, J, r0, lin_states):
        super().__init__(nodes)
        self.J = np.asarray(J, dtype=float)
        self.r0 = np.asarray(r0, dtype=float)
        self.lin_states = dict(lin_states)

    @classmethod
    def diagonal(cls, node, state, sigmas):
        sigmas = np.asarray(sigmas, dtype=float)
        return cls([node], np.diag(1.0 / sigmas), np.zeros(TAN_DIM), {node: state})

    def linearize(self, states):
        dx = np.concatenate([states[n].boxminus(self.lin_states[n]) for n in self.nodes])
        e = self.r0 + self.J @ dx
        jac = {}
        for i, n in enumerate(self.nodes):
            D = np.eye(TAN_DIM)
            D[TT, TT] = right_jacobian_inv(dx[i * TAN_DIM:(i + 1) * TAN_DIM][TT])
            jac[n] = self.J[:, i * TAN_DIM:(i + 1) * TAN_DIM] @ D
        return e, jac

    @property
    def information(self):
        return self.J.T @ self.J


class PreintFactor(Factor):
    kind = "preint"

    def __init__(self, i, j, delta, ext=None, use_odometer=True, gravity=GRAVITY_W):
        super().__init__((i, j))
        self.ext = ext or BodyOdoExtrinsic()
        self.gravity = gravity
        self.rows = np.arange(ERR_DIM) if use_odometer else ODOMETER_ROWS
        self.set_delta(delta)

    def set_delta(self, delta):
        self.delta = delta
        P = delta.P[np.ix_(self.rows, self.rows)] + 1e-12 * np.eye(len(self.rows))
        self.L = np.linalg.cholesky(P)

    def refresh(self, states):
        """Re-integrate when the bias estimate left the first-order validity region."""
        x_i = states[self.nodes[0]]
        if needs_reintegration(self.delta, x_i.ba, x_i.bg):
            log.info("re-integrating preintegrated delta", nodes=self.nodes)
            self.set_delta(reintegrate(self.delta, self.ext, x_i.ba, x_i.bg, self.delta.lin_c))

    def linearize(self, states):
        i, j = self.nodes
        r = preint_residual(self.delta, states[i], states[j], self.gravity, self.ext)[self.rows]
        Ji, Jj = residual_jacobians(self.delta, states[i], states[j], self.gravity, self.ext)
        solve = lambda M: np.linalg.solve(self.L, M)
        return solve(r), {i: solve(Ji[self.rows]), j: solve(Jj[self.rows])}


def _info_sqrt(info):
    lam, U = np.linalg.eigh(0.5 * (info + info.T))
    return np.sqrt(np.clip(lam, 0.0, None))[:, None] * U.T


class LidarPoseFactor(Factor):
    """Quadratic expansion of the weighted scan-match cost around its optimum."""
    kind = "lidar"

    def __init__(self, node, pose, information):
        super().__init__((node,))
        self.pose = pose
        self.S = _info_sqrt(information)

    def linearize(self, states):
        x = states[self.nodes[0]]
        phi = (self.pose.rotation.inverse() * x.q).log()
        r = np.concatenate([x.p - self.pose.translation, phi])
        J = np.zeros((6, TAN_DIM))
        J[:, TP] = self.S[:, :3]
        J[:, TT] = self.S[:, 3:] @ right_jacobian_inv(phi)
        return self.S @ r, {self.nodes[0]: J}


class PlaneFactor(Factor):
    """Rail plane of node i carried into node j's LiDAR frame, compared with node j's plane."""
    kind = "plane"

    def __init__(self, i, j, m_i, m_j, T_BL, sigma):
        super().__init__((i, j))
        self.m_i = np.asarray(m_i, dtype=float)
        self.m_j = np.asarray(m_j, dtype=float)
        self.T_BL = T_BL
        self.sigma = sigma

    def relative(self, x_i, x_j):
        return self.T_BL.inverse() * x_j.pose.inverse() * x_i.pose * self.T_BL

    def linearize(self, states):
        i, j = self.nodes
        x_i, x_j = states[i], states[j]
        r = plane_residual(self.m_i, self.m_j, self.relative(x_i, x_j))
        R_bl = self.T_BL.rotation.matrix()
        t_bl = self.T_BL.translation
        R_i, R_j = x_i.R, x_j.R
        u = R_bl @ self.m_i[:3]
        w = R_i @ u
        g = -(x_i.p - x_j.p) + R_j @ t_bl
        Ji = np.zeros((4, TAN_DIM))
        Jj = np.zeros((4, TAN_DIM))
        Ji[:3, TT] = -R_bl.T @ R_j.T @ R_i @ skew(u)
        Jj[:3, TT] = R_bl.T @ skew(R_j.T @ w)
        Ji[3, TP] = -w
        Jj[3, TP] = w
        Ji[3, TT] = -g @ R_i @ skew(u)
        Jj[3, TT] = -w @ R_j @ skew(t_bl)
        s = 1.0 / self.sigma
        return r * s, {i: -Ji * s, j: -Jj * s}


class DescriptorFactor(Factor):
    """Height-descriptor agreement after shifting by the predicted longitudinal displacement."""
    kind = "descriptor"
    STEP = 1e-4

    def __init__(self, i, j, D_i, D_j, weight):
        super().__init__((i, j))
        self.D_i = D_i
        self.D_j = D_j
        self.scale = math.sqrt(weight) * D_i.n_rows

    def _value(self, p_i, R_i, p_j):
        disp = float((R_i.T @ (p_j - p_i))[0])
        r, _ = shifted_descriptor_residual(self.D_i, self.D_j, disp)
        return self.scale * r

    def linearize(self, states):
        i, j = self.nodes
        x_i, x_j = states[i], states[j]
        R_i = x_i.R
        e = np.array([self._value(x_i.p, R_i, x_j.p)])
        Ji = np.zeros((1, TAN_DIM))
        Jj = np.zeros((1, TAN_DIM))
        h = self.STEP
        for k in range(3):
            d = np.zeros(3)
            d[k] = h
            Ji[0, k] = (self._value(x_i.p + d, R_i, x_j.p) - self._value(x_i.p - d, R_i, x_j.p)) / (2 * h)
            Jj[0, k] = (self._value(x_i.p, R_i, x_j.p + d) - self._value(x_i.p, R_i, x_j.p - d)) / (2 * h)
            Rp = x_i.boxplus(np.r_[np.zeros(6), d, np.zeros(7)]).R
            Rm = x_i.boxplus(np.r_[np.zeros(6), -d, np.zeros(7)]).R
            Ji[0, 6 + k] = (self._value(x_i.p, Rp, x_j.p) - self._value(x_i.p, Rm, x_j.p)) / (2 * h)
        return e, {i: Ji, j: Jj}


class GnssFactor(Factor):
    """GNSS position factor whitened in W; Huber-robustified by the window."""
    kind = "gnss"

    def __init__(self, node, fix, ext_ref, delta=None, mode="verbatim", huber=2.0, gravity=GRAVITY_W):
        super().__init__((node,))
        self.fix = fix
        self.ext_ref = ext_ref
        self.delta = delta
        self.mode = mode
        self.huber = huber
        self.gravity = gravity

    def _sqrt_info(self):
        R = self.ext_ref().R
        L = np.linalg.cholesky(R.T @ self.fix.covariance @ R)
        return np.linalg.inv(L)

    def linearize(self, states):
        x = states[self.nodes[0]]
        ext = self.ext_ref()
        S = self._sqrt_info()
        r = _gnss_world_residual(self.fix, x, ext, self.delta, self.gravity, self.mode)
        J = np.zeros((3, TAN_DIM))
        J[:, TP] = -np.eye(3)
        if self.mode == "verbatim":
            dt = self.delta.dt_total
            alpha, _, _, _ = _correction(self.delta, x.ba - self.delta.lin_ba, x.bg - self.delta.lin_bg, 0.0)
            R = x.R
            J[:, TV] = -np.eye(3) * dt
            J[:, TT] = R @ skew(alpha)
            J[:, TBA] = -R @ self.delta.J[A, BA]
            J[:, TBG] = -R @ self.delta.J[A, BG]
        return S @ r, {self.nodes[0]: S @ J}


# --- window ---

@dataclass
class Node:
    id: int
    t: float
    state: NavState
    plane: object = None
    descriptor: object = None
    fix: GnssFix = None


@dataclass
class OptimizeReport:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    aborted: bool = False
    history: list = field(default_factory=list)
    elapsed_ms: float = 0.0

    def to_dict(self):
        return {
            "iterations": self.iterations,
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "aborted": self.aborted,
            "history": self.history,
            "elapsed_ms": self.elapsed_ms,
        }


def _robust(e, J, huber):
    s = float(np.linalg.norm(e))
    if huber > 0 and s > huber:
        w = math.sqrt(huber / s)
        return e * w, {k: v * w for k, v in J.items()}, 2 * huber * s - huber * huber
    return e, J, s * s


class SlidingWindow:
    def __init__(self, window_size):
        self.window_size = window_size
        self.nodes = {}
        self.factors = []

    def __len__(self):
        return len(self.nodes)

    def add_node(self, node):
        self.nodes[node.id] = node

    def add_factor(self, factor):
        missing = [n for n in factor.nodes if n not in self.nodes]
        if missing:
            raise ValueError(f"factor {factor.kind} references unknown nodes {missing}")
        self.factors.append(factor)

    def states(self):
        return {nid: node.state for nid, node in self.nodes.items()}

    def _evaluate(self, states, index, jacobians=True):
        rows_e, rows_J = [], []
        cost = 0.0
        by_kind = {}
        n = TAN_DIM * len(index)
        for f in self.factors:
            e, J = f.linearize(states)
            e, J, c = _robust(e, J, f.huber)
            cost += c
            by_kind[f.kind] = by_kind.get(f.kind, 0.0) + c
            if jacobians:
                block = np.zeros((len(e), n))
                for nid, Jn in J.items():
                    k = index[nid] * TAN_DIM
                    block[:, k:k + TAN_DIM] += Jn
                rows_e.append(e)
                rows_J.append(block)
        if not jacobians:
            return cost, by_kind, None, None
        return cost, by_kind, np.concatenate(rows_e), np.vstack(rows_J)

    def optimize(self, iterations, step_tol):
        t_start = time.perf_counter()
        index = {nid: i for i, nid in enumerate(self.nodes)}
        states = self.states()
        for f in self.factors:
            if isinstance(f, PreintFactor):
                f.refresh(states)
        report = OptimizeReport()
        if not self.factors:
            return report
        cost, by_kind, e, J = self._evaluate(states, index)
        report.initial_cost = report.final_cost = cost
        report.history.append(by_kind)
        if cost < 1e-18:
            return report
        H = J.T @ J
        mu = 1e-4 * max(float(np.diag(H).max()), 1e-9)
        for it in range(iterations):
            g = J.T @ e
            accepted = False
            for _ in range(LM_MAX_DAMPING_TRIES):
                try:
                    dx = -np.linalg.solve(H + mu * np.eye(len(H)), g)
                except np.linalg.LinAlgError:
                    mu *= 10.0
                    continue
                cand = {nid: states[nid].boxplus(dx[index[nid] * TAN_DIM:(index[nid] + 1) * TAN_DIM])
                        for nid in states}
                new_cost, _, _, _ = self._evaluate(cand, index, jacobians=False)
                if np.isfinite(new_cost) and new_cost <= cost:
                    accepted = True
                    break
                mu *= 10.0
            if not accepted:
                if it == 0:
                    report.aborted = True
                    log.warning("optimization aborted, keeping previous estimate", cost=cost)
                break
            states = cand
            mu = max(mu / 3.0, 1e-12)
            cost, by_kind, e, J = self._evaluate(states, index)
            H = J.T @ J
            report.iterations = it + 1
            report.history.append(by_kind)
            log.debug("LM iteration", iteration=it + 1, cost=cost, step=float(np.linalg.norm(dx)))
            if np.linalg.norm(dx) < step_tol:
                break
        report.final_cost = cost
        for nid, st in states.items():
            self.nodes[nid].state = st
        report.elapsed_ms = 1e3 * (time.perf_counter() - t_start)
        return report

    def marginalize_oldest(self):
        """Fold the oldest node into a prior on its neighbours; returns the removed Node."""
        oldest = next(iter(self.nodes))
        touching = [f for f in self.factors if oldest in f.nodes]
        others = [f for f in self.factors if oldest not in f.nodes]
        neighbours = sorted({n for f in touching for n in f.nodes if n != oldest})
        order = [oldest] + neighbours
        index = {nid: i for i, nid in enumerate(order)}
        states = self.states()
        n = TAN_DIM * len(order)
        H = np.zeros((n, n))
        b = np.zeros(n)
        for f in touching:
            e, J = f.linearize(states)
            e, J, _ = _robust(e, J, f.huber)
            block = np.zeros((len(e), n))
            for nid, Jn in J.items():
                k = index[nid] * TAN_DIM
                block[:, k:k + TAN_DIM] += Jn
            H += block.T @ block
            b += block.T @ e
        removed = self.nodes.pop(oldest)
        self.factors = others
        if neighbours:
            Hp, bp = schur_marginalize(H, b, np.arange(TAN_DIM, n), np.arange(TAN_DIM))
            Jp, rp = sqrt_information(Hp, bp)
            if len(rp):
                self.factors.append(PriorFactor(neighbours, Jp, rp, {nid: states[nid] for nid in neighbours}))
        log.debug("node marginalized", node=oldest, neighbours=neighbours, factors=len(touching))
        return removed


def is_keyframe(last_pose, pose, distance, angle):
    moved = float(np.linalg.norm(pose.translation - last_pose.translation))
    turned = last_pose.rotation.angle_to(pose.rotation)
    return moved > distance or turned > angle


# --- backend service ---

@dataclass(frozen=True)
class KeyframePayload:
    """Measurements attached to one new keyframe."""
    t: float
    state: NavState
    delta: object = None
    lidar_pose: Pose = None
    lidar_info: np.ndarray = None
    plane: object = None
    descriptor: object = None
    fix: GnssFix = None


@dataclass
class BackendUpdate:
    node: int
    report: OptimizeReport
    marginalized: list


INITIAL_SIGMAS = np.r_[np.full(3, 1e-3), np.full(3, 0.05), 0.02, 0.02, 1e-3,
                       np.full(3, 0.05), np.full(3, 5e-3), 0.02]


class FusionBackend:
    """Owns the window, GNSS alignment and keyframe factor wiring."""

    def __init__(self, cfg=None, frontend=None, odo_ext=None, T_BL_down=None, gravity=GRAVITY_W):
        self.cfg = cfg or BackendConfig()
        self.frontend = frontend or FrontendConfig()
        self.odo_ext = odo_ext or BodyOdoExtrinsic()
        self.T_BL_down = T_BL_down or Pose.identity()
        self.gravity = gravity
        self.window = SlidingWindow(self.cfg.window_size)
        self.next_id = 0
        self.extrinsic = None
        self.frozen = False
        self.pairs = []
        self.last_gnss_insert = None
        log.info("FusionBackend initialized", window=self.cfg.window_size,
                 gnss=self.cfg.use_gnss, odometer=self.cfg.use_odometer, lidar=self.cfg.use_lidar)

    @property
    def aligned(self):
        return self.extrinsic is not None

    def latest(self):
        if not self.window.nodes:
            return None
        return next(reversed(self.window.nodes.values()))

    def wants_fix(self, t):
        if not self.cfg.use_gnss:
            return False
        if not self.frozen:
            return True
        return gnss_insertion_policy(t, self.last_gnss_insert, period=self.cfg.gnss_period)

    def add_keyframe(self, payload):
        nid = self.next_id
        self.next_id += 1
        prev = self.latest()
        node = Node(nid, payload.t, payload.state, payload.plane, payload.descriptor, payload.fix)
        self.window.add_node(node)
        if prev is None:
            self.window.add_factor(PriorFactor.diagonal(nid, payload.state, INITIAL_SIGMAS))
        else:
            self.window.add_factor(PreintFactor(prev.id, nid, payload.delta, self.odo_ext,
                                                self.cfg.use_odometer, self.gravity))
        if self.cfg.use_lidar and payload.lidar_pose is not None and payload.lidar_info is not None:
            info = payload.lidar_info / self.frontend.lidar_sigma ** 2
            self.window.add_factor(LidarPoseFactor(nid, payload.lidar_pose, info))
        if prev is not None and self.cfg.use_lidar:
            if self.frontend.use_rail_plane and prev.plane is not None and node.plane is not None:
                self.window.add_factor(PlaneFactor(prev.id, nid, prev.plane.m, node.plane.m,
                                                   self.T_BL_down, self.frontend.plane_sigma))
            if self.frontend.use_descriptor and prev.descriptor is not None and node.descriptor is not None:
                self.window.add_factor(DescriptorFactor(prev.id, nid, prev.descriptor, node.descriptor,
                                                        self.frontend.descriptor_weight))
        if payload.fix is not None and self.cfg.use_gnss:
            self._maybe_add_gnss(prev, node, payload)

        report = self.window.optimize(self.cfg.lm_iterations, self.cfg.lm_step_tol)
        marginalized = []
        while len(self.window) > self.cfg.window_size:
            removed = self.window.marginalize_oldest()
            self._record_pair(removed)
            marginalized.append(removed)
        log.info("keyframe added", node=nid, t=round(payload.t, 3), cost=report.final_cost,
                 iterations=report.iterations, aborted=report.aborted)
        return BackendUpdate(nid, report, marginalized)

    def _maybe_add_gnss(self, prev, node, payload):
        fix = payload.fix
        if abs(fix.t - payload.t) > self.cfg.gnss_assoc_tol:
            log.warning("stale GNSS association skipped", fix_t=fix.t, node_t=payload.t)
            return
        if not self.aligned:
            return
        if not gnss_insertion_policy(payload.t, self.last_gnss_insert, period=self.cfg.gnss_period):
            return
        if self.cfg.gnss_residual_mode == "verbatim":
            if prev is None:
                return
            factor = GnssFactor(prev.id, fix, lambda: self.extrinsic, payload.delta, "verbatim",
                                self.cfg.gnss_huber, self.gravity)
        else:
            factor = GnssFactor(node.id, fix, lambda: self.extrinsic, None, "plain",
                                self.cfg.gnss_huber, self.gravity)
        self.window.add_factor(factor)
        self.last_gnss_insert = payload.t
        log.info("GNSS factor inserted", t=round(payload.t, 3), mode=self.cfg.gnss_residual_mode)

    def _record_pair(self, node):
        if node.fix is None or self.frozen or not self.cfg.use_gnss:
            return
        self.pairs.append((node.fix.position, node.state.p))
        P_w0 = np.array([p for p, _ in self.pairs])
        P_b = np.array([p for _, p in self.pairs])
        try:
            self.extrinsic = align_gnss_extrinsic(P_w0, P_b, self.cfg.align_min_pairs, self.cfg.align_min_arc)
        except UnobservableAlignment as e:
            log.debug("GNSS alignment pending", reason=str(e))
            return
        if _arc_length(P_b) >= self.cfg.align_freeze_arc:
            self.frozen = True
            log.info("GNSS extrinsic frozen", **self.extrinsic.to_dict())

    def flush(self):
        """Remaining window nodes, oldest first."""
        return list(self.window.nodes.values())
