"""IMU/odometer preintegration between keyframes.

Error-state ordering (19): [d_alpha, d_beta, d_theta, d_ba, d_bg, d_phi, d_c].
Node tangent ordering (16): [p, v, theta, ba, bg, c], rotation perturbed on
the right (q <- q ⊗ Exp(d_theta)).

Accelerometer model: a_hat = R^T (a_W + g) + ba + n_a with g = (0, 0, +g).
"""
from dataclasses import dataclass, field, replace
import math

import numpy as np
import structlog

from ..tools.config import GRAVITY, REPREINT_BA, REPREINT_BG
from ..tools.exceptions import RepreintegrationRequired
from ..tools.geom import (Pose, Quat, Rot3, quat_left, quat_right, right_jacobian,
                          skew, so3_exp, symmetrize)

log = structlog.get_logger(__name__)

ERR_DIM = 19
TAN_DIM = 16
NOISE_DIM = 16

# error-state blocks
A, B, TH, BA, BG, PH = (slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12),
                        slice(12, 15), slice(15, 18))
C = 18
# node tangent blocks
TP, TV, TT, TBA, TBG = (slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15))
TC = 15

GRAVITY_W = np.array([0.0, 0.0, GRAVITY])
E_X = np.array([1.0, 0.0, 0.0])


@dataclass(frozen=True)
class ImuSample:
    t: float
    accel: np.ndarray
    gyro: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "accel", np.asarray(self.accel, dtype=float).reshape(3))
        object.__setattr__(self, "gyro", np.asarray(self.gyro, dtype=float).reshape(3))


@dataclass(frozen=True)
class OdometerSample:
    """Encoder reading; pulses are signed so reverse running gives negative speed."""
    t: float
    pulses_per_second: float
    pulses_per_turn: float
    wheel_diameter: float

    def __post_init__(self):
        if self.pulses_per_turn <= 0:
            raise ValueError("pulses_per_turn must be positive")
        if self.wheel_diameter <= 0:
            raise ValueError("wheel_diameter must be positive")


@dataclass(frozen=True)
class NoiseParams:
    sigma_a: float
    sigma_w: float
    sigma_ba: float
    sigma_bg: float
    sigma_so: float
    sigma_po: float

    def __post_init__(self):
        for name in ("sigma_a", "sigma_w", "sigma_ba", "sigma_bg", "sigma_so", "sigma_po"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")

    @classmethod
    def from_sensors(cls, sensors):
        return cls(sensors.sigma_a, sensors.sigma_w, sensors.sigma_ba,
                   sensors.sigma_bg, sensors.sigma_so, sensors.sigma_po)

    def covariance(self, dt):
        """Discrete noise covariance Q for a step of length dt."""
        diag = np.concatenate([
            np.full(3, self.sigma_a ** 2),
            np.full(3, self.sigma_w ** 2),
            np.full(3, self.sigma_ba ** 2),
            np.full(3, self.sigma_bg ** 2),
            np.full(3, self.sigma_po ** 2),
            [self.sigma_so ** 2],
        ])
        return np.diag(diag / dt)


@dataclass(frozen=True)
class BodyOdoExtrinsic:
    R_OB: Rot3 = field(default_factory=Rot3.identity)
    p_OB: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not isinstance(self.R_OB, Rot3):
            object.__setattr__(self, "R_OB", Rot3(self.R_OB))
        object.__setattr__(self, "p_OB", np.asarray(self.p_OB, dtype=float).reshape(3))


@dataclass(frozen=True)
class NavState:
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: Quat = field(default_factory=Quat.identity)
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    c_odo: float = 1.0

    def __post_init__(self):
        for name in ("p", "v", "ba", "bg"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))
        object.__setattr__(self, "c_odo", float(self.c_odo))
        if not 0.5 < self.c_odo < 2.0:
            log.warning("odometer scale outside sanity band", c_odo=self.c_odo)

    @property
    def pose(self):
        return Pose(self.q, self.p)

    @property
    def R(self):
        return self.q.matrix()

    def boxplus(self, d):
        d = np.asarray(d, dtype=float)
        return NavState(self.p + d[TP], self.v + d[TV], self.q * so3_exp(d[TT]),
                        self.ba + d[TBA], self.bg + d[TBG], self.c_odo + d[TC])

    def boxminus(self, other):
        """Tangent vector d with other.boxplus(d) == self."""
        d = np.zeros(TAN_DIM)
        d[TP] = self.p - other.p
        d[TV] = self.v - other.v
        d[TT] = (other.q.inverse() * self.q).log()
        d[TBA] = self.ba - other.ba
        d[TBG] = self.bg - other.bg
        d[TC] = self.c_odo - other.c_odo
        return d

    def is_finite(self):
        return bool(np.all(np.isfinite(np.concatenate([self.p, self.v, self.ba, self.bg, [self.c_odo]]))))

    def to_dict(self):
        return {
            "p": self.p.tolist(),
            "v": self.v.tolist(),
            "q": self.q.as_array().tolist(),
            "ba": self.ba.tolist(),
            "bg": self.bg.tolist(),
            "c_odo": self.c_odo,
        }


@dataclass(frozen=True)
class PreintegratedDelta:
    alpha: np.ndarray
    beta: np.ndarray
    gamma: Quat
    phi: np.ndarray
    dt_total: float
    lin_ba: np.ndarray
    lin_bg: np.ndarray
    lin_c: float
    J: np.ndarray
    P: np.ndarray
    noise: NoiseParams
    samples: tuple = ()
    t0: float = 0.0

    @classmethod
    def start(cls, noise, ba=None, bg=None, c=1.0, t0=0.0):
        return cls(np.zeros(3), np.zeros(3), Quat.identity(), np.zeros(3), 0.0,
                   np.zeros(3) if ba is None else np.asarray(ba, dtype=float),
                   np.zeros(3) if bg is None else np.asarray(bg, dtype=float),
                   float(c), np.eye(ERR_DIM), np.zeros((ERR_DIM, ERR_DIM)), noise, (), float(t0))

    @property
    def t1(self):
        return self.t0 + self.dt_total

    @property
    def jacobians(self):
        J = self.J
        return {
            "alpha_ba": J[A, BA], "alpha_bg": J[A, BG],
            "beta_ba": J[B, BA], "beta_bg": J[B, BG],
            "gamma_bg": J[TH, BG],
            "phi_bg": J[PH, BG], "phi_c": J[PH, C],
        }


def odo_velocity(sample):
    """Wheel speed from encoder pulses: v = n / N * pi * d."""
    return sample.pulses_per_second / sample.pulses_per_turn * math.pi * sample.wheel_diameter


def _half_step(w, dt):
    """Unit quaternion [1, w dt / 2] (normalized) and its rotation vector."""
    u = 0.5 * np.asarray(w) * dt
    h = Quat(1.0, u[0], u[1], u[2])
    return h, u


def _rotvec_rate(u, dt):
    """d(rotation vector of normalize([1, u])) / dw with u = w dt / 2."""
    s = float(np.linalg.norm(u))
    if s < 1e-8:
        return dt * np.eye(3), 2.0 * u
    f = 2.0 * math.atan(s) / s
    fp = (2.0 / (1.0 + s * s) - f) / s
    rho = f * u
    return (f * np.eye(3) + fp * np.outer(u, u) / s) * (0.5 * dt), rho


def _transition(delta, imu, odo_v, ext, dt):
    R = delta.gamma.matrix()
    a = imu.accel - delta.lin_ba
    w = imu.gyro - delta.lin_bg
    h, u = _half_step(w, dt)
    D, rho = _rotvec_rate(u, dt)
    theta_bg = -right_jacobian(rho) @ D
    odo_dir = ext.R_OB.matrix @ E_X

    F = np.eye(ERR_DIM)
    F[A, B] = np.eye(3) * dt
    F[A, TH] = -0.5 * R @ skew(a) * dt * dt
    F[A, BA] = -0.5 * R * dt * dt
    F[B, TH] = -R @ skew(a) * dt
    F[B, BA] = -R * dt
    F[TH, TH] = h.matrix().T
    F[TH, BG] = theta_bg
    F[PH, TH] = -R @ skew(odo_dir * delta.lin_c * odo_v) * dt
    F[PH, C] = R @ odo_dir * odo_v * dt

    G = np.zeros((ERR_DIM, NOISE_DIM))
    G[A, 0:3] = -0.5 * R * dt * dt
    G[B, 0:3] = -R * dt
    G[TH, 3:6] = theta_bg
    G[BA, 6:9] = np.eye(3) * dt
    G[BG, 9:12] = np.eye(3) * dt
    G[PH, 12:15] = R * dt
    G[C, 15] = dt
    return F, G


def propagate_error_state(delta, imu, odo_v, dt, noise=None, ext=None):
    """One step of J <- F J and P <- F P F^T + G Q G^T."""
    noise = noise or delta.noise
    ext = ext or BodyOdoExtrinsic()
    F, G = _transition(delta, imu, odo_v, ext, dt)
    J = F @ delta.J
    P = symmetrize(F @ delta.P @ F.T + G @ noise.covariance(dt) @ G.T)
    return J, P


def integrate(delta, imu, odo_v, ext, dt):
    """Forward-Euler step over dt with a held IMU sample and odometer speed."""
    if not dt > 0:
        raise ValueError(f"integration step must be positive, got {dt}")
    R = delta.gamma.matrix()
    a = imu.accel - delta.lin_ba
    w = imu.gyro - delta.lin_bg
    J, P = propagate_error_state(delta, imu, odo_v, dt, ext=ext)
    h, _ = _half_step(w, dt)
    odo_body = ext.R_OB.matrix @ E_X * (delta.lin_c * odo_v)
    return replace(
        delta,
        alpha=delta.alpha + delta.beta * dt + 0.5 * R @ a * dt * dt,
        beta=delta.beta + R @ a * dt,
        gamma=delta.gamma * h,
        phi=delta.phi + R @ odo_body * dt,
        dt_total=delta.dt_total + dt,
        J=J,
        P=P,
        samples=delta.samples + ((imu, float(odo_v), float(dt)),),
    )


def reintegrate(delta, ext, ba, bg, c):
    """Full re-integration of the stored samples at new linearization points."""
    out = PreintegratedDelta.start(delta.noise, ba, bg, c, delta.t0)
    for imu, odo_v, dt in delta.samples:
        out = integrate(out, imu, odo_v, ext, dt)
    log.debug("delta re-integrated", t0=delta.t0, samples=len(delta.samples))
    return out


def preintegrate(imu_samples, odo_speed, ext, noise, t0, t1, ba=None, bg=None, c=1.0, delta=None):
    """Accumulate samples over [t0, t1] with zero-order hold.

    ``imu_samples`` must be sorted by time; sample i covers [t_i, t_{i+1}).
    ``odo_speed`` maps a time to the held odometer speed.
    """
    if delta is None:
        delta = PreintegratedDelta.start(noise, ba, bg, c, t0)
    n = len(imu_samples)
    for i, imu in enumerate(imu_samples):
        nxt = imu_samples[i + 1].t if i + 1 < n else math.inf
        lo, hi = max(imu.t, t0), min(nxt, t1)
        if i == 0 and imu.t > t0:
            lo = t0
        if hi - lo > 1e-9:
            delta = integrate(delta, imu, odo_speed(lo), ext, hi - lo)
        if nxt >= t1:
            break
    return delta


def _correction(delta, dba, dbg, dc):
    J = delta.J
    dba = np.asarray(dba, dtype=float)
    dbg = np.asarray(dbg, dtype=float)
    alpha = delta.alpha + J[A, BA] @ dba + J[A, BG] @ dbg
    beta = delta.beta + J[B, BA] @ dba + J[B, BG] @ dbg
    u = 0.5 * J[TH, BG] @ dbg
    gamma = delta.gamma * Quat(1.0, u[0], u[1], u[2])
    phi = delta.phi + J[PH, BG] @ dbg + J[PH, C] * dc
    return alpha, beta, gamma, phi


def needs_reintegration(delta, ba, bg):
    dba = float(np.linalg.norm(np.asarray(ba) - delta.lin_ba))
    dbg = float(np.linalg.norm(np.asarray(bg) - delta.lin_bg))
    return dba > REPREINT_BA or dbg > REPREINT_BG


def correct_first_order(delta, dba, dbg, dc):
    """First-order bias/scale update; moves the linearization point by the given deltas."""
    dba_n = float(np.linalg.norm(dba))
    dbg_n = float(np.linalg.norm(dbg))
    if dba_n > REPREINT_BA or dbg_n > REPREINT_BG:
        raise RepreintegrationRequired(dba_n, dbg_n)
    alpha, beta, gamma, phi = _correction(delta, dba, dbg, dc)
    return replace(delta, alpha=alpha, beta=beta, gamma=gamma, phi=phi,
                   lin_ba=delta.lin_ba + np.asarray(dba, dtype=float),
                   lin_bg=delta.lin_bg + np.asarray(dbg, dtype=float),
                   lin_c=delta.lin_c + float(dc))


def _theta_error(delta, x_k, x_k1):
    """Raw quaternion E = q_k^-1 ⊗ q_k1 ⊗ gamma_c^-1 together with its pieces."""
    A_q = x_k.q.inverse() * x_k1.q
    u = 0.5 * delta.J[TH, BG] @ (x_k.bg - delta.lin_bg)
    n = math.sqrt(1.0 + float(u @ u))
    h_inv = np.concatenate([[1.0], -u]) / n
    M = quat_left(A_q) @ quat_right(delta.gamma.inverse())
    E = M @ h_inv
    return E, M, u, n, A_q


def preint_residual(delta, x_k, x_k1, gravity=GRAVITY_W, ext=None):
    ext = ext or BodyOdoExtrinsic()
    dba = x_k.ba - delta.lin_ba
    dbg = x_k.bg - delta.lin_bg
    dc = x_k.c_odo - delta.lin_c
    alpha, beta, _, phi = _correction(delta, dba, dbg, dc)
    dt = delta.dt_total
    Rk_T = x_k.R.T
    E, _, _, _, _ = _theta_error(delta, x_k, x_k1)
    s = 1.0 if E[0] >= 0.0 else -1.0

    r = np.zeros(ERR_DIM)
    r[A] = Rk_T @ (x_k1.p - x_k.p - x_k.v * dt + 0.5 * gravity * dt * dt) - alpha
    r[B] = Rk_T @ (x_k1.v - x_k.v + gravity * dt) - beta
    r[TH] = 2.0 * s * E[1:]
    r[BA] = x_k1.ba - x_k.ba
    r[BG] = x_k1.bg - x_k.bg
    r[PH] = Rk_T @ (x_k1.p - x_k.p) + Rk_T @ x_k1.R @ ext.p_OB - ext.p_OB - phi
    r[C] = x_k1.c_odo - x_k.c_odo
    return r


def residual_jacobians(delta, x_k, x_k1, gravity=GRAVITY_W, ext=None):
    """Analytic Jacobians of preint_residual with respect to the tangents of x_k and x_k1."""
    ext = ext or BodyOdoExtrinsic()
    dt = delta.dt_total
    Jd = delta.J
    Rk = x_k.R
    Rk_T = Rk.T
    Rk1 = x_k1.R
    E, M, u, n, A_q = _theta_error(delta, x_k, x_k1)
    s = 1.0 if E[0] >= 0.0 else -1.0
    dP = x_k1.p - x_k.p - x_k.v * dt + 0.5 * gravity * dt * dt
    dV = x_k1.v - x_k.v + gravity * dt
    lever = Rk_T @ Rk1 @ ext.p_OB

    Jk = np.zeros((ERR_DIM, TAN_DIM))
    Jk1 = np.zeros((ERR_DIM, TAN_DIM))

    Jk[A, TP] = -Rk_T
    Jk[A, TV] = -Rk_T * dt
    Jk[A, TT] = skew(Rk_T @ dP)
    Jk[A, TBA] = -Jd[A, BA]
    Jk[A, TBG] = -Jd[A, BG]
    Jk1[A, TP] = Rk_T

    Jk[B, TV] = -Rk_T
    Jk[B, TT] = skew(Rk_T @ dV)
    Jk[B, TBA] = -Jd[B, BA]
    Jk[B, TBG] = -Jd[B, BG]
    Jk1[B, TV] = Rk_T

    E_c = s * E
    Jk[TH, TT] = -(E_c[0] * np.eye(3) - skew(E_c[1:]))
    h_inv = np.concatenate([[1.0], -u]) / n
    Mh = quat_left(A_q) @ quat_right(delta.gamma.inverse()) @ quat_right(Quat.from_array(h_inv))
    Jk1[TH, TT] = s * Mh[1:, 1:]
    dh = np.zeros((4, 3))
    dh[1:, :] = -np.eye(3) / n
    dh -= np.outer(np.concatenate([[1.0], -u]), u) / n ** 3
    Jk[TH, TBG] = 2.0 * s * (M @ dh)[1:, :] @ (0.5 * Jd[TH, BG])

    Jk[BA, TBA] = -np.eye(3)
    Jk1[BA, TBA] = np.eye(3)
    Jk[BG, TBG] = -np.eye(3)
    Jk1[BG, TBG] = np.eye(3)

    Jk[PH, TP] = -Rk_T
    Jk1[PH, TP] = Rk_T
    Jk[PH, TT] = skew(Rk_T @ (x_k1.p - x_k.p) + lever)
    Jk1[PH, TT] = -Rk_T @ Rk1 @ skew(ext.p_OB)
    Jk[PH, TBG] = -Jd[PH, BG]
    Jk[PH, TC] = -Jd[PH, C]

    Jk[C, TC] = -1.0
    Jk1[C, TC] = 1.0
    return Jk, Jk1


def predict(x_k, delta, gravity=GRAVITY_W):
    """State at the end of ``delta`` propagated from x_k (biases held)."""
    dt = delta.dt_total
    alpha, beta, gamma, _ = _correction(delta, x_k.ba - delta.lin_ba, x_k.bg - delta.lin_bg, 0.0)
    R = x_k.R
    return NavState(
        p=x_k.p + x_k.v * dt - 0.5 * gravity * dt * dt + R @ alpha,
        v=x_k.v - gravity * dt + R @ beta,
        q=x_k.q * gamma,
        ba=x_k.ba, bg=x_k.bg, c_odo=x_k.c_odo,
    )
