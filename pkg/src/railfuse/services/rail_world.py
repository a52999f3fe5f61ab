"""Synthetic rail world: track centerline, rails, trackside furniture and ray casting.

World coordinates are the local UTM plane W0 (east, north, up). The rail-top
level of the centerline is z = 0 and the ground is ``rail_height`` below it.
"""
from dataclasses import dataclass
import math

import numpy as np
import structlog
from scipy.interpolate import CubicSpline

from ..tools.config import WorldConfig
from ..tools.exceptions import ConfigError
from ..tools.scan import SceneLabel

log = structlog.get_logger(__name__)

SPLINE_STEP = 0.25
RAIL_PIECE = 4.0
WIRE_RADIUS = 0.05
WIRE_PIECES = 5
RAIL_BOX_DEPTH = 0.4


def _rot_z(psi):
    c, s = np.cos(psi), np.sin(psi)
    R = np.zeros(np.shape(psi) + (3, 3))
    R[..., 0, 0], R[..., 0, 1] = c, -s
    R[..., 1, 0], R[..., 1, 1] = s, c
    R[..., 2, 2] = 1.0
    return R


def _rot_x(phi):
    c, s = np.cos(phi), np.sin(phi)
    R = np.zeros(np.shape(phi) + (3, 3))
    R[..., 0, 0] = 1.0
    R[..., 1, 1], R[..., 1, 2] = c, -s
    R[..., 2, 1], R[..., 2, 2] = s, c
    return R


class Track:
    """Centerline with linear curvature and cant ramps between segments."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.gauge = cfg.gauge
        S, K, B, tags = [0.0], [0.0], [0.0], []
        s0 = 0.0
        for seg in cfg.segments:
            length = float(seg["length"])
            radius = float(seg.get("radius", 0.0))
            k = 0.0 if radius == 0.0 else 1.0 / radius
            bank = -math.copysign(float(seg.get("cant", 0.0)), k) if k else 0.0
            if abs(bank) >= cfg.gauge:
                raise ConfigError("cant must be smaller than the gauge")
            ramp = max(min(cfg.transition_length, length / 2.0), 1e-3)
            S += [s0 + ramp, s0 + length]
            K += [k, k]
            B += [bank, bank]
            tags.append((s0, s0 + length, seg.get("tag", "feature-rich")))
            s0 += length
        self.S = np.asarray(S)
        self.K = np.asarray(K)
        self.B = np.asarray(B)
        self.tags = tags
        self.length = s0
        self.heading0 = math.radians(cfg.start_heading)

        # heading is exact for piecewise-linear curvature; positions come from a fine quadrature
        grid = np.union1d(np.arange(0.0, self.length, SPLINE_STEP), [self.length])
        psi = self.heading_exact(grid)
        ds = np.diff(grid)
        mid = self.heading_exact(grid[:-1] + ds / 2.0)
        # Simpson per interval
        cx = ds / 6.0 * (np.cos(psi[:-1]) + 4 * np.cos(mid) + np.cos(psi[1:]))
        cy = ds / 6.0 * (np.sin(psi[:-1]) + 4 * np.sin(mid) + np.sin(psi[1:]))
        xy = np.column_stack([np.concatenate([[0.0], np.cumsum(cx)]), np.concatenate([[0.0], np.cumsum(cy)])])
        self.spline = CubicSpline(grid, xy, bc_type="natural")
        log.info("track built", length=self.length, segments=len(cfg.segments))

    def curvature(self, s):
        return np.interp(s, self.S, self.K)

    def bank(self, s):
        """Signed cant: positive when the left rail is higher."""
        return np.interp(s, self.S, self.B)

    def _slope(self, s, values):
        j = np.clip(np.searchsorted(self.S, s, side="right") - 1, 0, len(self.S) - 2)
        return (values[j + 1] - values[j]) / (self.S[j + 1] - self.S[j])

    def heading_exact(self, s):
        s = np.asarray(s, dtype=float)
        dS = np.diff(self.S)
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (self.K[:-1] + self.K[1:]) * dS)])
        j = np.clip(np.searchsorted(self.S, s, side="right") - 1, 0, len(self.S) - 2)
        u = s - self.S[j]
        slope = (self.K[j + 1] - self.K[j]) / dS[j]
        return self.heading0 + cum[j] + self.K[j] * u + 0.5 * slope * u * u

    def tag(self, s):
        for a, b, tag in self.tags:
            if a <= s < b:
                return tag
        return self.tags[-1][2]

    def center(self, s, nu=0):
        """Centerline point (rail-top level) or its nu-th derivative in s."""
        xy = self.spline(s, nu)
        z = np.zeros(np.shape(s) + (1,))
        return np.concatenate([xy, z], axis=-1)

    def yaw(self, s):
        d = self.spline(s, 1)
        return np.arctan2(d[..., 1], d[..., 0])

    def yaw_rate(self, s):
        """d yaw / ds of the spline tangent."""
        d1 = self.spline(s, 1)
        d2 = self.spline(s, 2)
        return (d1[..., 0] * d2[..., 1] - d1[..., 1] * d2[..., 0]) / (d1[..., 0] ** 2 + d1[..., 1] ** 2)

    def roll(self, s):
        return np.arcsin(self.bank(s) / self.gauge)

    def roll_rate(self, s):
        """d roll / ds."""
        return self._slope(s, self.B) / (self.gauge * np.cos(self.roll(s)))

    def rotation(self, s):
        """Track frame: x along the tangent, y to the left rail, z normal to the rail plane."""
        return _rot_z(self.yaw(s)) @ _rot_x(self.roll(s))

    def rail_point(self, s, side):
        """Top-center of the left (side=+1) or right (side=-1) rail head."""
        R = self.rotation(s)
        return self.center(s) + side * (self.gauge / 2.0) * R[..., :, 1]

    def lateral(self, s):
        psi = self.yaw(s)
        return np.stack([-np.sin(psi), np.cos(psi), np.zeros_like(psi)], axis=-1)


@dataclass(frozen=True)
class Box:
    center: np.ndarray
    axes: np.ndarray
    half: np.ndarray
    label: SceneLabel


@dataclass(frozen=True)
class Cylinder:
    base: np.ndarray
    axis: np.ndarray
    length: float
    radius: float
    label: SceneLabel


class World:
    """Track plus trackside primitives, deterministic from the world seed."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.track = Track(cfg)
        self.ground_z = -cfg.rail_height
        rng = np.random.default_rng(cfg.seed)
        self.poles = []
        self.pole_s = np.arange(cfg.pole_spacing / 2.0, self.track.length, cfg.pole_spacing)
        for s in self.pole_s:
            for side in (1.0, -1.0):
                base = self.track.center(s) + side * cfg.pole_offset * self.track.lateral(s)
                base[2] = self.ground_z
                self.poles.append((s, Cylinder(base, np.array([0.0, 0.0, 1.0]),
                                               cfg.pole_height - self.ground_z, cfg.pole_radius, SceneLabel.POLE)))
        self.wires = []
        for s_a, s_b in zip(self.pole_s[:-1], self.pole_s[1:]):
            if self.track.tag(0.5 * (s_a + s_b)) != "feature-rich":
                continue
            u = np.linspace(0.0, 1.0, WIRE_PIECES + 1)
            ss = s_a + u * (s_b - s_a)
            pts = self.track.center(ss)
            pts[:, 2] = cfg.catenary_height - 4.0 * cfg.catenary_sag * u * (1.0 - u)
            for p, q in zip(pts[:-1], pts[1:]):
                axis = q - p
                n = float(np.linalg.norm(axis))
                self.wires.append((0.5 * (s_a + s_b), Cylinder(p, axis / n, n, WIRE_RADIUS, SceneLabel.CATENARY)))
        self.structures = []
        for s in np.arange(cfg.structure_spacing, self.track.length, cfg.structure_spacing):
            jitter = rng.uniform(-5.0, 5.0)
            side = 1.0 if rng.random() < 0.5 else -1.0
            offset = rng.uniform(4.5, 8.0)
            size = rng.uniform([2.0, 1.5, 2.0], [5.0, 3.0, 5.0])
            s_c = float(np.clip(s + jitter, 0.0, self.track.length))
            if self.track.tag(s_c) != "feature-rich":
                continue
            psi = float(self.track.yaw(s_c))
            axes = _rot_z(psi)
            center = self.track.center(s_c) + side * offset * self.track.lateral(s_c)
            center[2] = self.ground_z + size[2] / 2.0
            self.structures.append((s_c, Box(center, axes, size / 2.0, SceneLabel.STRUCTURE)))
        log.info("world generated", length=self.track.length, poles=len(self.poles),
                 wires=len(self.wires), structures=len(self.structures))

    def rails_near(self, s_lo, s_hi):
        """Rail-head boxes of the fixed 4 m pieces overlapping [s_lo, s_hi]."""
        track = self.track
        k0 = max(int(math.floor(s_lo / RAIL_PIECE)), 0)
        k1 = min(int(math.ceil(s_hi / RAIL_PIECE)), int(math.ceil(track.length / RAIL_PIECE)))
        boxes = []
        for k in range(k0, k1):
            a, b = k * RAIL_PIECE, min((k + 1) * RAIL_PIECE, track.length)
            if b - a < 1e-6:
                continue
            for side in (1.0, -1.0):
                pa = track.rail_point(a, side)
                pb = track.rail_point(b, side)
                along = (pb - pa) / np.linalg.norm(pb - pa)
                lat = track.rotation(0.5 * (a + b))[:, 1]
                lat = lat - (lat @ along) * along
                lat /= np.linalg.norm(lat)
                up = np.cross(along, lat)
                half = np.array([0.5 * np.linalg.norm(pb - pa), self.cfg.rail_head_width / 2.0,
                                 (self.cfg.rail_height + RAIL_BOX_DEPTH) / 2.0])
                center = 0.5 * (pa + pb) - up * half[2]
                boxes.append(Box(center, np.column_stack([along, lat, up]), half, SceneLabel.RAIL_HEAD))
        return boxes

    def primitives_near(self, s, ahead, behind=10.0, rails=True):
        lo, hi = s - behind, s + ahead
        boxes = self.rails_near(max(lo, 0.0), min(hi, self.track.length)) if rails else []
        boxes += [b for sb, b in self.structures if lo - 10.0 <= sb <= hi + 10.0]
        cylinders = [c for sp, c in self.poles if lo <= sp <= hi]
        cylinders += [c for sw, c in self.wires if lo - 30.0 <= sw <= hi + 30.0]
        return boxes, cylinders


# --- ray casting ---

def _hit_ground(origins, dirs, z):
    t = np.full(len(dirs), np.inf)
    down = dirs[:, 2] < -1e-12
    t[down] = (z - origins[down, 2]) / dirs[down, 2]
    t[t <= 0] = np.inf
    return t


def _hit_boxes(origins, dirs, boxes):
    if not boxes:
        return np.full(len(dirs), np.inf), np.full(len(dirs), -1)
    C = np.stack([b.center for b in boxes])
    A = np.stack([b.axes for b in boxes])
    Hh = np.stack([b.half for b in boxes])
    o = np.einsum("mji,nmj->nmi", A, origins[:, None, :] - C[None])
    d = np.einsum("mji,nj->nmi", A, dirs)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-Hh[None] - o) * inv
        t2 = (Hh[None] - o) * inv
    parallel = np.abs(d) < 1e-12
    inside = np.abs(o) <= Hh[None]
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    t_near = tmin.max(axis=2)
    t_far = tmax.min(axis=2)
    ok = (t_near <= t_far) & (t_near > 0)
    t = np.where(ok, t_near, np.inf)
    idx = t.argmin(axis=1)
    return t[np.arange(len(t)), idx], idx


def _hit_cylinders(origins, dirs, cylinders):
    if not cylinders:
        return np.full(len(dirs), np.inf), np.full(len(dirs), -1)
    P = np.stack([c.base for c in cylinders])
    Ax = np.stack([c.axis for c in cylinders])
    L = np.array([c.length for c in cylinders])
    r = np.array([c.radius for c in cylinders])
    w = origins[:, None, :] - P[None]
    wa = np.einsum("nmi,mi->nm", w, Ax)
    da = dirs @ Ax.T
    w_perp = w - wa[..., None] * Ax[None]
    d_perp = dirs[:, None, :] - da[..., None] * Ax[None]
    a = np.einsum("nmi,nmi->nm", d_perp, d_perp)
    b = np.einsum("nmi,nmi->nm", w_perp, d_perp)
    c = np.einsum("nmi,nmi->nm", w_perp, w_perp) - r[None] ** 2
    disc = b * b - a * c
    with np.errstate(invalid="ignore", divide="ignore"):
        sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
        t = (-b - sq) / a
        axial = wa + t * da
        ok = (disc >= 0) & (a > 1e-12) & (t > 0) & (axial >= 0) & (axial <= L[None])
    t = np.where(ok, t, np.inf)
    idx = t.argmin(axis=1)
    return t[np.arange(len(t)), idx], idx


@dataclass
class RayHits:
    t: np.ndarray
    label: np.ndarray
    kind: np.ndarray
    index: np.ndarray


def cast_rays(origins, dirs, ground_z, boxes, cylinders, max_range):
    """Nearest intersection per ray; kind 0 ground, 1 box, 2 cylinder, -1 none."""
    origins = np.asarray(origins, dtype=float).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    origins = np.broadcast_to(origins, dirs.shape)
    t_g = _hit_ground(origins, dirs, ground_z)
    t_b, i_b = _hit_boxes(origins, dirs, boxes)
    t_c, i_c = _hit_cylinders(origins, dirs, cylinders)
    T = np.stack([t_g, t_b, t_c], axis=1)
    kind = T.argmin(axis=1)
    t = T[np.arange(len(T)), kind]
    label = np.full(len(t), int(SceneLabel.GROUND))
    box_labels = np.array([int(b.label) for b in boxes]) if boxes else np.zeros(0, dtype=int)
    cyl_labels = np.array([int(c.label) for c in cylinders]) if cylinders else np.zeros(0, dtype=int)
    index = np.where(kind == 1, i_b, np.where(kind == 2, i_c, -1))
    if boxes:
        label[kind == 1] = box_labels[i_b[kind == 1]]
    if cylinders:
        label[kind == 2] = cyl_labels[i_c[kind == 2]]
    missed = ~(t <= max_range)
    kind[missed] = -1
    label[missed] = int(SceneLabel.NONE)
    return RayHits(t, label, kind, index)


def generate_world(cfg=None):
    cfg = cfg or WorldConfig()
    return World(cfg)
