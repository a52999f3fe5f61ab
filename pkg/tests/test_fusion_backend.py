import math

import numpy as np
import pytest

from railfuse.tools.config import BackendConfig, ScenarioConfig
from railfuse.tools.exceptions import UnobservableAlignment
from railfuse.tools.geom import Pose, so3_exp
from railfuse.services.fusion_backend import (DescriptorFactor, FusionBackend, GnssExtrinsic, GnssFactor, GnssFix,
                                              GnssProjector, KeyframePayload, LidarPoseFactor, Node, PlaneFactor,
                                              PreintFactor, PriorFactor, SlidingWindow, align_gnss_extrinsic,
                                              gnss_insertion_policy, gnss_residual, is_keyframe,
                                              schur_marginalize, sqrt_information)
from railfuse.services.preintegration import (TAN_DIM, BodyOdoExtrinsic, ImuSample, NavState, NoiseParams,
                                              predict, preint_residual, preintegrate, residual_jacobians)
from railfuse.services.rail_geometry import build_height_descriptor, plane_transform
from railfuse.services.railsim import GnssReading, RailSim

NOISE = NoiseParams(0.02, 0.002, 2e-4, 2e-5, 1e-4, 0.02)
ORIGIN = (32.35, 116.28, 30.0)


def random_state(rng, spread=1.0):
    return NavState(rng.normal(size=3) * 10 * spread, rng.normal(size=3), so3_exp(rng.normal(size=3) * spread),
                    rng.normal(0, 0.01, 3), rng.normal(0, 1e-3, 3), 1.0 + rng.normal(0, 0.01))


def random_delta(rng, n=40):
    samples = [ImuSample(i / 200.0, rng.normal([0.3, -0.1, 9.8], 0.5), rng.normal(0.0, 0.2, 3)) for i in range(n)]
    return preintegrate(samples, lambda t: 5.0, BodyOdoExtrinsic(), NOISE, 0.0, n / 200.0)


def cruise_delta(duration, t0=0.0):
    n = int(round(duration * 200))
    samples = [ImuSample(t0 + i / 200.0, [0.0, 0.0, 9.81], [0.0, 0.0, 0.0]) for i in range(n)]
    return preintegrate(samples, lambda t: 5.0, BodyOdoExtrinsic(), NOISE, t0, t0 + duration)


def numeric_jacobian(factor, states, node, h=1e-6):
    e0, _ = factor.linearize(states)
    J = np.zeros((len(e0), TAN_DIM))
    for k in range(TAN_DIM):
        d = np.zeros(TAN_DIM)
        d[k] = h
        plus = dict(states)
        minus = dict(states)
        plus[node] = states[node].boxplus(d)
        minus[node] = states[node].boxplus(-d)
        J[:, k] = (factor.linearize(plus)[0] - factor.linearize(minus)[0]) / (2 * h)
    return J


def assert_jacobians(factor, states, rtol=1e-5, atol=1e-5):
    _, jac = factor.linearize(states)
    for node, J in jac.items():
        np.testing.assert_allclose(J, numeric_jacobian(factor, states, node), rtol=rtol, atol=atol)


class TestAlignment:
    def test_recovers_yaw_and_translation(self, rng):
        truth = GnssExtrinsic(math.radians(37.0), [120.0, -45.0, 3.0])
        s = np.linspace(0.0, 60.0, 15)
        P_b = np.column_stack([s, 0.002 * s ** 2, 0.01 * s])
        ext = align_gnss_extrinsic(truth.to_w0(P_b), P_b)
        assert ext.yaw == pytest.approx(truth.yaw, abs=1e-9)
        np.testing.assert_allclose(ext.p, truth.p, atol=1e-9)

    def test_noisy_fixes(self, rng):
        truth = GnssExtrinsic(math.radians(-120.0), [10.0, 20.0, 0.0])
        s = np.linspace(0.0, 300.0, 60)
        P_b = np.column_stack([s, np.zeros_like(s), np.zeros_like(s)])
        P_w0 = truth.to_w0(P_b) + rng.normal(0.0, 1.2, P_b.shape)
        ext = align_gnss_extrinsic(P_w0, P_b)
        assert abs(math.degrees(ext.yaw - truth.yaw)) < 1.0

    @pytest.mark.parametrize("seed", range(20))
    def test_single_point_fixes_on_curved_run(self, seed):
        rng = np.random.default_rng(seed)
        truth = GnssExtrinsic(rng.uniform(-math.pi, math.pi), rng.uniform(-500.0, 500.0, 3))
        heading = np.linspace(0.0, 200.0 / 800.0, 21)
        s = np.linspace(0.0, 200.0, 21)
        P_b = np.column_stack([800.0 * np.sin(heading), 800.0 * (1.0 - np.cos(heading)), 0.005 * s])
        noise = rng.normal(0.0, 1.0, P_b.shape) * [1.2, 1.2, 2.5]
        ext = align_gnss_extrinsic(truth.to_w0(P_b) + noise, P_b)
        error = math.remainder(ext.yaw - truth.yaw, 2.0 * math.pi)
        assert abs(math.degrees(error)) < 1.0

    def test_too_few_pairs(self):
        P = np.column_stack([np.arange(5.0) * 10, np.zeros(5), np.zeros(5)])
        with pytest.raises(UnobservableAlignment):
            align_gnss_extrinsic(P, P)

    def test_short_baseline(self):
        P = np.column_stack([np.arange(12.0), np.zeros(12), np.zeros(12)])
        with pytest.raises(UnobservableAlignment, match="arc length"):
            align_gnss_extrinsic(P, P)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            align_gnss_extrinsic(np.zeros((12, 3)), np.zeros((11, 3)))

    def test_extrinsic_maps_both_ways(self, rng):
        ext = GnssExtrinsic(0.7, [1.0, 2.0, 3.0])
        p = rng.normal(size=(4, 3))
        np.testing.assert_allclose(ext.from_w0(ext.to_w0(p)), p, atol=1e-12)
        pose = Pose(so3_exp([0.0, 0.0, 0.2]), [1.0, 0.0, 0.0])
        np.testing.assert_allclose(ext.pose_to_w0(pose).translation, ext.to_w0(pose.translation), atol=1e-12)


class TestGnss:
    def test_projector_pins_origin(self):
        projector = GnssProjector(ORIGIN)
        fix = projector.project(GnssReading(1.0, *ORIGIN, 1.2, 2.5))
        np.testing.assert_allclose(fix.position, 0.0, atol=1e-6)
        np.testing.assert_allclose(np.diag(fix.covariance), [1.44, 1.44, 6.25])
        assert fix.quality == "SPP"

    def test_projector_takes_first_reading(self):
        projector = GnssProjector()
        first = projector.project(GnssReading(0.0, 48.1, 11.5, 500.0, 1.0, 1.0))
        np.testing.assert_allclose(first.position, 0.0, atol=1e-9)
        assert projector.origin.zone == 32

    def test_projector_inverts_simulated_fixes(self):
        sc = ScenarioConfig.from_dict({"sensors": {"noise_free": True}, "run": {"duration": 10.0}})
        sim = RailSim(sc)
        projector = GnssProjector(sc.sensors.gnss_origin)
        readings = sim.gnss(0.0, 10.0)
        assert len(readings) == 10
        for reading in readings:
            fix = projector.project(reading)
            np.testing.assert_allclose(fix.position, sim.truth.positions(reading.t)[0], atol=1e-3)

    def test_outage_has_no_fixes(self):
        sc = ScenarioConfig.from_dict({"sensors": {"gnss_outages": [[2.5, 6.5]]}, "run": {"duration": 10.0}})
        times = [r.t for r in RailSim(sc).gnss(0.0, 10.0)]
        assert times == [1.0, 2.0, 7.0, 8.0, 9.0, 10.0]

    def test_bad_covariance(self):
        with pytest.raises(ValueError):
            GnssFix(0.0, np.zeros(3), np.array([[1.0, 2.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]))

    def test_plain_residual(self):
        ext = GnssExtrinsic(0.3, [5.0, 5.0, 0.0])
        x = NavState(p=[1.0, 2.0, 3.0])
        fix = GnssFix(0.0, ext.to_w0(x.p + [1.2, 0.0, 0.0]), np.diag([1.44, 1.44, 6.25]))
        np.testing.assert_allclose(gnss_residual(fix, x, ext, mode="plain", whiten=False), [1.2, 0.0, 0.0],
                                   atol=1e-12)
        assert np.linalg.norm(gnss_residual(fix, x, ext, mode="plain")) == pytest.approx(1.0)

    def test_verbatim_residual(self, rng):
        delta = random_delta(rng)
        x_k = NavState(rng.normal(size=3), rng.normal(size=3), so3_exp(rng.normal(size=3)))
        ext = GnssExtrinsic(-0.4, [3.0, 1.0, 2.0])
        fix = GnssFix(0.0, ext.to_w0(predict(x_k, delta).p), np.eye(3))
        np.testing.assert_allclose(gnss_residual(fix, x_k, ext, delta), 0.0, atol=1e-9)
        with pytest.raises(ValueError):
            gnss_residual(fix, x_k, ext)

    def test_insertion_policy(self):
        assert gnss_insertion_policy(5.0, None)
        assert not gnss_insertion_policy(5.0, 0.0, period=10.0)
        assert gnss_insertion_policy(10.0, 0.0, period=10.0)


class TestMarginalization:
    @staticmethod
    def spd(rng, n):
        A = rng.normal(size=(n, n))
        return A @ A.T + n * np.eye(n)

    def test_schur_matches_covariance_block(self, rng):
        H = self.spd(rng, 8)
        b = rng.normal(size=8)
        keep, marg = np.arange(3, 8), np.arange(3)
        H_new, b_new = schur_marginalize(H, b, keep, marg)
        np.testing.assert_allclose(np.linalg.inv(H_new), np.linalg.inv(H)[np.ix_(keep, keep)], atol=1e-10)
        x = -np.linalg.solve(H, b)
        np.testing.assert_allclose(-np.linalg.solve(H_new, b_new), x[keep], atol=1e-10)

    def test_sqrt_information(self, rng):
        H = self.spd(rng, 6)
        b = rng.normal(size=6)
        J, r = sqrt_information(H, b)
        np.testing.assert_allclose(J.T @ J, H, atol=1e-9)
        np.testing.assert_allclose(J.T @ r, b, atol=1e-9)

    def test_sqrt_information_rank_deficient(self, rng):
        A = rng.normal(size=(2, 5))
        J, r = sqrt_information(A.T @ A, A.T @ np.ones(2))
        assert J.shape == (2, 5) and r.shape == (2,)
        np.testing.assert_allclose(J.T @ J, A.T @ A, atol=1e-9)

    @staticmethod
    def chain_factor(states, i, j, offset):
        J = np.zeros((3, 2 * TAN_DIM))
        J[:, :3] = np.eye(3) / 0.1
        J[:, TAN_DIM:TAN_DIM + 3] = -np.eye(3) / 0.1
        r0 = (states[i].p - states[j].p - offset) / 0.1
        return PriorFactor([i, j], J, r0, {i: states[i], j: states[j]})

    def grow_chain(self, states, offsets, window_size):
        window = SlidingWindow(window_size)
        removed = []
        for nid, st in enumerate(states):
            window.add_node(Node(nid, float(nid), st))
            window.add_factor(PriorFactor.diagonal(nid, st, np.ones(TAN_DIM)))
            if nid:
                window.add_factor(self.chain_factor(states, nid - 1, nid, offsets[nid - 1]))
            while len(window) > window_size:
                removed.append(window.marginalize_oldest().id)
            window.optimize(100, 1e-12)
        return window, removed

    def test_marginalization_preserves_optimum(self, rng):
        states = [NavState(p=rng.normal(size=3) * 3, v=rng.normal(size=3)) for _ in range(5)]
        offsets = [rng.normal(size=3) for _ in range(4)]
        full, removed = self.grow_chain(states, offsets, 10)
        assert removed == [] and len(full) == 5
        reduced, removed = self.grow_chain(states, offsets, 3)
        assert removed == [0, 1]
        assert list(reduced.nodes) == [2, 3, 4]
        assert sum(f.kind == "prior" and f.nodes == (2,) for f in reduced.factors) == 2
        for nid in (2, 3, 4):
            np.testing.assert_allclose(reduced.nodes[nid].state.p, full.nodes[nid].state.p, atol=1e-8)

    def test_factor_on_unknown_node(self):
        window = SlidingWindow(3)
        with pytest.raises(ValueError):
            window.add_factor(PriorFactor.diagonal(7, NavState(), np.ones(TAN_DIM)))


class TestFactors:
    @pytest.mark.parametrize("seed", range(4))
    def test_plane_jacobians(self, seed):
        rng = np.random.default_rng(seed)
        states = {0: random_state(rng, 0.3), 1: random_state(rng, 0.3)}
        m_i = np.r_[so3_exp(rng.normal(size=3)).rotate(np.array([0.0, 0.0, 1.0])), 2.4]
        m_j = np.r_[so3_exp(rng.normal(size=3)).rotate(np.array([0.0, 0.0, 1.0])), 2.3]
        T_BL = Pose(so3_exp([0.0, 0.22, 0.0]), [1.2, 0.0, 0.8])
        assert_jacobians(PlaneFactor(0, 1, m_i, m_j, T_BL, 0.02), states, atol=1e-4)

    def test_plane_residual_vanishes_for_consistent_planes(self, rng):
        x_i, x_j = random_state(rng, 0.3), random_state(rng, 0.3)
        T_BL = Pose(so3_exp([0.0, 0.22, 0.0]), [1.2, 0.0, 0.8])
        m_i = np.array([0.0, 0.0, 1.0, 2.4])
        factor = PlaneFactor(0, 1, m_i, np.zeros(4), T_BL, 0.02)
        m_j = plane_transform(m_i, factor.relative(x_i, x_j))
        e, _ = PlaneFactor(0, 1, m_i, m_j, T_BL, 0.02).linearize({0: x_i, 1: x_j})
        np.testing.assert_allclose(e, 0.0, atol=1e-10)

    @pytest.mark.parametrize("seed", range(4))
    def test_gnss_jacobians(self, seed):
        rng = np.random.default_rng(seed)
        delta = random_delta(rng)
        ext = GnssExtrinsic(0.5, [1.0, 2.0, 0.0])
        fix = GnssFix(0.0, rng.normal(size=3) * 5, np.diag([1.44, 1.44, 6.25]))
        for mode, d in (("verbatim", delta), ("plain", None)):
            factor = GnssFactor(0, fix, lambda: ext, d, mode)
            assert_jacobians(factor, {0: random_state(rng)})

    def test_lidar_pose_jacobians(self, rng):
        info = TestMarginalization.spd(rng, 6)
        x = random_state(rng)
        factor = LidarPoseFactor(0, Pose(x.q * so3_exp(rng.normal(0, 0.3, 3)), x.p + rng.normal(size=3)), info)
        assert_jacobians(factor, {0: x})

    def test_prior_jacobians_away_from_linearization(self, rng):
        lin = random_state(rng)
        factor = PriorFactor([0], TestMarginalization.spd(rng, TAN_DIM), rng.normal(size=TAN_DIM), {0: lin})
        assert_jacobians(factor, {0: lin.boxplus(rng.normal(0, 0.1, TAN_DIM))})

    def test_preint_jacobians_are_whitened(self, rng):
        delta = random_delta(rng)
        x_0 = random_state(rng)
        states = {0: x_0, 1: predict(x_0, delta).boxplus(rng.normal(0, 0.02, TAN_DIM))}
        factor = PreintFactor(0, 1, delta, use_odometer=False)
        e, jac = factor.linearize(states)
        assert e.shape == (16,)
        rows = factor.rows
        np.testing.assert_allclose(factor.L @ e, preint_residual(delta, states[0], states[1])[rows], atol=1e-9)
        J0, J1 = residual_jacobians(delta, states[0], states[1])
        np.testing.assert_allclose(factor.L @ jac[0], J0[rows], atol=1e-9)
        np.testing.assert_allclose(factor.L @ jac[1], J1[rows], atol=1e-9)

    def test_descriptor_prefers_matching_shift(self, rng):
        rows, cols = rng.integers(0, 60, 400), rng.integers(0, 80, 400)
        cloud = np.column_stack([3.25 + 0.5 * rows, -19.75 + 0.5 * cols, rng.uniform(0.1, 6.0, 400)])
        D_i = build_height_descriptor(cloud)
        D_j = build_height_descriptor(cloud - [1.0, 0.0, 0.0])
        factor = DescriptorFactor(0, 1, D_i, D_j, 1.0)
        matched, _ = factor.linearize({0: NavState(), 1: NavState(p=[1.0, 0.0, 0.0])})
        still, _ = factor.linearize({0: NavState(), 1: NavState()})
        assert abs(matched[0]) < 1e-9
        assert still[0] > 1.0


class TestOptimizer:
    def test_recovers_perturbed_node(self, rng):
        delta = random_delta(rng)
        x_0 = NavState(rng.normal(size=3), rng.normal(size=3), so3_exp(rng.normal(size=3)))
        x_1 = predict(x_0, delta)
        window = SlidingWindow(5)
        window.add_node(Node(0, 0.0, x_0))
        window.add_node(Node(1, delta.dt_total, x_1.boxplus(rng.normal(0, 0.05, TAN_DIM))))
        window.add_factor(PriorFactor.diagonal(0, x_0, np.full(TAN_DIM, 1e-3)))
        window.add_factor(PreintFactor(0, 1, delta, use_odometer=False))
        report = window.optimize(20, 1e-10)
        assert not report.aborted
        assert report.final_cost < 1e-8 < report.initial_cost
        assert report.iterations >= 1
        est = window.nodes[1].state
        np.testing.assert_allclose(est.p, x_1.p, atol=1e-6)
        assert est.q.angle_to(x_1.q) < 1e-6
        assert len(report.history) == report.iterations + 1

    def test_empty_window(self):
        report = SlidingWindow(3).optimize(5, 1e-6)
        assert report.iterations == 0 and report.final_cost == 0.0

    def test_keyframe_rule(self):
        a = Pose()
        assert is_keyframe(a, Pose(translation=[1.1, 0.0, 0.0]), 1.0, math.radians(5.0))
        assert is_keyframe(a, Pose(so3_exp([0.0, 0.0, math.radians(6.0)])), 1.0, math.radians(5.0))
        assert not is_keyframe(a, Pose(so3_exp([0.0, 0.0, 0.05]), [0.5, 0.0, 0.0]), 1.0, math.radians(5.0))


def cruise_chain(n, period=1.0):
    x = NavState(v=[5.0, 0.0, 0.0])
    out = [(0.0, x, None)]
    for k in range(1, n):
        delta = cruise_delta(period, (k - 1) * period)
        x = predict(x, delta)
        out.append((k * period, x, delta))
    return out


class TestFusionBackend:
    def test_window_is_bounded(self):
        backend = FusionBackend(BackendConfig(window_size=3, use_gnss=False))
        marginalized = []
        for t, x, delta in cruise_chain(6):
            update = backend.add_keyframe(KeyframePayload(t, x, delta))
            marginalized += update.marginalized
            assert len(backend.window) <= 3
        assert [n.id for n in marginalized] == [0, 1, 2]
        assert [n.id for n in backend.flush()] == [3, 4, 5]
        np.testing.assert_allclose(backend.latest().state.p, [25.0, 0.0, 0.0], atol=1e-6)
        assert not backend.wants_fix(10.0)

    def test_alignment_then_gnss_factors(self):
        truth = GnssExtrinsic(math.radians(30.0), [100.0, 200.0, 5.0])
        cfg = BackendConfig(window_size=3, align_min_pairs=3, align_min_arc=5.0, align_freeze_arc=12.0,
                            gnss_residual_mode="plain", gnss_period=2.0)
        backend = FusionBackend(cfg)
        assert backend.wants_fix(0.0)
        for t, x, delta in cruise_chain(10):
            fix = GnssFix(t, truth.to_w0(x.p), np.diag([1.44, 1.44, 6.25]))
            backend.add_keyframe(KeyframePayload(t, x, delta, fix=fix))
        assert backend.aligned and backend.frozen
        assert backend.extrinsic.yaw == pytest.approx(truth.yaw, abs=1e-6)
        np.testing.assert_allclose(backend.extrinsic.p, truth.p, atol=1e-4)
        assert backend.last_gnss_insert is not None
        assert any(f.kind == "gnss" for f in backend.window.factors)
        np.testing.assert_allclose(backend.latest().state.p, [45.0, 0.0, 0.0], atol=1e-4)
