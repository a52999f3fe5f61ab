import logging
import math

import numpy as np
import pytest

from railfuse.tools.config import FilterConfig
from railfuse.tools.geom import Pose, so3_exp
from railfuse.tools.scan import FeatureCloud, LidarId, RawScan, SceneLabel
from railfuse.tools.sys_op import read_scan_ply, write_scan_ply
from railfuse.services.cloud_pipeline import (CloudPipeline, calibrate_failure_thresholds, curvature, deskew,
                                              extract_features, failure_factor, grid_outlier_filter,
                                              hidden_sector_filter, hidden_sector_mask, remove_close_points)
from railfuse.services.preintegration import BodyOdoExtrinsic, ImuSample, NoiseParams, preintegrate
from railfuse.services.railsim import RailSim

NOISE = NoiseParams(0.02, 0.002, 2e-4, 2e-5, 1e-4, 0.02)


def make_scan(xyz, t=None, labels=None):
    xyz = np.asarray(xyz, dtype=float)
    t = np.zeros(len(xyz)) if t is None else t
    pts = np.column_stack([xyz, np.zeros(len(xyz)), t])
    return RawScan(pts, LidarId.DOWN, 0.0, 0.1, labels)


def turning_delta(rate_z=1.0, speed=10.0, period=0.1):
    samples = [ImuSample(i / 200.0, [0.0, 0.0, 9.81], [0.0, 0.0, rate_z]) for i in range(int(period * 200))]
    return preintegrate(samples, lambda t: speed, BodyOdoExtrinsic(), NOISE, 0.0, period)


class TestDenoise:
    def test_close_points_removed(self):
        scan = make_scan([[0.5, 0, 0], [1.0, 0, 0], [0, 2.0, 0], [0.3, 0.3, 0.3]])
        out = remove_close_points(scan, 1.0)
        np.testing.assert_allclose(out.xyz, [[1.0, 0, 0], [0, 2.0, 0]])

    def test_close_points_needs_positive_radius(self):
        with pytest.raises(ValueError):
            remove_close_points(make_scan([[1, 0, 0]]), 0.0)

    def test_sparse_cells_removed_in_order(self):
        cluster = [[5.1, 5.1, 0.1], [5.2, 5.3, 0.2], [5.5, 5.4, 0.3], [5.8, 5.9, 0.9]]
        lone = [[20.5, 0.5, 0.5]]
        scan = make_scan(cluster[:2] + lone + cluster[2:], labels=[1, 1, 3, 1, 1])
        out = grid_outlier_filter(scan, 1.0, 3)
        np.testing.assert_allclose(out.xyz, cluster)
        assert out.labels.tolist() == [1, 1, 1, 1]

    def test_grid_on_empty_scan(self):
        assert len(grid_outlier_filter(make_scan(np.zeros((0, 3))), 1.0, 3)) == 0

    def test_point_behind_is_hidden(self):
        xyz = np.array([[10.0, 0.0, 0.0], [10.2, 0.0, 0.0], [10.0, 0.3, 0.0]])
        hidden = hidden_sector_mask(xyz, math.radians(3.0), 0.5)
        assert hidden.tolist() == [False, True, False]

    def test_far_points_are_not_hidden(self):
        xyz = np.array([[10.0, 0.0, 0.0], [11.0, 0.0, 0.0]])
        assert not hidden_sector_mask(xyz, math.radians(3.0), 0.5).any()

    def test_bleed_between_surfaces_is_hidden(self, rng):
        fy, fz = np.meshgrid(np.arange(-0.5, 0.5, 0.1), np.arange(-0.5, 0.5, 0.1))
        front = np.column_stack([np.full(fy.size, 5.0), fy.ravel(), fz.ravel()])
        by, bz = np.meshgrid(np.arange(-2.0, 2.0, 0.1), np.arange(-1.0, 1.0, 0.1))
        back = np.column_stack([np.full(by.size, 8.0), by.ravel(), bz.ravel()])
        edge = front[(front[:, 1] < -0.45) | (front[:, 1] > 0.35)]
        depth = np.linalg.norm(edge, axis=1) + rng.uniform(0.1, 0.45, len(edge))
        bleed = edge / np.linalg.norm(edge, axis=1)[:, None] * depth[:, None]
        hidden = hidden_sector_mask(np.vstack([front, back, bleed]), math.radians(3.0), 0.5)
        assert not hidden[:len(front) + len(back)].any()
        assert hidden[len(front) + len(back):].all()

    def test_isolated_returns_removed_by_grid(self):
        wy, wz = np.meshgrid(np.arange(-3.0, 3.0, 0.25) + 0.125, np.arange(0.0, 3.0, 0.25) + 0.125)
        wall = np.column_stack([np.full(wy.size, 10.5), wy.ravel(), wz.ravel()])
        # sparse streak of spurious returns, never three to a cell
        streak = np.column_stack([2.0 + 0.644 * np.arange(60), np.full(60, 5.5), np.full(60, 5.5)])
        xyz = np.vstack([wall, streak])
        labels = np.r_[np.full(len(wall), int(SceneLabel.STRUCTURE)), np.full(len(streak), int(SceneLabel.SUN))]
        out = grid_outlier_filter(make_scan(xyz, labels=labels), 1.0, 3)
        removed = len(xyz) - len(out)
        sun_removed = len(streak) - int((out.labels == SceneLabel.SUN).sum())
        assert sun_removed / len(streak) == 1.0
        assert sun_removed / removed == 1.0

    @pytest.mark.parametrize("apply", [
        lambda s, c: remove_close_points(s, c.r_min),
        lambda s, c: grid_outlier_filter(s, c.grid_cell, c.grid_min_count),
        lambda s, c: hidden_sector_filter(s, c.hidden_angle_phi, c.hidden_radius_d),
    ], ids=["close", "grid", "hidden"])
    def test_each_filter_is_idempotent(self, short_scenario, apply):
        scan = RailSim(short_scenario).scan(LidarId.DOWN, 30)
        once = apply(scan, short_scenario.filters)
        twice = apply(once, short_scenario.filters)
        assert 0 < len(once) <= len(scan)
        np.testing.assert_array_equal(twice.points, once.points)
        np.testing.assert_array_equal(twice.labels, once.labels)

    def test_simulated_bleed_is_removed(self, short_scenario):
        sim = RailSim(short_scenario)
        cfg = short_scenario.filters
        n_bleed, n_hidden = 0, 0
        for index in range(20, 50):
            scan = sim.scan(LidarId.DOWN, index)
            bleed = scan.labels == SceneLabel.BLEED
            hidden = hidden_sector_mask(scan.xyz, cfg.hidden_angle_phi, cfg.hidden_radius_d)
            n_bleed += int(bleed.sum())
            n_hidden += int((hidden & bleed).sum())
        assert n_bleed > 0
        assert n_hidden / n_bleed >= 0.95


class TestDeskew:
    def test_static_points_land_in_frame_end(self, rng):
        delta = turning_delta()
        t_end = np.array([0.9, 0.1, 0.0])
        ext = Pose(so3_exp([0.0, 0.2, 0.0]), [1.2, 0.0, 0.8])
        rotvec = delta.gamma.log()
        X = rng.uniform(-20, 20, (50, 3))
        t = np.sort(rng.uniform(0.0, delta.dt_total, 50))
        s = t / delta.dt_total
        p_b = np.array([so3_exp(si * rotvec).matrix().T @ (x - si * t_end) for si, x in zip(s, X)])
        p_l = (p_b - ext.translation) @ ext.rotation.matrix()
        out = deskew(make_scan(p_l, t), delta, ext, t_end)

        R_end = delta.gamma.matrix()
        expected_b = (X - t_end) @ R_end
        expected_l = (expected_b - ext.translation) @ ext.rotation.matrix()
        np.testing.assert_allclose(out.xyz, expected_l, atol=1e-9)

    def test_frame_end_points_unchanged(self):
        delta = turning_delta()
        xyz = np.array([[5.0, 1.0, -1.0], [8.0, -2.0, 0.5]])
        out = deskew(make_scan(xyz, np.full(2, delta.dt_total)), delta)
        np.testing.assert_allclose(out.xyz, xyz, atol=1e-12)

    def test_offsets_outside_span(self):
        delta = turning_delta()
        with pytest.raises(ValueError):
            deskew(make_scan([[5.0, 0.0, 0.0]], np.array([0.2])), delta)


class TestFeatures:
    @staticmethod
    def corner_scan():
        wall = np.column_stack([np.full(51, 10.0), np.linspace(-5.0, 0.0, 51), np.zeros(51)])
        side = np.column_stack([np.linspace(10.1, 15.0, 50), np.zeros(50), np.zeros(50)])
        return make_scan(np.vstack([wall, side]))

    def test_curvature_of_line_is_zero(self):
        xyz = np.column_stack([np.full(30, 10.0), np.linspace(-3, 3, 30), np.zeros(30)])
        c = curvature(xyz, 5)
        assert np.isnan(c[:5]).all() and np.isnan(c[-5:]).all()
        np.testing.assert_allclose(c[5:-5], 0.0, atol=1e-12)

    def test_curvature_too_few_points(self):
        assert np.isnan(curvature(np.ones((10, 3)), 5)).all()

    def test_corner_is_an_edge(self):
        scan = self.corner_scan()
        features = extract_features(scan, FilterConfig())
        assert any(np.allclose(e, [10.0, 0.0, 0.0]) for e in features.edges)
        assert features.n_planar > 0
        c = curvature(scan.xyz, 5)
        for p in features.planars:
            i = int(np.flatnonzero(np.all(scan.xyz == p, axis=1))[0])
            assert c[i] < FilterConfig().curvature_planar_thresh

    def test_edge_cap(self):
        features = extract_features(self.corner_scan(), FilterConfig(sectors=1), e_eps=1)
        assert features.n_edge <= 2

    def test_empty_scan(self):
        features = extract_features(make_scan(np.zeros((0, 3))))
        assert features.n_edge == 0 and features.n_planar == 0

    @pytest.mark.parametrize("n_edge, n_planar, expected", [
        (30, 100, 1), (10, 10, 100), (30, 10, 50), (10, 100, 50), (20, 100, 50), (20, 80, 50),
    ])
    def test_failure_factor(self, n_edge, n_planar, expected):
        assert failure_factor(n_edge, n_planar, 20, 80) == expected

    def test_threshold_calibration(self):
        clouds = [FeatureCloud(np.zeros((100, 3)), np.zeros((400, 3)), LidarId.UP),
                  FeatureCloud(np.zeros((300, 3)), np.zeros((800, 3)), LidarId.DOWN)]
        assert calibrate_failure_thresholds(clouds) == pytest.approx((20.0, 60.0))
        with pytest.raises(ValueError):
            calibrate_failure_thresholds([])


class TestCloudPipeline:
    def test_simulated_scan(self, short_scenario):
        sim = RailSim(short_scenario)
        index = 30
        t0, t1 = index * 0.1, (index + 1) * 0.1
        truth = sim.truth.state(t0)
        delta = preintegrate(sim.imu(t0, t1), lambda t: 4.0, BodyOdoExtrinsic(), NOISE, t0, t1,
                             truth.ba, truth.bg)
        scan = sim.scan(LidarId.DOWN, index)
        pipeline = CloudPipeline(short_scenario.filters, sim.extrinsics[LidarId.DOWN])
        features, clean, xi_f = pipeline.process(scan, delta)
        assert xi_f in (1, 50, 100)
        assert 0 < len(clean) <= len(scan)
        assert np.all(np.isfinite(features.edges)) and np.all(np.isfinite(features.planars))
        assert features.lidar_id is LidarId.DOWN

    def test_scan_read_from_ply(self, short_scenario, tmp_path):
        sim = RailSim(short_scenario)
        index = 30
        t0, t1 = index * 0.1, (index + 1) * 0.1
        truth = sim.truth.state(t0)
        delta = preintegrate(sim.imu(t0, t1), lambda t: 4.0, BodyOdoExtrinsic(), NOISE, t0, t1,
                             truth.ba, truth.bg)
        original = sim.scan(LidarId.DOWN, index)
        path = write_scan_ply(tmp_path / "down.ply", original)
        scan = read_scan_ply(path, LidarId.DOWN, frame_time=original.frame_time,
                             frame_period=original.frame_period)
        assert len(scan) == len(original)
        pipeline = CloudPipeline(short_scenario.filters, sim.extrinsics[LidarId.DOWN])
        features, clean, xi_f = pipeline.process(scan, delta)
        assert xi_f in (1, 50, 100)
        assert 0 < len(clean) <= len(scan)
        assert features.n_edge + features.n_planar > 0


class TestFeatureCloud:
    def test_construction_does_not_log(self, caplog):
        caplog.set_level(logging.DEBUG)
        cloud = FeatureCloud(np.ones((4, 3)), np.zeros((2, 3)), LidarId.UP)
        moved = cloud.transformed(Pose(so3_exp([0.0, 0.0, 0.1]), [1.0, 0.0, 0.0]))
        assert moved.n_edge == 4 and moved.n_planar == 2
        assert caplog.records == []
