import numpy as np
import pytest

from railfuse.tools.config import MapConfig
from railfuse.tools.exceptions import ExportError, RegistrationRejected
from railfuse.tools.geom import Pose, Quat, so3_exp
from railfuse.tools.sys_op import read_ply
from railfuse.services.fusion_backend import GnssExtrinsic
from railfuse.services.map_manager import (MapManager, Submap, export_manifest, export_map, gnss_assisted_icp,
                                           register_submaps, voxel_downsample)


def box_cloud(rng, n=300, half=5.0):
    return rng.uniform(-half, half, (n, 3))


def nudge(pose, dp=(0.1, -0.08, 0.05), dr=(0.0, 0.0, 0.01)):
    return Pose(pose.rotation * so3_exp(dr), pose.translation + np.asarray(dp))


class TestVoxelDownsample:
    def test_centroids_in_first_seen_order(self):
        pts = np.array([[1.05, 0.0, 0.0], [0.05, 0.0, 0.0], [1.15, 0.0, 0.0], [0.1, 0.1, 0.1]])
        out, inten = voxel_downsample(pts, [1.0, 2.0, 3.0, 4.0], 0.5)
        np.testing.assert_allclose(out, [[1.1, 0.0, 0.0], [0.075, 0.05, 0.05]])
        np.testing.assert_allclose(inten, [2.0, 3.0])

    def test_passthrough(self):
        pts = np.ones((2, 3))
        out, _ = voxel_downsample(pts, np.zeros(2), 0.0)
        assert out.shape == (2, 3)
        out, _ = voxel_downsample(np.zeros((0, 3)), np.zeros(0), 0.5)
        assert len(out) == 0


class TestSubmap:
    def test_first_keyframe_is_anchor(self):
        submap = Submap(0, 2, 1.0)
        anchor = Pose(so3_exp([0.0, 0.0, 0.5]), [10.0, 2.0, 0.0])
        assert not submap.push_keyframe(0, [[1.0, 0.0, 0.0]], anchor, t=3.0)
        second = anchor * Pose(Quat.identity(), [2.0, 0.0, 0.0])
        assert submap.push_keyframe(1, [[1.0, 0.0, 0.0]], second, t=3.1)
        assert submap.t_first == 3.0
        np.testing.assert_allclose(submap.points, [[1.0, 0.0, 0.0], [3.0, 0.0, 0.0]], atol=1e-12)
        np.testing.assert_allclose(submap.world_points(), anchor.apply(submap.points))

    def test_sealed_submap_refuses(self):
        submap = Submap(0, 1, 1.0)
        submap.push_keyframe(0, np.zeros((1, 3)), Pose.identity())
        with pytest.raises(ValueError):
            submap.push_keyframe(1, np.zeros((1, 3)), Pose.identity())

    def test_non_finite_pose(self):
        with pytest.raises(ValueError):
            Submap(0, 3, 1.0).push_keyframe(0, np.zeros((1, 3)), Pose(Quat.identity(), [np.nan, 0.0, 0.0]))

    def test_voxel_statistics(self, rng):
        submap = Submap(0, 3, 1.0)
        a = rng.uniform(0.0, 1.0, (6, 3))
        b = rng.uniform(0.0, 1.0, (6, 3)) + [3.0, 0.0, 0.0]
        submap.push_keyframe(0, np.vstack([a, b[:3]]), Pose.identity())
        submap.push_keyframe(1, b[3:], Pose.identity())
        stats = submap.stats()
        assert stats.count.tolist() == [6.0, 6.0]
        np.testing.assert_allclose(stats.means(), [a.mean(axis=0), b.mean(axis=0)])
        np.testing.assert_allclose(stats.covariances()[1], np.cov(b.T, bias=True), atol=1e-12)
        assert len(submap.stats(min_points=7).count) == 0


class TestIcp:
    @staticmethod
    def submap_of(world, anchor=None):
        anchor = anchor or Pose(so3_exp([0.0, 0.0, 0.3]), [50.0, 20.0, 1.0])
        submap = Submap(0, 10, 1.0)
        submap.push_keyframe(0, anchor.inverse().apply(world), anchor)
        return submap

    def test_recovers_pose_from_gnss_guess(self, rng):
        world = box_cloud(rng) + [50.0, 20.0, 0.0]
        submap = self.submap_of(world)
        truth = Pose(so3_exp([0.01, 0.0, -0.2]), [52.0, 21.0, 0.5])
        pose = gnss_assisted_icp(truth.inverse().apply(world), submap, nudge(truth))
        np.testing.assert_allclose(pose.translation, truth.translation, atol=1e-6)
        assert pose.rotation.angle_to(truth.rotation) < 1e-6

    def test_flat_cloud_is_rejected(self, rng):
        world = box_cloud(rng)
        flat = np.column_stack([rng.uniform(-5, 5, (200, 2)), np.zeros(200)])
        with pytest.raises(RegistrationRejected) as info:
            gnss_assisted_icp(flat, self.submap_of(world, Pose.identity()), Pose.identity())
        assert info.value.rms == float("inf")

    def test_large_residual_is_rejected(self, rng):
        submap = self.submap_of(box_cloud(rng, 40), Pose.identity())
        with pytest.raises(RegistrationRejected) as info:
            gnss_assisted_icp(box_cloud(rng, 300, half=50.0), submap, Pose.identity())
        assert info.value.rms > info.value.bound


class TestNdt:
    @staticmethod
    def pair(rng, shift=(3.0, 0.0, 0.0), n_b=3000):
        world = rng.uniform([0.0, 0.0, 0.0], [8.0, 8.0, 4.0], (3000, 3))
        sub_a = Submap(0, 10, 1.0)
        sub_a.push_keyframe(0, world, Pose.identity())
        anchor_b = Pose(Quat.identity(), shift)
        sub_b = Submap(1, 10, 1.0)
        sub_b.push_keyframe(0, anchor_b.inverse().apply(world[:n_b]), anchor_b)
        return sub_a, sub_b, anchor_b

    def test_recovers_anchor(self, rng):
        sub_a, sub_b, truth = self.pair(rng)
        result = register_submaps(sub_a, sub_b, nudge(truth))
        assert not result.degenerate
        assert result.score < result.initial_score
        np.testing.assert_allclose(result.pose.translation, truth.translation, atol=1e-3)
        assert result.pose.rotation.angle_to(truth.rotation) < 1e-3

    def test_no_overlap_keeps_gnss_anchor(self, rng):
        sub_a, sub_b, truth = self.pair(rng, n_b=3)
        guess = nudge(truth)
        result = register_submaps(sub_a, sub_b, guess)
        assert result.degenerate
        assert result.matched == 0
        assert result.pose is guess
        assert result.to_dict()["degenerate"] is True

    def test_score_that_cannot_improve_keeps_gnss_anchor(self, rng):
        sub_a, sub_b, truth = self.pair(rng)
        result = register_submaps(sub_a, sub_b, truth)
        assert result.matched >= 3
        assert result.score == result.initial_score
        assert result.degenerate
        assert result.pose is truth


class TestMapManager:
    @staticmethod
    def filled(rng, cfg, n_keyframes):
        manager = MapManager(cfg)
        for k in range(n_keyframes):
            pose = Pose(Quat.identity(), [5.0 * k, 0.0, 0.0])
            manager.push(k, box_cloud(rng, 20), pose, np.full(20, float(k)), t=0.1 * k)
        return manager

    def test_seals_every_submap_size(self, rng):
        manager = self.filled(rng, MapConfig(submap_size=2, register_submaps=False), 5)
        assert len(manager.submaps) == 3
        assert [s.id for s in manager.sealed] == [0, 1]
        assert manager.submaps[1].keyframe_ids == [2, 3]
        np.testing.assert_allclose(manager.submaps[2].anchor.translation, [20.0, 0.0, 0.0])

    def test_sparse_submaps_are_flagged(self, rng):
        manager = self.filled(rng, MapConfig(submap_size=2), 4)
        assert not manager.submaps[0].degenerate
        assert manager.submaps[1].degenerate
        np.testing.assert_allclose(manager.submaps[1].anchor.translation, [10.0, 0.0, 0.0])

    def test_relocalize(self, rng):
        manager = MapManager(MapConfig(map_voxel=0.01, register_submaps=False))
        with pytest.raises(RegistrationRejected):
            manager.relocalize(box_cloud(rng), Pose.identity())
        manager.push(0, box_cloud(rng), Pose(Quat.identity(), [100.0, 0.0, 0.0]))
        world = manager.submaps[0].world_points()
        truth = Pose(so3_exp([0.0, 0.0, 0.1]), [101.0, 0.5, 0.0])
        pose = manager.relocalize(truth.inverse().apply(world), nudge(truth))
        np.testing.assert_allclose(pose.translation, truth.translation, atol=1e-6)
        with pytest.raises(RegistrationRejected):
            manager.relocalize(box_cloud(rng, 300, half=60.0), Pose.identity())
        assert manager.rejected == 1

    def test_export(self, rng, tmp_path):
        manager = self.filled(rng, MapConfig(submap_size=2, register_submaps=False), 3)
        path = manager.export_map(tmp_path / "map" / "map.ply")
        data = read_ply(path)
        assert len(data) == sum(len(s) for s in manager.submaps)
        assert sorted(set(data["submap_id"].tolist())) == [0, 1]
        np.testing.assert_allclose(data["intensity"][-len(manager.submaps[1]):], 2.0)

    def test_export_in_gnss_frame(self, rng, tmp_path):
        manager = self.filled(rng, MapConfig(submap_size=1, register_submaps=False), 1)
        frame = GnssExtrinsic(0.5, [1000.0, -200.0, 10.0])
        data = read_ply(export_map(manager.submaps, tmp_path / "map.ply", frame))
        expected = frame.to_w0(manager.submaps[0].world_points())
        got = np.column_stack([data["x"], data["y"], data["z"]])
        np.testing.assert_allclose(got, expected, rtol=1e-6, atol=1e-3)

    def test_manifest(self, rng, tmp_path):
        manager = self.filled(rng, MapConfig(submap_size=2, register_submaps=False), 3)
        lines = export_manifest(manager, tmp_path / "map.manifest").read_text().splitlines()
        assert len(lines) == 2
        fields = lines[1].split()
        assert len(fields) == 11
        assert int(fields[0]) == 1
        assert float(fields[1]) == pytest.approx(0.2)
        assert float(fields[2]) == pytest.approx(10.0)
        assert int(fields[9]) == len(manager.submaps[1])
        assert fields[10] == "0"

    def test_export_without_submaps(self, tmp_path):
        with pytest.raises(ExportError):
            MapManager().export_map(tmp_path / "map.ply")
