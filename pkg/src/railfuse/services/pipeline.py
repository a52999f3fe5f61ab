"""End-to-end run: simulated sensors through the frontend, the sliding-window
backend and the mapper, producing trajectory, map, diagnostics and metrics.

Frames are produced into a bounded queue and consumed one at a time; the
producer waits when the queue is full, so no frame is ever dropped. The
two LiDAR clouds of a frame are processed concurrently, the backend and
every map lookup are awaited in frame order.
"""
from collections import deque
from dataclasses import dataclass, field
import asyncio
import math
from pathlib import Path
import time

import numpy as np
import structlog
from scipy.spatial.transform import Rotation

from ..tools.config import IMU_GAP_FACTOR, ScenarioConfig
from ..tools.exceptions import (BedNotFound, LineFitFailed, PlaneDegenerate, RegistrationRejected,
                                TooFewMatches, UnobservableAlignment)
from ..tools.geom import Pose, Rot3
from ..tools.metrics import compute_metrics, runtime_summary
from ..tools.scan import INTENSITY, LidarId
from ..tools.sys_op import DiagnosticsWriter, TrajectoryWriter, write_manifest, write_metrics
from .cloud_pipeline import CloudPipeline
from .fusion_backend import (FusionBackend, GnssExtrinsic, GnssProjector, KeyframePayload,
                             align_gnss_extrinsic, is_keyframe)
from .lidar_odometry import LocalMap, ScanMatcher, calibrate_e_lambda
from .map_manager import MapManager
from .preintegration import (BodyOdoExtrinsic, ImuSample, NavState, NoiseParams, odo_velocity,
                             predict, preintegrate)
from .rail_geometry import RailExtractor, build_height_descriptor
from .railsim import RailSim, simulate_gnss

log = structlog.get_logger(__name__)

LIDARS = (LidarId.UP, LidarId.DOWN)
RELOCALIZE_INFO = 1.0


def bridge_imu_gaps(samples, rate, factor=IMU_GAP_FACTOR):
    """Fill gaps longer than ``factor`` nominal periods by linear interpolation.

    Returns the completed sample list and the bridged (t_start, t_end) gaps.
    """
    samples = list(samples)
    if len(samples) < 2:
        return samples, []
    period = 1.0 / rate
    out, gaps = [samples[0]], []
    for a, b in zip(samples[:-1], samples[1:]):
        span = b.t - a.t
        if span > factor * period:
            n = int(round(span / period))
            for k in range(1, n):
                u = k / n
                out.append(ImuSample(a.t + u * span, (1 - u) * a.accel + u * b.accel,
                                     (1 - u) * a.gyro + u * b.gyro))
            gaps.append((a.t, b.t))
            log.warning("IMU gap bridged", start=round(a.t, 4), end=round(b.t, 4), inserted=n - 1)
        out.append(b)
    return out, gaps


def _since(samples, t0):
    """Samples from the last one at or before t0 onwards."""
    times = [s.t for s in samples]
    i = int(np.searchsorted(times, t0 + 1e-12, side="right")) - 1
    return samples[max(i, 0):]


def _odo_speed(samples):
    """Zero-order-hold speed lookup over odometer samples."""
    if not samples:
        return lambda t: 0.0
    times = np.array([s.t for s in samples])
    speeds = np.array([odo_velocity(s) for s in samples])

    def speed(t):
        i = int(np.searchsorted(times, t + 1e-12, side="right")) - 1
        return float(speeds[max(i, 0)])
    return speed


def gravity_aligned_state(imu_samples, speed=0.0):
    """Initial state with roll and pitch from the mean specific force, yaw and position zero."""
    f = np.mean([s.accel for s in imu_samples], axis=0)
    roll = math.atan2(f[1], f[2])
    pitch = math.atan2(-f[0], math.hypot(f[1], f[2]))
    R = Rotation.from_euler("ZYX", [0.0, pitch, roll]).as_matrix()
    return NavState(np.zeros(3), R @ np.array([speed, 0.0, 0.0]), Rot3(R).to_quat())


@dataclass
class KeyframeData:
    t: float
    features: dict
    cloud: np.ndarray
    intensity: np.ndarray
    pose: Pose = None


@dataclass
class RunResult:
    times: np.ndarray
    poses: list
    frame: str
    extrinsic: GnssExtrinsic = None
    metrics: dict = field(default_factory=dict)
    records: list = field(default_factory=list)
    failures: int = 0
    outputs: dict = field(default_factory=dict)

    @property
    def positions(self):
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)


class RailPipeline:
    """One run of a scenario."""

    def __init__(self, scenario=None, write_outputs=True):
        self.scenario = scenario or ScenarioConfig()
        sc = self.scenario
        self.sim = RailSim(sc)
        self.sensors = sc.sensors
        self.extrinsics = self.sim.extrinsics
        self.noise = NoiseParams.from_sensors(sc.sensors)
        self.odo_ext = BodyOdoExtrinsic()
        self.clouds = {lid: CloudPipeline(sc.filters, self.extrinsics[lid]) for lid in LIDARS}
        self.matcher = ScanMatcher(sc.frontend, self.extrinsics)
        self.rails = RailExtractor(sc.sensors.mount_height, math.radians(sc.sensors.lidar_tilt),
                                   sc.world.gauge, sc.world.rail_height)
        self.backend = FusionBackend(sc.backend, sc.frontend, self.odo_ext, self.extrinsics[LidarId.DOWN])
        self.map = MapManager(sc.mapping)
        self.projector = GnssProjector(sc.sensors.gnss_origin)
        self.ground_z = -(sc.sensors.body_height + sc.world.rail_height)

        out = Path(sc.run.output_dir)
        self.paths = {}
        if write_outputs:
            for key in ("trajectory", "diagnostics", "metrics", "manifest", "export_map"):
                name = getattr(sc.run, key)
                if name:
                    self.paths[key] = out / name
        self.trajectory = TrajectoryWriter(self.paths.get("trajectory"))
        self.diagnostics = DiagnosticsWriter(self.paths.get("diagnostics"))

        self.imu_log = []
        self.odo_log = []
        self.state = None
        self.last_kf = None
        self.keyframes = deque(maxlen=sc.frontend.local_map_keyframes)
        self.kf_data = {}
        self.local_map = LocalMap()
        self.pending = []
        self.done_times, self.done_poses = [], []
        self.records = []
        self.failures = 0
        self.map_queue = None
        self._predicted = None
        log.info("RailPipeline initialized", scenario=sc.run.name, frames=self.sim.n_frames,
                 gnss=sc.backend.use_gnss, odometer=sc.backend.use_odometer, output=str(out))

    # --- sensor buffers ---

    def _ingest(self, frame):
        new = frame.imu
        gaps = []
        if self.imu_log and new:
            merged, gaps = bridge_imu_gaps([self.imu_log[-1]] + new, self.sensors.imu_rate)
            new = merged[1:]
        self.imu_log.extend(new)
        if self.imu_log and frame.t1 - self.imu_log[-1].t > IMU_GAP_FACTOR / self.sensors.imu_rate:
            # open gap: the last sample is held until data resumes
            gaps = gaps + [(self.imu_log[-1].t, None)]
        self.odo_log.extend(frame.odometer)
        fixes = [self.projector.project(r) for r in frame.gnss]
        return bool(gaps), fixes

    def _trim(self, t0):
        self.imu_log = _since(self.imu_log, t0)
        self.odo_log = _since(self.odo_log, t0)

    def _preintegrate(self, x, t0, t1):
        return preintegrate(_since(self.imu_log, t0), _odo_speed(self.odo_log), self.odo_ext, self.noise,
                            t0, t1, x.ba, x.bg, x.c_odo)

    # --- map worker ---

    async def _map_worker(self):
        while True:
            item = await self.map_queue.get()
            try:
                if item is None:
                    return
                await asyncio.to_thread(self.map.push, *item)
            except Exception:
                log.error("map update failed", exc_info=True)
            finally:
                self.map_queue.task_done()

    # --- frames ---

    async def _produce(self, queue):
        try:
            for index in range(self.sim.n_frames):
                frame = await asyncio.to_thread(self.sim.frame, index)
                if queue.full():
                    log.debug("frame queue full, producer waiting", frame=index)
                await queue.put(frame)
        finally:
            await queue.put(None)

    def _rebuild_local_map(self):
        entries = []
        for nid in self.keyframes:
            node = self.backend.window.nodes.get(nid)
            data = self.kf_data.get(nid)
            pose = node.state.pose if node is not None else (data.pose if data else None)
            if pose is None or data is None:
                continue
            for lid, fc in data.features.items():
                entries.append(fc.transformed(pose * self.extrinsics[lid]))
        self.local_map = LocalMap.from_keyframes(entries)
        for nid in [n for n in self.kf_data if n not in self.keyframes and n not in self.backend.window.nodes]:
            del self.kf_data[nid]

    def _body_cloud(self, cleans):
        clouds, intensity = [], []
        for lid, clean in cleans.items():
            if len(clean):
                clouds.append(self.extrinsics[lid].apply(clean.xyz))
                intensity.append(clean.points[:, INTENSITY])
        if not clouds:
            return np.zeros((0, 3)), np.zeros(0)
        return np.vstack(clouds), np.concatenate(intensity)

    def _rail_plane(self, down):
        try:
            _, plane = self.rails.extract(down.xyz)
            return plane
        except (BedNotFound, LineFitFailed, PlaneDegenerate) as e:
            log.warning("rail plane unavailable", reason=str(e))
            return None

    async def process_frame(self, frame):
        record = {"frame": frame.index, "t": round(frame.t1, 6), "keyframe": False}
        imu_gap, fixes = self._ingest(frame)
        record["imu_gap"] = imu_gap
        first = self.state is None
        if first:
            if not frame.imu:
                raise ValueError("no IMU samples in the first frame")
            speed = odo_velocity(frame.odometer[0]) if frame.odometer and self.scenario.backend.use_odometer else 0.0
            self.state = gravity_aligned_state(frame.imu, speed)
            log.info("state initialized from gravity", roll_pitch=self.state.q.as_array().tolist())
        self._predicted = None
        x_k = self.state

        started = time.perf_counter()
        delta = self._preintegrate(x_k, frame.t0, frame.t1)
        pred = predict(x_k, delta)
        self._predicted = pred
        translation = delta.phi if self.scenario.backend.use_odometer else x_k.R.T @ (pred.p - x_k.p)
        processed = await asyncio.gather(*(asyncio.to_thread(self.clouds[lid].process, frame.scans[lid],
                                                             delta, translation) for lid in LIDARS))
        features = {lid: p[0] for lid, p in zip(LIDARS, processed)}
        cleans = {lid: p[1] for lid, p in zip(LIDARS, processed)}
        xi_f = {lid: p[2] for lid, p in zip(LIDARS, processed)}

        result = None
        if len(self.local_map):
            result = self.matcher.match(features[LidarId.UP], features[LidarId.DOWN], self.local_map,
                                        pred.pose, x_k.p, xi_f)
            record.update(result.to_dict())
        plane = self._rail_plane(cleans[LidarId.DOWN])
        body_down = self.extrinsics[LidarId.DOWN].apply(cleans[LidarId.DOWN].xyz) \
            if len(cleans[LidarId.DOWN]) else np.zeros((0, 3))
        descriptor = build_height_descriptor(body_down, self.ground_z)
        record["frontend_ms"] = 1e3 * (time.perf_counter() - started)
        record["xi_f"] = {lid.value: v for lid, v in xi_f.items()}
        record["rail_plane"] = plane is not None

        pose = result.pose if result is not None and result.converged else pred.pose
        estimate = NavState(pose.translation, pred.v, pose.rotation, pred.ba, pred.bg, pred.c_odo)
        fix = next((f for f in fixes if abs(f.t - frame.t1) <= self.scenario.backend.gnss_assoc_tol), None)

        bk = self.scenario.backend
        keyframe = first or is_keyframe(self.last_kf.state.pose, estimate.pose, bk.keyframe_distance,
                                         bk.keyframe_angle)
        keyframe = keyframe or (fix is not None and self.backend.wants_fix(frame.t1))
        if not keyframe:
            self.state = estimate
            self._finish_record(record)
            return record

        lidar_pose = lidar_info = None
        if result is not None and result.converged:
            lidar_pose, lidar_info = result.pose, result.H
        elif not first and fix is not None and self.backend.aligned:
            lidar_pose, lidar_info = await self._relocalize(cleans, fix, estimate, record)
        kf_delta = None
        if not first:
            kf_delta = self._preintegrate(self.last_kf.state, self.last_kf.t, frame.t1)
        payload = KeyframePayload(frame.t1, estimate, kf_delta, lidar_pose, lidar_info, plane, descriptor, fix)

        started = time.perf_counter()
        update = await asyncio.to_thread(self.backend.add_keyframe, payload)
        record["backend_ms"] = 1e3 * (time.perf_counter() - started)
        record.update({"keyframe": True, "node": update.node, "lm": update.report.to_dict(),
                       "gnss_inserted": self.backend.last_gnss_insert == frame.t1,
                       "gnss_aligned": self.backend.aligned})

        cloud, intensity = self._body_cloud(cleans)
        self.kf_data[update.node] = KeyframeData(frame.t1, features, cloud, intensity)
        self.keyframes.append(update.node)
        for node in update.marginalized:
            self._finalize(node)
        self.last_kf = self.backend.latest()
        self.state = self.last_kf.state
        self._trim(self.last_kf.t)
        self._rebuild_local_map()
        self._finish_record(record)
        return record

    async def _relocalize(self, cleans, fix, estimate, record):
        await self.map_queue.join()
        cloud, _ = self._body_cloud(cleans)
        gnss_init = Pose(estimate.q, self.backend.extrinsic.from_w0(fix.position))
        try:
            pose = self.map.relocalize(cloud, gnss_init)
        except RegistrationRejected as e:
            log.warning("relocalization rejected, keeping prediction", reason=str(e))
            record["relocalized"] = False
            return None, None
        record["relocalized"] = True
        return pose, RELOCALIZE_INFO * np.eye(6)

    def _finish_record(self, record):
        self.records.append(record)
        self.diagnostics.write(record)

    def _finalize(self, node):
        """A keyframe leaves the window: its estimate is final."""
        data = self.kf_data.get(node.id)
        pose = node.state.pose
        if data is not None:
            data.pose = pose
            self.map_queue.put_nowait((node.id, data.cloud, pose, data.intensity, node.t))
        self.pending.append((node.t, pose))
        if self.backend.frozen:
            self._write_pending(self.backend.extrinsic)

    def _write_pending(self, extrinsic):
        for t, pose in self.pending:
            out = extrinsic.pose_to_w0(pose) if extrinsic is not None else pose
            self.trajectory.write(t, out)
            self.done_times.append(t)
            self.done_poses.append(out)
        self.pending = []

    # --- run ---

    async def run(self):
        self.map_queue = asyncio.Queue()
        frames = asyncio.Queue(maxsize=self.scenario.run.queue_size)
        worker = asyncio.create_task(self._map_worker())
        producer = asyncio.create_task(self._produce(frames))
        while True:
            frame = await frames.get()
            if frame is None:
                break
            try:
                await self.process_frame(frame)
            except Exception:
                self.failures += 1
                if self._predicted is not None:
                    self.state = self._predicted
                log.error("frame failed", frame=frame.index, t=frame.t1, exc_info=True)
                self._finish_record({"frame": frame.index, "t": round(frame.t1, 6), "failure": True})
        await producer
        for node in self.backend.flush():
            self._finalize(node)
        self._write_pending(self.backend.extrinsic)
        await self.map_queue.put(None)
        await worker
        return self._report()

    def _report(self):
        sc = self.scenario
        ext = self.backend.extrinsic
        frame = "W0" if ext is not None else "W"
        result = RunResult(np.asarray(self.done_times), self.done_poses, frame, ext,
                           records=self.records, failures=self.failures)
        metrics = {"frames": len(self.records), "keyframes": len(self.done_times), "failures": self.failures,
                   "frame": frame, "imu_gaps": sum(1 for r in self.records if r.get("imu_gap")),
                   "registration_rejected": self.map.rejected}
        if ext is not None:
            metrics["gnss_yaw_deg"] = math.degrees(ext.yaw)
        metrics.update(runtime_summary(self.records))
        try:
            truth = self.sim.truth.positions(result.times)
            metrics.update(compute_metrics(result.times, result.positions, result.times, truth,
                                           align_yaw=sc.run.align_yaw or ext is None))
        except TooFewMatches as e:
            log.error("metrics unavailable", reason=str(e))
            metrics["error"] = str(e)
        result.metrics = metrics

        if "metrics" in self.paths:
            result.outputs["metrics"] = write_metrics(self.paths["metrics"], metrics)
        if "manifest" in self.paths:
            result.outputs["manifest"] = write_manifest(self.paths["manifest"], self.map.manifest_lines(ext))
        if "export_map" in self.paths and self.map.submaps:
            result.outputs["map"] = self.map.export_map(self.paths["export_map"], ext)
        if self.trajectory.path:
            result.outputs["trajectory"] = self.trajectory.path
        log.info("run finished", scenario=sc.run.name, keyframes=len(result.times), failures=self.failures,
                 rmse=metrics.get("rmse"), max=metrics.get("max"))
        return result


def run_pipeline(scenario, write_outputs=True):
    """Run a scenario (config object or YAML path) to completion."""
    if not isinstance(scenario, ScenarioConfig):
        scenario = ScenarioConfig.from_yaml(scenario)
    return asyncio.run(RailPipeline(scenario, write_outputs).run())


def calibrate_lambda(scenarios):
    """e_lambda from the lambda_min of frames labelled by their segment tag."""
    good, degenerate, flags = [], [], []
    for scenario in scenarios:
        if not isinstance(scenario, ScenarioConfig):
            scenario = ScenarioConfig.from_yaml(scenario)
        pipeline = RailPipeline(scenario, write_outputs=False)
        asyncio.run(pipeline.run())
        track = pipeline.sim.world.track
        for record in pipeline.records:
            lambdas = record.get("lambda_min")
            if not lambdas:
                continue
            s = float(pipeline.sim.truth.profile(np.array([record["t"]]))[0][0])
            corridor = track.tag(s) == "corridor"
            for lid, lam in lambdas.items():
                (degenerate if corridor else good).append(lam)
                if corridor:
                    flags.append(record.get(f"factors_{lid}", {}).get("xi_d") == 10)
    e_lambda = calibrate_e_lambda(good, degenerate)
    good_a, deg_a = np.asarray(good), np.asarray(degenerate)
    accuracy = (np.sum(good_a > e_lambda) + np.sum(deg_a <= e_lambda)) / (len(good_a) + len(deg_a))
    report = {"e_lambda": e_lambda, "good": len(good), "degenerate": len(degenerate),
              "accuracy": float(accuracy), "xi_d_fraction": float(np.mean(flags)) if flags else 0.0}
    log.info("e_lambda calibrated", **report)
    return report


def align_check(scenario, seeds=(None,)):
    """Recover the W -> W0 extrinsic from truth positions and simulated fixes."""
    if not isinstance(scenario, ScenarioConfig):
        scenario = ScenarioConfig.from_yaml(scenario)
    reports = []
    for seed in seeds:
        sc = scenario.override("run", seed=seed)
        sim = RailSim(sc)
        s = sc.sensors
        start = sim.truth.pose(0.0)
        true_ext = GnssExtrinsic(start.rotation.yaw(), start.translation)
        projector = GnssProjector(s.gnss_origin)
        P_w0, P_b = [], []
        for i in range(int(sc.run.duration * s.gnss_rate) + 1):
            t = i / s.gnss_rate
            reading = simulate_gnss(sim.truth, s, t, i, sim.seed)
            if reading is None:
                continue
            P_w0.append(projector.project(reading).position)
            P_b.append(true_ext.from_w0(sim.truth.positions(t)[0]))
        try:
            ext = align_gnss_extrinsic(P_w0, P_b, sc.backend.align_min_pairs, sc.backend.align_min_arc)
        except UnobservableAlignment as e:
            log.error("alignment unobservable", seed=sim.seed, reason=str(e))
            reports.append({"seed": sim.seed, "error": str(e)})
            continue
        yaw_err = math.degrees(math.remainder(ext.yaw - true_ext.yaw, 2.0 * math.pi))
        reports.append({"seed": sim.seed, "yaw_error_deg": yaw_err,
                        "translation_error": float(np.linalg.norm(ext.p - true_ext.p)), "pairs": len(P_b)})
        log.info("alignment checked", **reports[-1])
    return reports
