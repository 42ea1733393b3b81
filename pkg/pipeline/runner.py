# =============================================================================
# PIPELINE RUNNER - pipeline/runner.py
# =============================================================================
# Tracking -> enhancement -> mapping.
#
# Async mode runs one thread per stage connected by bounded FIFO channels;
# a secured keyframe is the only message that crosses a stage boundary and
# keyframes are never dropped. The mapping thread keeps optimizing and
# picks up new keyframes between steps. Sync mode runs the same stage
# functions in lockstep on the calling thread (bit-reproducible).
#
# On stream end tracking flushes its pending keyframes, enhancement drains,
# mapping runs `final_steps` refinement steps, then artifacts are written.
# A failing stage stops the others; whatever exists is still written and
# the StageFailure is re-raised with `.artifacts` attached.
# =============================================================================

from __future__ import annotations

import json
import logging
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from config import PipelineConfig, save_config
from enhancement.enhancer import enhance_keyframe, rgb_only_keyframe
from errors import StageFailure
from evaluation.trajectory import Trajectory, save_tum
from field.checkpoint import save_checkpoint
from mapping.mapper import Mapper
from pipeline.dataset import save_intrinsics
from pipeline.keyframes import DUMP_DIR, save_keyframe
from telemetry import TelemetryWriter
from tracking.providers import ZeroFlowProvider
from tracking.tracker import Tracker

logger = logging.getLogger(__name__)

TRAJ_TRACKING = "traj_tracking.txt"
TRAJ_REFINED = "traj_refined.txt"
CHECKPOINT = "checkpoint.bin"
TELEMETRY = "telemetry.jsonl"
CONFIG = "config.env"
SUMMARY = "run.json"
INTRINSICS = "intrinsics.txt"
POLL_SECONDS = 0.05

_END = object()


class _Aborted(Exception):
    """Another stage failed; unwind quietly."""


# =============================================================================
# CHANNELS
# =============================================================================
class Channel:
    """Bounded FIFO between two stages; tracks its high-water mark."""

    def __init__(self, name, capacity, stop, telemetry=None):
        self.name = name
        self.queue = queue.Queue(maxsize=capacity)
        self.stop = stop
        self.telemetry = telemetry
        self.high_water = 0

    def put(self, item):
        while not self.stop.is_set():
            try:
                self.queue.put(item, timeout=POLL_SECONDS)
            except queue.Full:
                continue
            self._observe()
            return
        raise _Aborted()

    def get(self, block=True):
        """Next item, or _END once closed or stopped; raises queue.Empty when not blocking."""
        if not block:
            return self.queue.get_nowait()
        while not self.stop.is_set():
            try:
                return self.queue.get(timeout=POLL_SECONDS)
            except queue.Empty:
                continue
        return _END

    def close(self):
        try:
            self.put(_END)
        except _Aborted:
            pass

    def _observe(self):
        size = self.queue.qsize()
        self.high_water = max(self.high_water, size)
        if self.telemetry is not None:
            self.telemetry.observe_queue(self.name, size)


# =============================================================================
# ARTIFACTS
# =============================================================================
@dataclass
class RunArtifacts:
    out_dir: Path
    tracking: Trajectory
    refined: Trajectory
    files: dict = field(default_factory=dict)
    keyframes: int = 0
    dropped: list = field(default_factory=list)
    steps: int = 0
    high_water: dict = field(default_factory=dict)
    failure: StageFailure | None = None
    mapper: Mapper | None = None


def refined_trajectory(tracked, keyframe_poses, tracker_keyframe_poses):
    """
    Every tracked frame re-expressed relative to its latest keyframe's
    refined pose: T_f = (T_f^track T_k^track^-1) T_k^refined.

    Args:
        tracked: list of (timestamp, Pose) from the tracker.
        keyframe_poses: {timestamp: refined Pose}.
        tracker_keyframe_poses: {timestamp: tracker Pose} for the same keyframes.
    """
    if not keyframe_poses:
        return Trajectory(np.zeros(0), [])
    kf_stamps = np.array(sorted(keyframe_poses))
    stamps, poses = [], []
    for t, pose in tracked:
        k = max(int(np.searchsorted(kf_stamps, t, side="right")) - 1, 0)
        ref = kf_stamps[k]
        rel = pose @ tracker_keyframe_poses[ref].inverse()
        stamps.append(t)
        poses.append(rel @ keyframe_poses[ref])
    return Trajectory(np.array(stamps), poses)


# =============================================================================
# PROVIDERS
# =============================================================================
def build_providers(dataset, config, gt_lookup):
    """
    Correspondence and prior providers for a dataset.

    Synthetic datasets get the ground-truth oracles, reading GT poses from
    `gt_lookup` (tracker frame id -> Pose), which the tracking stage fills
    before each frame. Other datasets fall back to zero flow and rgb-only
    keyframes.
    """
    if dataset.scene is not None and dataset.groundtruth is not None:
        from synth.oracles import OracleNoise, make_flow_oracle, make_prior_oracle

        noise = OracleNoise.from_config(config.oracle, seed=config.run.seed)
        intr = dataset.intrinsics
        return (
            make_flow_oracle(dataset.scene, noise, gt_lookup, intr),
            make_prior_oracle(dataset.scene, noise, gt_lookup, intr),
        )
    logger.warning("no correspondence or prior networks available, using zero flow and rgb-only keyframes")
    return ZeroFlowProvider(), None


# =============================================================================
# RUNNER
# =============================================================================
class PipelineRunner:
    """
    Args:
        config: PipelineConfig.
        dataset: DatasetStream.
        out_dir: Artifact directory (default config.run.out_dir).
        flow_provider, prior_provider: Override the dataset's providers.
        mapping: False runs tracking and enhancement only.
    """

    def __init__(self, config, dataset, out_dir=None, flow_provider=None, prior_provider=None, mapping=True):
        self.cfg = config or PipelineConfig()
        self.dataset = dataset
        self.out_dir = Path(out_dir or self.cfg.run.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.intr = dataset.intrinsics
        self.telemetry = TelemetryWriter(self.out_dir / TELEMETRY)
        self.gt_lookup = {}
        flow, prior = build_providers(dataset, self.cfg, self.gt_lookup)
        self.flow_provider = flow_provider or flow
        self.prior_provider = prior_provider or prior
        self.tracker = Tracker(self.intr, self.flow_provider, self.cfg.tracker, seed=self.cfg.run.seed)
        self.mapper = Mapper(self.intr, self.cfg, self.telemetry, seed=self.cfg.run.seed) if mapping else None
        self.stop = threading.Event()
        self.failures = []
        self.keyframes = 0
        self.channels = {}

    # --- stage bodies ---------------------------------------------------------
    def _gt_pose(self, timestamp):
        gt = self.dataset.groundtruth
        if gt is None or len(gt) == 0:
            return None
        k = int(np.argmin(np.abs(gt.timestamps - timestamp)))
        return gt.poses[k]

    def track(self, entry, image):
        pose = self._gt_pose(entry.timestamp)
        if pose is not None:
            self.gt_lookup[self.tracker.counter] = pose
        out = self.tracker.track_frame(image, entry.timestamp)
        self.telemetry.write({
            "stage": "tracking",
            "frame": out.frame_id,
            "timestamp": out.timestamp,
            "dropped": out.dropped,
            "secured": [kf.frame_id for kf in out.secured],
            "ba_cost": None if out.ba is None else out.ba.cost,
        })
        return out.secured

    def enhance(self, keyframe):
        if self.prior_provider is None:
            enhanced = rgb_only_keyframe(keyframe, "no prior provider")
        else:
            enhanced = enhance_keyframe(keyframe, self.prior_provider, config=self.cfg.alignment)
        self.keyframes += 1
        if self.cfg.run.keyframe_dump:
            save_keyframe(enhanced, self.out_dir / DUMP_DIR)
        self.telemetry.write({
            "stage": "enhancement",
            "frame": enhanced.frame_id,
            "rgb_only": enhanced.rgb_only,
            "alpha": enhanced.alpha,
            "beta": enhanced.beta,
        })
        return enhanced

    def insert(self, enhanced):
        if self.mapper is not None:
            self.mapper.insert_keyframe(enhanced)

    def train(self, steps):
        if self.mapper is None or not self.mapper.ready:
            return
        for _ in range(steps):
            if self.stop.is_set():
                return
            self.mapper.step()

    # --- modes ----------------------------------------------------------------
    def _frames(self):
        return self.dataset.iter_frames(self.cfg.run.max_frames)

    def _fail(self, stage, exc):
        failure = exc if isinstance(exc, StageFailure) else StageFailure(stage, exc)
        logger.error("%s", failure)
        self.failures.append(failure)
        self.stop.set()

    def _in_stage(self, stage, fn, *args):
        try:
            return fn(*args)
        except StageFailure:
            raise
        except Exception as exc:
            raise StageFailure(stage, exc) from exc

    def run_sync(self):
        try:
            for entry, image in self._frames():
                self._consume(self._in_stage("tracking", self.track, entry, image))
            self._consume(self._in_stage("tracking", self.tracker.flush))
            self._in_stage("mapping", self.train, self.cfg.mapping.final_steps)
        except StageFailure as failure:
            self._fail(failure.stage, failure)

    def _consume(self, secured):
        for keyframe in secured:
            enhanced = self._in_stage("enhancement", self.enhance, keyframe)
            self._in_stage("mapping", self.insert, enhanced)
            self._in_stage("mapping", self.train, self.cfg.mapping.steps_per_keyframe)

    def run_async(self):
        capacity = self.cfg.run.channel_capacity
        to_enhance = Channel("tracking->enhancement", capacity, self.stop, self.telemetry)
        to_map = Channel("enhancement->mapping", capacity, self.stop, self.telemetry)
        self.channels = {c.name: c for c in (to_enhance, to_map)}

        def tracking():
            try:
                for entry, image in self._frames():
                    if self.stop.is_set():
                        return
                    for keyframe in self.track(entry, image):
                        to_enhance.put(keyframe)
                for keyframe in self.tracker.flush():
                    to_enhance.put(keyframe)
            finally:
                to_enhance.close()

        def enhancement():
            try:
                while (item := to_enhance.get()) is not _END:
                    to_map.put(self.enhance(item))
            finally:
                to_map.close()

        def mapping():
            ended = False
            while not ended:
                waiting = self.mapper is None or not self.mapper.ready
                while True:
                    try:
                        item = to_map.get(block=waiting)
                    except queue.Empty:
                        break
                    if item is _END:
                        ended = True
                        break
                    self.insert(item)
                    waiting = False
                if not ended:
                    self.train(1)
            if not self.stop.is_set():
                self.train(self.cfg.mapping.final_steps)

        threads = [
            threading.Thread(target=self._guard, args=(name, body), name=f"densevo-{name}", daemon=True)
            for name, body in (("tracking", tracking), ("enhancement", enhancement), ("mapping", mapping))
        ]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()

    def _guard(self, stage, body):
        try:
            body()
        except _Aborted:
            pass
        except Exception as exc:
            self._fail(stage, exc)

    # --- artifacts ------------------------------------------------------------
    def run(self):
        mode = "sync" if self.cfg.run.sync else "async"
        logger.info("pipeline start (%s, %d frames) -> %s", mode, len(self.dataset), self.out_dir)
        if self.cfg.run.sync:
            self.run_sync()
        else:
            self.run_async()
        artifacts = self.write_artifacts()
        if self.failures:
            failure = self.failures[0]
            failure.artifacts = artifacts
            raise failure
        return artifacts

    def write_artifacts(self):
        out = self.out_dir
        files = {}
        tracked = self.tracker.trajectory()
        tracking = Trajectory(np.array([t for t, _ in tracked]), [p for _, p in tracked])
        save_tum(tracking, out / TRAJ_TRACKING, header="tracking estimate")
        files["traj_tracking"] = out / TRAJ_TRACKING

        refined = Trajectory(np.zeros(0), [])
        mapper = self.mapper
        if mapper is not None and len(mapper.database):
            records = mapper.database.records
            refined_kf = {r.timestamp: r.pose for r in records}
            tracker_kf = {r.timestamp: self.tracker.get_pose(r.frame_id) for r in records}
            refined = refined_trajectory(tracked, refined_kf, tracker_kf)
        save_tum(refined, out / TRAJ_REFINED, header="mapping-refined estimate")
        files["traj_refined"] = out / TRAJ_REFINED

        if mapper is not None and mapper.field.aabb is not None:
            save_checkpoint(out / CHECKPOINT, mapper.snapshot(), mapper.refined_poses())
            files["checkpoint"] = out / CHECKPOINT
        save_config(self.cfg, out / CONFIG)
        save_intrinsics(self.intr, out / INTRINSICS)
        files.update(config=out / CONFIG, telemetry=out / TELEMETRY, intrinsics=out / INTRINSICS)

        artifacts = RunArtifacts(
            out_dir=out,
            tracking=tracking,
            refined=refined,
            files=files,
            keyframes=self.keyframes,
            dropped=self.tracker.dropped,
            steps=0 if mapper is None else mapper.step_count,
            high_water=dict(self.telemetry.high_water),
            failure=self.failures[0] if self.failures else None,
            mapper=mapper,
        )
        summary = {
            "frames": len(tracking),
            "keyframes": artifacts.keyframes,
            "dropped": artifacts.dropped,
            "steps": artifacts.steps,
            "skipped_steps": 0 if mapper is None else mapper.skipped,
            "high_water": artifacts.high_water,
            "mode": "sync" if self.cfg.run.sync else "async",
            "dataset": str(self.dataset.root),
            "failure": None if artifacts.failure is None else str(artifacts.failure),
        }
        self.telemetry.write({"stage": "pipeline", **summary})
        (out / SUMMARY).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        files["summary"] = out / SUMMARY
        logger.info(
            "pipeline done: %d frames, %d keyframes, %d mapping steps",
            len(tracking), artifacts.keyframes, artifacts.steps,
        )
        return artifacts


def run_pipeline(config, dataset, out_dir=None, flow_provider=None, prior_provider=None, mapping=True):
    """
    Run the three stages over a dataset and write the run artifacts.

    Returns:
        RunArtifacts

    Raises:
        StageFailure: after partial artifacts are written; `.artifacts`
            holds them.
    """
    runner = PipelineRunner(config, dataset, out_dir, flow_provider, prior_provider, mapping)
    return runner.run()


def map_keyframes(config, keyframes, intr, out_dir, telemetry=None):
    """
    Offline mapping over dumped keyframes: insert each keyframe, train
    `steps_per_keyframe` steps, then `final_steps`.

    Returns:
        Mapper
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    telemetry = telemetry or TelemetryWriter(out / TELEMETRY)
    mapper = Mapper(intr, config, telemetry, seed=config.run.seed)
    for keyframe in keyframes:
        mapper.insert_keyframe(keyframe)
        if mapper.ready:
            mapper.run(config.mapping.steps_per_keyframe)
    if mapper.ready:
        mapper.run(config.mapping.final_steps)
        save_checkpoint(out / CHECKPOINT, mapper.snapshot(), mapper.refined_poses())
    refined = Trajectory.from_dict({r.timestamp: r.pose for r in mapper.database.records})
    save_tum(refined, out / TRAJ_REFINED, header="mapping-refined keyframes")
    return mapper
