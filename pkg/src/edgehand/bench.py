"""Synthetic sequences and the offloading experiment matrix."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import rng
from .config import ConfigError, Settings, check_keys, from_dict
from .kinematics import DepthMap, forward_kinematics, render_pose
from .offload import (
    ConfigurationError,
    Dispatcher,
    Granularity,
    LocalExecutor,
    Policy,
    PolicyConfig,
    RemoteExecutor,
)
from .tracker import FrameClock, TrackRecord, _jsonable, track_sequence
from .transport.channel import Channel, LoopbackChannel, SocketChannel, parse_address
from .transport.simnet import SimulatedLink, get_profile

log = logging.getLogger(__name__)


def _quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def _axis_angle_quat(v):
    angle = float(np.linalg.norm(v))
    if angle == 0.0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = np.asarray(v) / angle
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


class SequenceError(ValueError):
    pass


@dataclass(frozen=True)
class SequenceSpec:
    frame_count: int = 300
    fps: float = 30.0
    base_position: tuple = (0.0, 0.04, 0.40)
    # fingers up in the image, tilted 0.7 rad about x so flexion is not purely along the view ray
    base_orientation: tuple = (0.0, 0.0, -0.34289780745545134, 0.9393727128473789)
    translation_amplitude_m: float = 0.03
    rotation_amplitude_rad: float = 0.25
    flexion_mean_rad: float = 0.6
    flexion_amplitude_rad: float = 0.5
    abduction_amplitude_rad: float = 0.15
    noise_sigma_m: float = 0.002
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "base_position", tuple(float(v) for v in self.base_position))
        object.__setattr__(self, "base_orientation", tuple(float(v) for v in self.base_orientation))
        if self.frame_count < 0 or self.fps <= 0 or self.noise_sigma_m < 0:
            raise ValueError("frame_count, fps and noise_sigma_m must be non-negative (fps positive)")

    def pose_at(self, t_s: float) -> np.ndarray:
        tau = 2.0 * np.pi * t_s
        a = self.translation_amplitude_m
        h = np.zeros(27)
        h[0:3] = np.asarray(self.base_position) + a * np.array([
            np.sin(tau / 4.0), 0.7 * np.sin(tau / 5.0 + 1.0), 0.8 * np.sin(tau / 6.0 + 2.0)])
        r = self.rotation_amplitude_rad
        spin = r * np.array([np.sin(tau / 5.0 + 0.5), np.sin(tau / 7.0 + 1.5), 0.6 * np.sin(tau / 6.0)])
        q = _quat_mul(_axis_angle_quat(spin), np.asarray(self.base_orientation))
        h[3:7] = q / np.linalg.norm(q)
        for f in range(5):
            b = 7 + 4 * f
            phase = tau / 3.0 + 0.7 * f
            h[b] = self.flexion_mean_rad + self.flexion_amplitude_rad * np.sin(phase)
            h[b + 1] = self.abduction_amplitude_rad * np.sin(tau / 4.0 + f)
            h[b + 2] = self.flexion_mean_rad + self.flexion_amplitude_rad * np.sin(phase + 0.5)
            h[b + 3] = 0.7 * (self.flexion_mean_rad + self.flexion_amplitude_rad * np.sin(phase + 1.0))
        return h


@dataclass
class SyntheticSequence:
    spec: SequenceSpec
    frames: list
    ground_truth: np.ndarray
    timestamps_ms: np.ndarray


def generate_sequence(spec: SequenceSpec, settings: Settings = Settings()) -> SyntheticSequence:
    g, k = settings.geometry, settings.camera
    frames, poses = [], []
    for i in range(spec.frame_count):
        h = spec.pose_at(i / spec.fps)
        art = h[7:27]
        if np.any(art < g.limits[:, 0]) or np.any(art > g.limits[:, 1]):
            raise SequenceError(f"frame {i}: bone angles leave the joint limits")
        if np.any(forward_kinematics(h, g).centers[:, 2] <= 0.05):
            raise SequenceError(f"frame {i}: hand comes too close to or behind the camera")
        depth = render_pose(h, g, k).samples
        if spec.noise_sigma_m > 0:
            noise = rng.normal_block(spec.seed, rng.STREAM_SEQUENCE, i, depth.shape)
            hit = depth > 0
            depth = depth.copy()
            depth[hit] = np.maximum(depth[hit] + spec.noise_sigma_m * noise[hit], 0.0)
        frames.append(DepthMap(depth))
        poses.append(h)
    ts = np.arange(spec.frame_count) * (1000.0 / spec.fps)
    return SyntheticSequence(spec, frames, np.array(poses).reshape(-1, 27), ts)


# -- experiment matrix -------------------------------------------------------

@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    granularity: str = "single_step"
    policy: str = "local_only"
    network: Optional[str] = None
    local_role: str = "laptop"
    remote_role: str = "server"
    clock: str = "virtual"
    remote_address: Optional[str] = None

    def __post_init__(self):
        Granularity(self.granularity)
        policy = Policy(self.policy)
        if self.clock not in ("virtual", "wall"):
            raise ValueError("clock must be 'virtual' or 'wall'")
        if policy != Policy.LOCAL_ONLY:
            if self.clock == "virtual" and self.network is None:
                raise ValueError(f"scenario {self.name!r}: {self.policy} needs a network profile")
            if self.clock == "wall" and self.remote_address is None:
                raise ValueError(f"scenario {self.name!r}: wall-clock {self.policy} needs remote_address")
        if self.network is not None:
            get_profile(self.network)


@dataclass(frozen=True)
class BenchConfig:
    exec_models: dict = field(default_factory=lambda: {"laptop": 19.0, "server": 6.0})
    overhead_ms: float = 0.1
    warmup_frames: int = 5


def default_scenarios() -> list:
    scenarios = []
    for role in ("server", "laptop"):
        for gran in ("single_step", "multi_step"):
            scenarios.append(ScenarioConfig(f"local_only-{role}-{gran}", gran, "local_only", local_role=role))
    for policy in ("forced", "auto"):
        for gran in ("single_step", "multi_step"):
            for net in ("ethernet", "wifi"):
                scenarios.append(ScenarioConfig(f"{policy}-{gran}-{net}", gran, policy, net))
    return scenarios


@dataclass
class ScenarioResult:
    scenario: ScenarioConfig
    record: TrackRecord
    round_trips: int
    bytes_transferred: int
    message_bytes: int
    failures: int
    warmup_frames: int

    def metrics(self) -> dict:
        r = self.record
        return {
            "achieved_fps": r.achieved_fps,
            "steady_fps": r.steady_fps(self.warmup_frames),
            "processing_fps": r.processing_fps(self.warmup_frames),
            "mean_loop_ms": r.mean_loop_ms,
            "round_trips": self.round_trips,
            "bytes_transferred": self.bytes_transferred,
            "frames_skipped": r.frames_skipped,
            "consumed_frames": len(r.consumed),
            "mean_fingertip_error_m": r.mean_fingertip_error_m,
            "track_loss_frames": list(r.track_loss_frames),
            "failures": self.failures,
        }


@dataclass
class Report:
    results: list = field(default_factory=list)

    def by_name(self) -> dict:
        return {res.scenario.name: res for res in self.results}

    def summary(self) -> dict:
        return {
            "scenarios": [
                {"name": res.scenario.name, "config": asdict(res.scenario), "metrics": res.metrics()}
                for res in self.results
            ]
        }

    def table(self) -> str:
        networks = sorted({res.scenario.network for res in self.results if res.scenario.network})
        rows: dict = {}
        for res in self.results:
            s = res.scenario
            label = f"{s.policy}/{s.granularity}" + (f" ({s.local_role})" if s.policy == "local_only" else "")
            rows.setdefault(label, {})[s.network] = res.metrics()
        lines = []
        for key, title in (("steady_fps", "steady fps, capped at the source rate"),
                           ("processing_fps", "processing fps, uncapped")):
            header = f"{'scenario':<34}" + "".join(f"{n:>12}" for n in networks or ["-"])
            lines += [f"{title} (warm-up excluded; local_only rows ignore the network)", header, "-" * len(header)]
            for label, cells in rows.items():
                if None in cells:
                    values = [cells[None][key]] * max(len(networks), 1)
                else:
                    values = [cells[n][key] if n in cells else float("nan") for n in networks]
                lines.append(f"{label:<34}" + "".join(f"{v:>12.2f}" for v in values))
            lines.append("")
        return "\n".join(lines)


def _remote_channel(scenario: ScenarioConfig, settings: Settings) -> Channel:
    if scenario.clock == "wall":
        host, port = parse_address(scenario.remote_address)
        return SocketChannel(host, port)
    return LoopbackChannel(settings)


def run_scenario(scenario: ScenarioConfig, sequence: SyntheticSequence, settings: Settings,
                 bench: BenchConfig = BenchConfig(), trace: Optional[list] = None) -> ScenarioResult:
    virtual = scenario.clock == "virtual"
    models = bench.exec_models
    try:
        local_ms = models[scenario.local_role] if virtual else None
        remote_ms = models[scenario.remote_role] if virtual else None
    except KeyError as exc:
        raise ConfigurationError(f"no exec model for role {exc}") from None
    policy = PolicyConfig(mode=scenario.policy)
    remote = None
    channel = None
    if policy.policy != Policy.LOCAL_ONLY:
        channel = _remote_channel(scenario, settings)
        if trace is not None and isinstance(channel, LoopbackChannel):
            channel.session.trace = trace
        link = SimulatedLink(get_profile(scenario.network)) if virtual else None
        remote = RemoteExecutor(channel, link, remote_ms, policy.timeout_ms)
    dispatcher = Dispatcher(settings, policy, scenario.granularity,
                            LocalExecutor(settings, local_ms, trace), remote, bench.overhead_ms)
    try:
        record = track_sequence(
            sequence.frames, sequence.ground_truth[0], settings, dispatcher,
            FrameClock(sequence.spec.fps), sequence.timestamps_ms, sequence.ground_truth,
            wall_clock=not virtual,
        )
    finally:
        if channel is not None:
            channel.close()
    bytes_total = channel.bytes_transferred if channel else 0
    message_bytes = (sum(channel.sent_sizes) + sum(channel.received_sizes)) if channel else 0
    return ScenarioResult(scenario, record, dispatcher.step_round_trips, bytes_total, message_bytes,
                          dispatcher.stats.failures, bench.warmup_frames)


def run_matrix(scenarios: Sequence[ScenarioConfig], sequence: SyntheticSequence, settings: Settings = Settings(),
               bench: BenchConfig = BenchConfig(), trace: Optional[list] = None) -> Report:
    report = Report()
    for scenario in scenarios:
        log.info("running scenario %s", scenario.name)
        report.results.append(run_scenario(scenario, sequence, settings, bench, trace))
    return report


def emit_report(report: Report, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "report.json", "csv": out / "frames.csv", "table": out / "table.txt"}
    paths["json"].write_text(json.dumps(_jsonable(report.summary()), indent=2, sort_keys=True) + "\n")
    with open(paths["csv"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scenario"] + TrackRecord.csv_header())
        for res in report.results:
            for row in res.record.csv_rows(consumed_only=True):
                writer.writerow([res.scenario.name] + row)
    paths["table"].write_text(report.table())
    return paths


def load_matrix(data: dict) -> tuple:
    """Parse a matrix config into (settings, sequence spec, bench config, scenarios)."""
    check_keys(data, ("settings", "sequence", "bench", "scenarios"), "matrix")
    settings = Settings.from_sections(data.get("settings") or {})
    spec = from_dict(SequenceSpec, data.get("sequence"), "sequence")
    bench = from_dict(BenchConfig, data.get("bench"), "bench")
    if "scenarios" in data:
        if not isinstance(data["scenarios"], list):
            raise ConfigError("'scenarios' must be a list")
        scenarios = [from_dict(ScenarioConfig, s, "scenarios[]") for s in data["scenarios"]]
    else:
        scenarios = default_scenarios()
    return settings, spec, bench, scenarios


__all__ = [
    "BenchConfig", "Report", "ScenarioConfig", "ScenarioResult", "SequenceSpec", "SyntheticSequence",
    "default_scenarios", "emit_report", "generate_sequence", "load_matrix", "run_matrix", "run_scenario",
]
